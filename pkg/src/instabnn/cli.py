"""Command line: ``instabnn {train,eval,cost,diagnose}``.

Settings come from built-in defaults, then an optional JSON ``--config``
file, then flags (flags win).  The effective configuration is echoed to
``run.log`` in the output directory.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .arch import ModelOptions, VARIANTS, ORDERINGS, resolve_arch
from .stats import THRESHOLD_VARIANTS

DATA_ENV = "INSTABNN_DATA"
CHECKPOINT_NAME = "model.ckpt"
METRICS_NAME = "metrics.log"


class CliError(Exception):
    pass


@dataclass
class RunConfig:
    command: str = "train"
    arch: str = "toy_cnn"
    variant: str = "baseline"
    th_variant: str = "cube"
    se_bound: str = "tanh3"
    se_ratio: int = 16
    prelu_bound: str = "tanh3"
    ordering: str = "sign_conv_bn"
    stage: int = 1
    ste: str = "clip1"
    quantize: str = "none"
    beta_init: float = 0.0
    data: str = "synth:separable2"
    data_dir: str | None = None
    image_size: int = 8
    train_subset: int | None = None
    test_subset: int | None = None
    augment: bool = True
    recipe: str = "ablation90"
    epochs: int | None = None
    scale: float = 1.0
    batch_size: int | None = None
    lr: float | None = None
    seed: int | None = None
    out: str = "runs/latest"
    init: str | None = None
    checkpoint: str | None = None
    freeze: list | None = None
    format: str = "table"
    per_layer: bool = False
    modes: list | None = None
    layers: str = "all"
    channels: int | None = None
    max_samples: int | None = None
    packed_weights: bool = False
    explicit: tuple = ()

    @classmethod
    def keys(cls) -> set[str]:
        return {f.name for f in fields(cls)} - {"explicit"}

    def model_options(self) -> ModelOptions:
        ste = "bireal_poly" if self.ste == "bireal" else self.ste
        return ModelOptions(variant=self.variant, th_variant=self.th_variant, se_ratio=self.se_ratio,
                            se_bound=self.se_bound, prelu_bound=self.prelu_bound,
                            ordering=self.ordering, stage=self.stage, ste=ste, beta_init=self.beta_init)


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--arch", help="built-in arch name or JSON descriptor path")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--th-variant", dest="th_variant", choices=THRESHOLD_VARIANTS)
    p.add_argument("--se-bound", dest="se_bound", choices=("sigmoid", "tanh", "tanh3"))
    p.add_argument("--se-ratio", dest="se_ratio", type=int)
    p.add_argument("--prelu-bound", dest="prelu_bound", choices=("sigmoid", "tanh", "tanh3"))
    p.add_argument("--ordering", choices=ORDERINGS)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="synth:KIND[:N], cifar10[:N] or a CIFAR-10 batch directory")
    p.add_argument("--data-dir", dest="data_dir", help=f"CIFAR-10 directory (default ${DATA_ENV})")
    p.add_argument("--image-size", dest="image_size", type=int)
    p.add_argument("--train-subset", dest="train_subset", type=int)
    p.add_argument("--test-subset", dest="test_subset", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="instabnn", description="Binary networks with instance-aware thresholds")
    parser.add_argument("--config", help="JSON file of settings (flags override it)")
    sub = parser.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write a checkpoint and metrics log")
    _add_model_flags(t)
    _add_data_flags(t)
    t.add_argument("--stage", type=int, choices=(1, 2))
    t.add_argument("--ste", choices=("clip1", "bireal", "bireal_poly"))
    t.add_argument("--quantize", choices=("none", "lsq"))
    t.add_argument("--beta-init", dest="beta_init", type=float)
    t.add_argument("--recipe", help="ablation90, cifar400 or lsq_finetune")
    t.add_argument("--epochs", type=int)
    t.add_argument("--scale", type=float, help="divide the preset's epoch count")
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    t.add_argument("--freeze", action="append", help="glob of parameter names to keep fixed")
    t.add_argument("--no-augment", dest="augment", action="store_const", const=False)
    t.add_argument("--packed-weights", dest="packed_weights", action="store_const", const=True)

    e = sub.add_parser("eval", help="top-1 accuracy of a checkpoint")
    e.add_argument("--checkpoint", help=f"checkpoint file (default OUT/{CHECKPOINT_NAME})")
    e.add_argument("--out")
    e.add_argument("--arch", help="expected arch; must match the checkpoint")
    e.add_argument("--seed", type=int)
    _add_data_flags(e)

    c = sub.add_parser("cost", help="operation and parameter counts")
    _add_model_flags(c)
    c.add_argument("--format", choices=("table", "text", "json", "both"))
    c.add_argument("--per-layer", dest="per_layer", action="store_const", const=True)
    c.add_argument("--out", help="also write cost.txt here")

    d = sub.add_parser("diagnose", help="sign-consistency ratios and instance-statistic dumps")
    d.add_argument("--checkpoint")
    d.add_argument("--out")
    d.add_argument("--arch", help="expected arch; must match the checkpoint")
    d.add_argument("--seed", type=int)
    _add_data_flags(d)
    d.add_argument("--mode", dest="modes", action="append", choices=("full", "beta_zero"))
    d.add_argument("--layers", help="all, comma-separated indices, or glob of layer names")
    d.add_argument("--channels", type=int, help="dump only the first N channels")
    d.add_argument("--max-samples", dest="max_samples", type=int)
    return parser


def resolve_config(argv=None) -> RunConfig:
    parser = build_parser()
    ns = parser.parse_args(argv)
    values: dict = {}
    if ns.config:
        try:
            file_values = json.loads(Path(ns.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config {ns.config}: {exc}")
        if not isinstance(file_values, dict):
            parser.error("config file must hold a JSON object")
        file_values = {k.replace("-", "_"): v for k, v in file_values.items()}
        unknown = sorted(set(file_values) - RunConfig.keys())
        if unknown:
            parser.error(f"unknown config keys: {', '.join(unknown)}")
        values.update(file_values)
    for k, v in vars(ns).items():
        if k == "config" or v is None:
            continue
        values[k] = v
    values["explicit"] = tuple(sorted(k for k in values if k != "command"))
    cfg = RunConfig(**values)
    if cfg.command == "train" and cfg.seed is None:
        parser.error("train requires --seed (or 'seed' in the config file)")
    return cfg


# ---------------------------------------------------------------- helpers

def _data_dir(cfg: RunConfig):
    return cfg.data_dir or os.environ.get(DATA_ENV)


def _load_data(cfg: RunConfig, seed: int, augment: bool):
    from .data import load_data

    kw = {}
    if not cfg.data.startswith("synth:"):
        kw = {"test_subset": cfg.test_subset, "augment": augment}
        if cfg.train_subset and not cfg.data.startswith("cifar10:"):
            kw["train_subset"] = cfg.train_subset
    try:
        return load_data(cfg.data, seed=seed, data_dir=_data_dir(cfg), image_size=cfg.image_size, **kw)
    except (FileNotFoundError, ValueError) as exc:
        raise CliError(str(exc)) from None


def _recipe(cfg: RunConfig):
    from .train import preset

    try:
        r = preset(cfg.recipe, scale=cfg.scale, epochs=cfg.epochs)
        over = {"stage": cfg.stage}
        if cfg.batch_size:
            over["batch_size"] = cfg.batch_size
        if cfg.lr:
            over["lr"] = cfg.lr
        return replace(r, **over)
    except ValueError as exc:
        raise CliError(str(exc)) from None


def _checkpoint_path(cfg: RunConfig) -> Path:
    return Path(cfg.checkpoint) if cfg.checkpoint else Path(cfg.out) / CHECKPOINT_NAME


def _open_checkpoint(cfg: RunConfig):
    from .checkpoint import load_model
    from .data import CheckpointError

    path = _checkpoint_path(cfg)
    if not path.exists():
        raise CliError(f"checkpoint {path} not found")
    try:
        model, ck = load_model(path)
    except CheckpointError as exc:
        raise CliError(str(exc)) from None
    stored = ck.meta.get("arch_name", model.arch.name)
    if "arch" in cfg.explicit and cfg.arch not in (stored, model.arch.name):
        raise CliError(f"checkpoint holds arch {stored!r}, not {cfg.arch!r}")
    return model, ck


def _eval_data_config(cfg: RunConfig, ck) -> tuple[RunConfig, int]:
    meta = ck.meta
    c = cfg
    if "data" not in cfg.explicit and "data" in meta:
        c = replace(c, data=meta["data"], image_size=meta.get("image_size", c.image_size),
                    test_subset=meta.get("test_subset", c.test_subset))
    seed = cfg.seed if cfg.seed is not None else int(meta.get("seed", 0))
    return c, seed


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig) -> int:
    from .checkpoint import load_model, save_model
    from .data import CheckpointError
    from .nn.models import build_model
    from .quant import attach_quantizers
    from .train import TrainingDiverged, train

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    train_set, eval_set = _load_data(cfg, cfg.seed, cfg.augment)
    try:
        arch = resolve_arch(cfg.arch)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    overrides = {}
    if train_set.num_classes != arch.num_classes:
        overrides["num_classes"] = train_set.num_classes
    if tuple(arch.input_shape) != train_set.image_shape:
        if arch.name == "toy_cnn":
            overrides["input_shape"] = train_set.image_shape
        else:
            raise CliError(f"{arch.name} expects input {arch.input_shape}, data gives {train_set.image_shape}")
    if overrides:
        arch = replace(arch, **overrides)
    recipe = _recipe(cfg)
    try:
        opts = cfg.model_options()
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if cfg.stage == 2 and not cfg.init:
        raise CliError("stage 2 starts from a stage-1 checkpoint: pass --init")
    model = build_model(arch, opts, seed=cfg.seed)
    if cfg.quantize == "lsq" and not model.insta_modules():
        raise CliError("--quantize lsq needs an insta or insta_plus variant")
    if cfg.init:
        try:
            init_model, _ = load_model(cfg.init)
        except (CheckpointError, OSError) as exc:
            raise CliError(f"cannot load --init: {exc}") from None
        if _quantized(init_model):
            attach_quantizers(model)
        try:
            model.load_state_dict(init_model.state_dict())
        except (KeyError, ValueError) as exc:
            raise CliError(f"--init checkpoint does not fit this model: {exc}") from None
    if cfg.quantize == "lsq" and not _quantized(model):
        # steps calibrate on the first training batch
        attach_quantizers(model)

    run_log = out / "run.log"
    effective = asdict(cfg)
    effective.pop("explicit")
    with open(run_log, "w", encoding="utf-8") as fh:
        fh.write("config " + json.dumps(effective, sort_keys=True) + "\n")
        fh.write("recipe " + json.dumps(recipe.to_dict(), sort_keys=True) + "\n")
        fh.write(f"parameters {model.num_parameters()}\n")
    metrics = out / METRICS_NAME
    if metrics.exists():
        metrics.unlink()

    first: list[float] = []

    def note_first(epoch, i, loss):
        if not first:
            first.append(loss)
            with open(run_log, "a", encoding="utf-8") as fh:
                fh.write(f"first_step_loss {loss!r}\n")

    try:
        history, state = train(model, train_set, recipe, eval_set, seed=cfg.seed, log_path=metrics,
                               frozen=tuple(cfg.freeze or ()), dump_dir=out, on_step=note_first)
    except TrainingDiverged as exc:
        with open(run_log, "a", encoding="utf-8") as fh:
            fh.write(f"diverged {exc}\n")
        raise CliError(f"training diverged: {exc} (dump in {out / 'divergence.json'})") from None

    final_train = [r for r in history if r.split == "train"][-1]
    final_eval = [r for r in history if r.split == "eval"][-1]
    meta = {"arch_name": arch.name, "recipe": recipe.to_dict(), "seed": cfg.seed, "stage": cfg.stage,
            "data": cfg.data, "image_size": cfg.image_size, "test_subset": cfg.test_subset,
            "quantize": cfg.quantize, "norm_mean": list(train_set.mean), "norm_std": list(train_set.std),
            "final": {"train_loss": final_train.loss, "train_acc": final_train.acc,
                      "eval_loss": final_eval.loss, "eval_acc": final_eval.acc}}
    save_model(out / CHECKPOINT_NAME, model, meta, state, packed_weights=cfg.packed_weights)
    with open(run_log, "a", encoding="utf-8") as fh:
        fh.write(f"final train_acc={final_train.acc:.6f} eval_acc={final_eval.acc:.6f}\n")
    print(f"train_loss={final_train.loss:.6f} train_acc={final_train.acc:.6f} "
          f"eval_loss={final_eval.loss:.6f} eval_acc={final_eval.acc:.6f}")
    print(f"checkpoint {out / CHECKPOINT_NAME}")
    return 0


def _quantized(model) -> bool:
    return any(type(m).__name__ == "LsqQuantizer" for m in model.modules())


def cmd_eval(cfg: RunConfig) -> int:
    from .train import evaluate

    model, ck = _open_checkpoint(cfg)
    dcfg, seed = _eval_data_config(cfg, ck)
    _, eval_set = _load_data(dcfg, seed, augment=False)
    if eval_set.image_shape != tuple(model.arch.input_shape):
        raise CliError(f"data shape {eval_set.image_shape} does not match model input {model.arch.input_shape}")
    acc, loss = evaluate(model, eval_set)
    print(f"top1={acc:.6f} loss={loss:.6f} samples={len(eval_set)}")
    return 0


def cmd_cost(cfg: RunConfig) -> int:
    from .cost import cost_of_arch

    try:
        arch = resolve_arch(cfg.arch)
        report = cost_of_arch(arch, cfg.model_options())
    except ValueError as exc:
        raise CliError(str(exc)) from None
    fmt = cfg.format
    if fmt in ("table", "both"):
        print(report.table(per_layer=cfg.per_layer), end="")
    if fmt in ("text", "both", "table"):
        # the structured lines always follow the human table
        print(report.to_text(), end="")
    if fmt == "json":
        print(report.to_json())
    if "out" in cfg.explicit:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cost.txt").write_text(report.to_text(), encoding="utf-8")
    return 0


def cmd_diagnose(cfg: RunConfig) -> int:
    from .diagnostics import instance_stats_dump, sign_consistency, write_stats_csv

    model, ck = _open_checkpoint(cfg)
    dcfg, seed = _eval_data_config(cfg, ck)
    _, eval_set = _load_data(dcfg, seed, augment=False)
    modes = cfg.modes or (["full", "beta_zero"] if model.insta_modules() else ["full"])
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for mode in modes:
        rep = sign_consistency(model, eval_set, mode=mode, max_samples=cfg.max_samples)
        rows.extend(rep.to_csv_rows())
        print(f"mode={mode} samples={rep.samples} mean_ratio={rep.mean_ratio():.6f}")
        for la in rep.layers:
            print(f"  {la.name:<16} {la.ratio:.6f}")
    with open(out / "sign_consistency.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "layer", "inconsistent", "total", "ratio"])
        w.writerows(rows)
    n = cfg.max_samples or min(len(eval_set), 16)
    batch = eval_set.images[:n]
    try:
        records = instance_stats_dump(model, batch, cfg.layers, cfg.channels)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    write_stats_csv(records, out / "instance_stats.csv")
    print(f"instance stats: {len(records)} rows -> {out / 'instance_stats.csv'}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "cost": cmd_cost, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    cfg = resolve_config(argv)
    try:
        return COMMANDS[cfg.command](cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

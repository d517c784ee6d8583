"""Optimizers, learning-rate schedules and the training loop."""
from __future__ import annotations

import fnmatch
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autograd as ag

__all__ = [
    "Recipe", "PRESETS", "preset", "lr_at", "OptimState", "optimizer_step", "TrainingDiverged",
    "EpochRecord", "train", "evaluate", "train_step",
]

SCHEDULES = ("step", "cosine", "linear", "constant")
OPTIMIZERS = ("adam", "adamw")


@dataclass(frozen=True)
class Recipe:
    optimizer: str = "adam"
    lr: float = 1e-3
    schedule: str = "step"
    epochs: int = 90
    warmup_epochs: float = 5.0
    weight_decay: float = 0.0
    batch_size: int = 64
    milestones: tuple[float, ...] = (40.0, 60.0, 80.0)
    gamma: float = 0.1
    stage: int = 1
    se_extra_epochs: int = 0
    name: str = "custom"

    def __post_init__(self):
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}; expected one of {OPTIMIZERS}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown schedule {self.schedule!r}; expected one of {SCHEDULES}")
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.warmup_epochs < 0 or self.weight_decay < 0:
            raise ValueError("warmup_epochs and weight_decay must be >= 0")

    def with_epochs(self, epochs: int) -> "Recipe":
        """Same schedule shape over a different length (milestones and warmup rescale)."""
        f = epochs / self.epochs
        return replace(self, epochs=int(epochs), warmup_epochs=self.warmup_epochs * f,
                       milestones=tuple(m * f for m in self.milestones))

    def scaled(self, divisor: float) -> "Recipe":
        return self.with_epochs(max(1, int(round(self.epochs / divisor))))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        d = dict(d)
        if "milestones" in d:
            d["milestones"] = tuple(float(m) for m in d["milestones"])
        return cls(**d)


PRESETS = {
    "ablation90": Recipe("adam", 1e-3, "step", 90, 5.0, 0.0, 64, (40.0, 60.0, 80.0), name="ablation90"),
    "cifar400": Recipe("adamw", 3e-3, "cosine", 400, 0.0, 1e-4, 256, (), name="cifar400"),
    "lsq_finetune": Recipe("adam", 1e-4, "linear", 90, 0.0, 0.0, 64, (), se_extra_epochs=5,
                           name="lsq_finetune"),
}


def preset(name: str, scale: float = 1.0, epochs: int | None = None, **overrides) -> Recipe:
    try:
        r = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown recipe preset {name!r}; expected one of {sorted(PRESETS)}") from None
    if epochs is not None:
        r = r.with_epochs(epochs)
    elif scale != 1.0:
        r = r.scaled(scale)
    return replace(r, **overrides) if overrides else r


def lr_at(recipe: Recipe, epoch: float) -> float:
    """Learning rate at a (possibly fractional) epoch."""
    lr0, w = recipe.lr, recipe.warmup_epochs
    if w > 0 and epoch < w:
        return lr0 * epoch / w
    if recipe.schedule == "constant":
        return lr0
    if recipe.schedule == "step":
        k = sum(1 for m in recipe.milestones if epoch >= m)
        return lr0 * recipe.gamma ** k
    span = max(recipe.epochs - w, 1e-12)
    t = min(max((epoch - w) / span, 0.0), 1.0)
    if recipe.schedule == "cosine":
        return lr0 * 0.5 * (1.0 + math.cos(math.pi * t))
    return lr0 * (1.0 - t)


@dataclass
class OptimState:
    """Adam moments keyed by parameter name."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def to_tensors(self) -> dict:
        out = {"step": np.array([self.step], dtype=np.int32)}
        for k in self.m:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    @classmethod
    def from_tensors(cls, t: dict) -> "OptimState":
        st = cls(step=int(np.asarray(t["step"]).reshape(-1)[0]))
        for k, val in t.items():
            if k.startswith("m."):
                st.m[k[2:]] = np.array(val)
            elif k.startswith("v."):
                st.v[k[2:]] = np.array(val)
        return st


def optimizer_step(kind: str, state: OptimState, params: dict, lr: float, wd: float = 0.0) -> None:
    """One Adam/AdamW update in place over ``{name: Parameter}`` with ``.grad`` set.

    ``adam`` adds ``wd * theta`` to the gradient; ``adamw`` decays the weight
    directly by ``lr * wd``.  Decay only touches parameters flagged ``decay``.
    Latent clip and floor constraints are applied afterwards.
    """
    if kind not in OPTIMIZERS:
        raise ValueError(f"unknown optimizer {kind!r}")
    if lr <= 0:
        raise ValueError("learning rate must be > 0")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        theta = p.data.astype(np.float64)
        decay = wd if p.decay else 0.0
        if kind == "adam" and decay:
            g = g + decay * theta
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        if kind == "adamw" and decay:
            theta = theta * (1 - lr * decay)
        theta = theta - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if p.clip is not None:
            theta = np.clip(theta, -p.clip, p.clip)
        if p.floor is not None:
            theta = np.maximum(theta, p.floor)
        p.data = theta.astype(p.dtype)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    split: str
    loss: float
    acc: float
    lr: float

    def line(self) -> str:
        return f"{self.epoch},{self.split},{self.loss:.6f},{self.acc:.6f},{self.lr:.8g}"


def _trainable(model, frozen: tuple[str, ...]) -> dict:
    out = {}
    for name, p in model.named_parameters():
        if any(fnmatch.fnmatchcase(name, pat) for pat in frozen):
            continue
        out[name] = p
    return out


def train_step(model, images, labels, recipe: Recipe, state: OptimState, lr: float,
               params: dict | None = None) -> tuple[float, int]:
    """Forward, backward and one optimizer step; returns ``(loss, correct)``."""
    model.zero_grad()
    logits = model(images)
    loss = ag.cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value}")
    loss.backward()
    optimizer_step(recipe.optimizer, state, params if params is not None else dict(model.named_parameters()),
                   lr, recipe.weight_decay)
    correct = int((np.argmax(logits.data, axis=1) == labels).sum())
    return value, correct


def _dump_divergence(path: Path, model, epoch: int, batch: int, msg: str) -> None:
    info = {"epoch": epoch, "batch": batch, "error": msg, "parameters": {}}
    for name, p in model.named_parameters():
        d = p.data.astype(np.float64)
        fin = np.abs(d[np.isfinite(d)])
        info["parameters"][name] = {"finite": bool(fin.size == d.size),
                                    "max_abs_finite": float(fin.max()) if fin.size else 0.0}
    path.write_text(json.dumps(info, indent=1) + "\n", encoding="utf-8")


def evaluate(model, dataset, batch_size: int = 256) -> tuple[float, float]:
    """``(top-1 accuracy, mean loss)`` in eval mode; argmax ties go to the lowest index."""
    was_training = model.training
    model.eval()
    correct, total, loss_sum = 0, 0, 0.0
    with ag.no_grad():
        for x, y in dataset.batches(batch_size, shuffle=False, augment=False):
            logits = model(x)
            loss_sum += float(ag.cross_entropy(logits, y).data) * len(y)
            correct += int((np.argmax(logits.data, axis=1) == y).sum())
            total += len(y)
    model.train(was_training)
    return correct / total, loss_sum / total


def _iteration_lr(recipe: Recipe, epoch: int, i: int, steps: int) -> float:
    if epoch >= recipe.epochs:
        return lr_at(recipe, recipe.epochs - 1)
    t = epoch + i / steps
    if t < recipe.warmup_epochs:
        # warmup counts the current iteration so the first step is not lr = 0
        t = epoch + (i + 1) / steps
    return max(lr_at(recipe, t), 1e-12)


def train(model, train_set, recipe: Recipe, eval_set=None, seed: int = 0, log_path=None,
          frozen: tuple[str, ...] = (), state: OptimState | None = None, dump_dir=None,
          start_epoch: int = 0, on_epoch=None, on_step=None) -> tuple[list[EpochRecord], OptimState]:
    """Train for ``recipe.epochs`` (plus SE-weight epochs when SE quantizers exist).

    Batch order depends only on ``(seed, epoch)``.  Parameters whose names
    match a pattern in ``frozen`` are not updated.  Each epoch appends a
    ``train`` and (with ``eval_set``) an ``eval`` line to ``log_path``.
    """
    from .quant import quantizers

    if len(train_set) == 0:
        raise ValueError("training set is empty")
    state = state or OptimState()
    params = _trainable(model, frozen)
    se_quants = [q for n, q in quantizers(model) if n.endswith(("w1_quant", "w2_quant"))]
    total_epochs = recipe.epochs + (recipe.se_extra_epochs if se_quants else 0)
    steps = -(-len(train_set) // recipe.batch_size)
    history: list[EpochRecord] = []
    log = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(start_epoch, total_epochs):
            for q in se_quants:
                q.enabled = epoch >= recipe.epochs
            model.train()
            loss_sum, correct, seen = 0.0, 0, 0
            lr_epoch = lr_at(recipe, min(epoch, recipe.epochs - 1))
            for i, (x, y) in enumerate(train_set.batches(recipe.batch_size, seed, epoch)):
                lr = _iteration_lr(recipe, epoch, i, steps)
                try:
                    loss, ok = train_step(model, x, y, recipe, state, lr, params)
                except TrainingDiverged as exc:
                    if dump_dir is not None:
                        _dump_divergence(Path(dump_dir) / "divergence.json", model, epoch, i, str(exc))
                    raise TrainingDiverged(f"epoch {epoch} batch {i}: {exc}") from None
                if on_step is not None:
                    on_step(epoch, i, loss)
                loss_sum += loss * len(y)
                correct += ok
                seen += len(y)
            recs = [EpochRecord(epoch, "train", loss_sum / seen, correct / seen, lr_epoch)]
            if eval_set is not None:
                acc, eloss = evaluate(model, eval_set)
                recs.append(EpochRecord(epoch, "eval", eloss, acc, lr_epoch))
            for r in recs:
                history.append(r)
                if log:
                    log.write(r.line() + "\n")
                    log.flush()
            if on_epoch is not None:
                on_epoch(epoch, recs)
    finally:
        if log:
            log.close()
    return history, state

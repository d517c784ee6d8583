"""Declarative network descriptions shared by the model builder and the cost model.

An :class:`ArchSpec` lists a full-precision stem, a sequence of binary units
and a full-precision classifier.  A ``bireal`` unit is one binary 3×3
convolution with its own shortcut (activation, conv, BN, add, PReLU); a
``reactnet_a`` unit is the MobileNet-style 3×3 + 1×1 pair and is only
understood by the cost model.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, replace
from pathlib import Path

__all__ = [
    "UnitSpec", "ArchSpec", "ModelOptions", "VARIANTS", "ORDERINGS",
    "builtin_arch", "BUILTIN_ARCHS", "load_arch", "save_arch", "resolve_arch",
]

VARIANTS = ("baseline", "baseline_norm", "insta", "insta_plus")
ORDERINGS = ("sign_conv_bn", "bn_sign_conv_merged")
UNIT_KINDS = ("bireal", "reactnet_a")
STEM_OPS = ("conv", "bn", "maxpool", "prelu")


@dataclass(frozen=True)
class UnitSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    kind: str = "bireal"


@dataclass(frozen=True)
class ArchSpec:
    name: str
    input_shape: tuple[int, int, int]
    num_classes: int
    stem: tuple[dict, ...]
    units: tuple[UnitSpec, ...]
    trainable: bool = True

    def __post_init__(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"{self.name}: input_shape must be (C, H, W), got {self.input_shape}")
        if self.num_classes < 2:
            raise ValueError(f"{self.name}: need at least 2 classes")
        if not self.units:
            raise ValueError(f"{self.name}: descriptor has no units")
        for op in self.stem:
            if op.get("op") not in STEM_OPS:
                raise ValueError(f"{self.name}: unknown stem op {op!r}")
            if op["op"] == "conv":
                for key in ("out", "kernel"):
                    if key not in op:
                        raise ValueError(f"{self.name}: stem conv missing {key!r}")
        for u in self.units:
            if u.kind not in UNIT_KINDS:
                raise ValueError(f"{self.name}: unknown unit kind {u.kind!r}")
            if u.stride < 1 or u.in_ch < 1 or u.out_ch < 1:
                raise ValueError(f"{self.name}: invalid unit {u}")
        prev = self.stem_channels
        for i, u in enumerate(self.units):
            if u.in_ch != prev:
                raise ValueError(f"{self.name}: unit {i} expects {u.in_ch} channels, previous stage gives {prev}")
            prev = u.out_ch

    @property
    def stem_channels(self) -> int:
        c = self.input_shape[0]
        for op in self.stem:
            if op["op"] == "conv":
                c = op["out"]
        return c

    @property
    def feature_channels(self) -> int:
        return self.units[-1].out_ch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["stem"] = [dict(op) for op in self.stem]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        known = {"name", "input_shape", "num_classes", "stem", "units", "stages", "trainable"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown arch keys: {sorted(unknown)}")
        missing = {"name", "input_shape", "num_classes", "stem"} - set(d)
        if missing:
            raise ValueError(f"incomplete arch descriptor, missing {sorted(missing)}")
        stem = tuple(dict(op) for op in d["stem"])
        if "units" in d:
            units = tuple(UnitSpec(**u) for u in d["units"])
        elif "stages" in d:
            units = _expand_stages(stem, d["input_shape"][0], d["stages"])
        else:
            raise ValueError("arch descriptor needs 'units' or 'stages'")
        return cls(d["name"], tuple(d["input_shape"]), int(d["num_classes"]), stem, units,
                   bool(d.get("trainable", True)))


def _expand_stages(stem, in_ch, stages) -> tuple[UnitSpec, ...]:
    c = in_ch
    for op in stem:
        if op["op"] == "conv":
            c = op["out"]
    units = []
    for st in stages:
        kind = st.get("kind", "bireal")
        for i in range(int(st["repeat"])):
            stride = int(st.get("stride", 1)) if i == 0 else 1
            units.append(UnitSpec(c, int(st["out"]), stride, kind))
            c = int(st["out"])
    return tuple(units)


@dataclass(frozen=True)
class ModelOptions:
    """Which activation modules a descriptor is instantiated with.

    ``baseline`` is the ReActNet unit (RSign, RPReLU).  ``baseline_norm`` puts
    the no-affine normalization in front of both, which is exactly the
    beta = 0 limit of the instance-aware modules.
    """

    variant: str = "baseline"
    th_variant: str = "cube"
    se_ratio: int = 16
    se_bound: str = "tanh3"
    prelu_bound: str = "tanh3"
    plus_on: str = "both"
    ordering: str = "sign_conv_bn"
    stage: int = 2
    ste: str = "clip1"
    beta_init: float = 0.0
    weight_scale: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}")
        if self.plus_on not in ("both", "th", "prelu"):
            raise ValueError(f"plus_on must be both, th or prelu, got {self.plus_on!r}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.se_ratio < 1:
            raise ValueError("se_ratio must be >= 1")

    @property
    def th_kind(self) -> str:
        if self.variant in ("baseline", "baseline_norm"):
            return "rsign"
        if self.variant == "insta_plus" and self.plus_on in ("both", "th"):
            return "insta_th_plus"
        return "insta_th"

    @property
    def prelu_kind(self) -> str:
        if self.ordering == "bn_sign_conv_merged":
            return "rprelu"
        if self.variant in ("baseline", "baseline_norm"):
            return "rprelu"
        if self.variant == "insta_plus" and self.plus_on in ("both", "prelu"):
            return "insta_prelu_plus"
        return "insta_prelu"

    def replace(self, **kw) -> "ModelOptions":
        return replace(self, **kw)


def _resnet18_reactnet() -> ArchSpec:
    return ArchSpec.from_dict({
        "name": "resnet18_reactnet",
        "input_shape": [3, 224, 224],
        "num_classes": 1000,
        "stem": [{"op": "conv", "out": 64, "kernel": 7, "stride": 2, "padding": 3},
                 {"op": "bn"},
                 {"op": "maxpool", "kernel": 3, "stride": 2, "padding": 1}],
        "stages": [{"out": 64, "repeat": 4, "stride": 1},
                   {"out": 128, "repeat": 4, "stride": 2},
                   {"out": 256, "repeat": 4, "stride": 2},
                   {"out": 512, "repeat": 4, "stride": 2}],
    })


def _resnet20_bireal_cifar() -> ArchSpec:
    return ArchSpec.from_dict({
        "name": "resnet20_bireal_cifar",
        "input_shape": [3, 32, 32],
        "num_classes": 10,
        "stem": [{"op": "conv", "out": 16, "kernel": 3, "stride": 1, "padding": 1}, {"op": "bn"}],
        "stages": [{"out": 16, "repeat": 6, "stride": 1},
                   {"out": 32, "repeat": 6, "stride": 2},
                   {"out": 64, "repeat": 6, "stride": 2}],
    })


def _toy_cnn() -> ArchSpec:
    return ArchSpec.from_dict({
        "name": "toy_cnn",
        "input_shape": [3, 8, 8],
        "num_classes": 2,
        "stem": [{"op": "conv", "out": 16, "kernel": 3, "stride": 1, "padding": 1}, {"op": "bn"}],
        "stages": [{"out": 16, "repeat": 1, "stride": 1},
                   {"out": 32, "repeat": 1, "stride": 2}],
    })


def _reactnet_a() -> ArchSpec:
    chans = [32, 64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024]
    units = []
    for prev, out in zip(chans[:-1], chans[1:]):
        stride = 2 if (prev != out and out != 64) else 1
        units.append({"in_ch": prev, "out_ch": out, "stride": stride, "kind": "reactnet_a"})
    return ArchSpec.from_dict({
        "name": "reactnet_a",
        "input_shape": [3, 224, 224],
        "num_classes": 1000,
        "stem": [{"op": "conv", "out": 32, "kernel": 3, "stride": 2, "padding": 1}, {"op": "bn"}],
        "units": units,
        "trainable": False,
    })


BUILTIN_ARCHS = {
    "resnet18_reactnet": _resnet18_reactnet,
    "resnet20_bireal_cifar": _resnet20_bireal_cifar,
    "resnet20_bireal": _resnet20_bireal_cifar,
    "toy_cnn": _toy_cnn,
    "reactnet_a": _reactnet_a,
}


def builtin_arch(name: str, **overrides) -> ArchSpec:
    try:
        spec = BUILTIN_ARCHS[name]()
    except KeyError:
        raise ValueError(f"unknown arch {name!r}; built-ins: {sorted(BUILTIN_ARCHS)}") from None
    return replace(spec, **overrides) if overrides else spec


def load_arch(path) -> ArchSpec:
    with open(path, encoding="utf-8") as fh:
        return ArchSpec.from_dict(json.load(fh))


def save_arch(spec: ArchSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n", encoding="utf-8")


def resolve_arch(name_or_path: str) -> ArchSpec:
    """A built-in name or a path to a JSON descriptor."""
    if name_or_path in BUILTIN_ARCHS:
        return builtin_arch(name_or_path)
    p = Path(name_or_path)
    if p.exists():
        return load_arch(p)
    raise ValueError(f"unknown arch {name_or_path!r}: not a built-in and no such file")

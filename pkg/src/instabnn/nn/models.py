"""Whole networks built from an :class:`~instabnn.arch.ArchSpec`."""
from __future__ import annotations

import numpy as np

from .. import autograd as ag
from ..arch import ArchSpec, ModelOptions, builtin_arch
from .blocks import BinaryUnit, BlockSpec
from .layers import BatchNorm2d, Conv2d, InstaPReLU, InstaTh, Linear, MaxPool, RPReLU, RSign, SEGate
from .module import Module

__all__ = ["Model", "build_model"]


class Model(Module):
    """Real stem, binary units, global pooling and a real classifier."""

    def __init__(self, arch: ArchSpec, options: ModelOptions, dtype=np.float32):
        if not arch.trainable:
            raise ValueError(f"{arch.name} is a cost-model descriptor and cannot be instantiated")
        self.arch = arch
        self.options = options
        c = arch.input_shape[0]
        stem = []
        for op in arch.stem:
            kind = op["op"]
            if kind == "conv":
                stem.append(Conv2d(c, op["out"], op["kernel"], op.get("stride", 1),
                                   op.get("padding", op["kernel"] // 2), dtype))
                c = op["out"]
            elif kind == "bn":
                stem.append(BatchNorm2d(c, dtype=dtype))
            elif kind == "maxpool":
                stem.append(MaxPool(op.get("kernel", 3), op.get("stride", 2), op.get("padding", 1)))
            else:
                stem.append(RPReLU(c, dtype=dtype))
        self.stem = stem
        self.units = [BinaryUnit(BlockSpec.from_options(u.in_ch, u.out_ch, u.stride, options), dtype)
                      for u in arch.units]
        self.fc = Linear(arch.feature_channels, arch.num_classes, dtype=dtype)
        self.dtype = np.dtype(dtype)

    def features(self, x):
        out = ag.as_var(x, self.dtype)
        for m in self.stem:
            out = m(out)
        for u in self.units:
            out = u(out)
        return out

    def forward(self, x):
        f = self.features(x)
        pooled = ag.reshape(ag.mean(f, axis=(2, 3)), (f.shape[0], f.shape[1]))
        return self.fc(pooled)

    def activation_modules(self) -> list[tuple[str, Module]]:
        """Sign-family modules in forward order."""
        return [(n, m) for n, m in self.named_modules() if isinstance(m, (RSign, InstaTh))]

    def prelu_modules(self) -> list[tuple[str, Module]]:
        return [(n, m) for n, m in self.named_modules()
                if isinstance(m, (RPReLU, InstaPReLU)) and n.startswith("units")]

    def binary_convs(self) -> list[tuple[str, Module]]:
        return [(f"units.{i}.conv", u.conv) for i, u in enumerate(self.units)]

    def insta_modules(self) -> list[Module]:
        return [m for m in self.modules() if isinstance(m, (InstaTh, InstaPReLU))]

    def se_gates(self) -> list[SEGate]:
        return [m for m in self.modules() if isinstance(m, SEGate)]

    def set_stage(self, stage: int) -> None:
        for u in self.units:
            u.conv.binary_weights = stage == 2
            u.conv.weight.clip = 1.0 if stage == 2 else None
        self.options = self.options.replace(stage=stage)

    def use_bitops(self, flag: bool = True) -> None:
        for u in self.units:
            u.conv.use_bitops = flag


def build_model(arch, options: ModelOptions | None = None, seed: int = 0, dtype=np.float32) -> Model:
    """Instantiate and seed a network.  ``arch`` is an ArchSpec or a built-in name."""
    if isinstance(arch, str):
        arch = builtin_arch(arch)
    model = Model(arch, options or ModelOptions(), dtype)
    model.initialize(seed)
    return model

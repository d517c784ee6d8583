"""Binary residual units in both supported orderings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..arch import ModelOptions, ORDERINGS
from ..autograd import STE_MODES
from ..stats import THRESHOLD_VARIANTS
from .layers import (AvgPool, BatchNorm2d, BinaryConv2d, Conv2d, InstaPReLU, InstaTh, RPReLU,
                     RSign, SEGate)
from .module import Module

__all__ = ["BlockSpec", "BinaryUnit", "Downsample", "build_block", "make_activation", "make_prelu"]

TH_KINDS = ("rsign", "rsign_norm", "insta_th", "insta_th_plus")
PRELU_KINDS = ("rprelu", "rprelu_norm", "insta_prelu", "insta_prelu_plus")


@dataclass(frozen=True)
class BlockSpec:
    in_ch: int
    out_ch: int
    stride: int = 1
    ordering: str = "sign_conv_bn"
    th_kind: str = "rsign"
    prelu_kind: str = "rprelu"
    th_variant: str = "cube"
    ste: str = "clip1"
    se_ratio: int = 16
    se_bound: str = "tanh3"
    prelu_bound: str = "tanh3"
    binary_weights: bool = True
    weight_scale: bool = True
    beta_init: float = 0.0

    def __post_init__(self):
        if self.ordering not in ORDERINGS:
            raise ValueError(f"unknown ordering {self.ordering!r}; expected one of {ORDERINGS}")
        if self.th_kind not in TH_KINDS:
            raise ValueError(f"unknown activation kind {self.th_kind!r}; expected one of {TH_KINDS}")
        if self.prelu_kind not in PRELU_KINDS:
            raise ValueError(f"unknown PReLU kind {self.prelu_kind!r}; expected one of {PRELU_KINDS}")
        if self.th_variant not in THRESHOLD_VARIANTS:
            raise ValueError(f"unknown threshold variant {self.th_variant!r}")
        if self.ste not in STE_MODES:
            raise ValueError(f"unknown STE mode {self.ste!r}; expected one of {STE_MODES}")
        if self.stride not in (1, 2) or self.in_ch < 1 or self.out_ch < 1:
            raise ValueError(f"invalid block geometry {self.in_ch}->{self.out_ch} stride {self.stride}")
        if self.ordering == "bn_sign_conv_merged":
            # the activation module replaces BN, so it must normalize its input
            if self.th_kind == "rsign":
                raise ValueError("bn_sign_conv_merged needs a normalizing activation "
                                 "(rsign_norm, insta_th or insta_th_plus)")
            if self.prelu_kind not in ("rprelu", "rprelu_norm"):
                raise ValueError("bn_sign_conv_merged uses plain RPReLU after the conv")

    @property
    def shortcut(self) -> str:
        return "identity" if self.stride == 1 and self.in_ch == self.out_ch else "option_b"

    @classmethod
    def from_options(cls, in_ch: int, out_ch: int, stride: int, opts: ModelOptions) -> "BlockSpec":
        th, pr = opts.th_kind, opts.prelu_kind
        if opts.variant == "baseline_norm" or (opts.ordering == "bn_sign_conv_merged" and th == "rsign"):
            th = "rsign_norm"
        if opts.variant == "baseline_norm" and opts.ordering == "sign_conv_bn":
            pr = "rprelu_norm"
        return cls(in_ch, out_ch, stride, opts.ordering, th, pr, opts.th_variant, opts.ste,
                   opts.se_ratio, opts.se_bound, opts.prelu_bound, opts.stage == 2,
                   opts.weight_scale, opts.beta_init)


def make_activation(spec: BlockSpec, channels: int, dtype=np.float32) -> Module:
    k = spec.th_kind
    if k in ("rsign", "rsign_norm"):
        return RSign(channels, spec.ste, normalize=(k == "rsign_norm"), dtype=dtype)
    gate = SEGate(channels, spec.se_ratio, spec.se_bound, dtype) if k == "insta_th_plus" else None
    return InstaTh(channels, spec.th_variant, spec.ste, gate, spec.beta_init, dtype)


def make_prelu(spec: BlockSpec, channels: int, dtype=np.float32) -> Module:
    k = spec.prelu_kind
    if k in ("rprelu", "rprelu_norm"):
        return RPReLU(channels, normalize=(k == "rprelu_norm"), dtype=dtype)
    gate = SEGate(channels, spec.se_ratio, spec.se_bound, dtype) if k == "insta_prelu_plus" else None
    return InstaPReLU(channels, spec.prelu_bound, gate, spec.beta_init, dtype=dtype)


class Downsample(Module):
    """Average pool (when strided), real 1×1 convolution, BN."""

    def __init__(self, in_ch, out_ch, stride, dtype=np.float32):
        self.pool = AvgPool(stride) if stride > 1 else None
        self.conv = Conv2d(in_ch, out_ch, kernel=1, stride=1, padding=0, dtype=dtype)
        self.bn = BatchNorm2d(out_ch, dtype=dtype)

    def forward(self, x):
        if self.pool is not None:
            x = self.pool(x)
        return self.bn(self.conv(x))


class BinaryUnit(Module):
    """One binary 3×3 convolution with its own shortcut.

    ``sign_conv_bn``: act -> binary conv -> BN -> + shortcut -> PReLU.
    ``bn_sign_conv_merged``: normalizing act -> binary conv -> PReLU -> + shortcut.
    """

    def __init__(self, spec: BlockSpec, dtype=np.float32):
        self.spec = spec
        self.act = make_activation(spec, spec.in_ch, dtype)
        self.conv = BinaryConv2d(spec.in_ch, spec.out_ch, 3, spec.stride, 1,
                                 spec.binary_weights, spec.weight_scale, dtype)
        self.bn = BatchNorm2d(spec.out_ch, dtype=dtype) if spec.ordering == "sign_conv_bn" else None
        self.prelu = make_prelu(spec, spec.out_ch, dtype)
        self.downsample = (Downsample(spec.in_ch, spec.out_ch, spec.stride, dtype)
                           if spec.shortcut == "option_b" else None)

    def forward(self, x):
        short = self.downsample(x) if self.downsample is not None else x
        out = self.conv(self.act(x))
        if self.bn is not None:
            return self.prelu(self.bn(out) + short)
        return self.prelu(out) + short


def build_block(spec: BlockSpec, dtype=np.float32) -> BinaryUnit:
    return BinaryUnit(spec, dtype)

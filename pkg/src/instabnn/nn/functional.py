"""Stateless numpy forwards of the activation modules.

These are the reference semantics the autograd layers are checked against.
Sign-family functions return a :class:`~instabnn.bitops.BitTensor`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..bitops import BitTensor, sign_binarize
from ..stats import (InstanceMoments, NormStats, ThresholdParams, compute_threshold,
                     instance_channel_moment3, instance_moments, normalize_no_affine)
from ..tensor_core import global_avg_pool, linear_dense

__all__ = [
    "RSignParams", "RPReLUParams", "SEGateParams", "BOUNDS",
    "bound_fn", "prelu_np", "rsign_forward", "insta_th_forward", "insta_th_threshold",
    "se_gate_forward", "insta_th_plus_forward", "rprelu_forward", "insta_prelu_forward",
    "insta_prelu_plus_forward", "batchnorm_forward",
]

BOUNDS = ("sigmoid", "tanh", "tanh3")


def _finite(name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} is not finite")
    return arr


@dataclass
class RSignParams:
    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = _finite("alpha", self.alpha)


@dataclass
class RPReLUParams:
    x_shift: np.ndarray
    slope: np.ndarray
    y_shift: np.ndarray

    def __post_init__(self):
        self.x_shift = _finite("x_shift", self.x_shift)
        self.slope = _finite("slope", self.slope)
        self.y_shift = _finite("y_shift", self.y_shift)

    @classmethod
    def default(cls, channels: int) -> "RPReLUParams":
        return cls(np.zeros(channels), np.full(channels, 0.25), np.zeros(channels))


@dataclass
class SEGateParams:
    """FC pair ``W1`` (hidden × C) and ``W2`` (C × hidden), hidden = ceil(C / ratio)."""

    w1: np.ndarray
    w2: np.ndarray
    ratio: int = 16

    def __post_init__(self):
        self.w1 = _finite("w1", self.w1)
        self.w2 = _finite("w2", self.w2)
        h, c = self.w1.shape
        if self.w2.shape != (c, h):
            raise ValueError(f"w2 shape {self.w2.shape} does not match w1 {self.w1.shape}")

    @classmethod
    def zeros(cls, channels: int, ratio: int = 16) -> "SEGateParams":
        h = max(1, -(-channels // ratio))
        return cls(np.zeros((h, channels)), np.zeros((channels, h)), ratio)


def bound_fn(u, kind: str) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    if kind == "sigmoid":
        return 0.5 * (1.0 + np.tanh(0.5 * u))
    if kind == "tanh":
        return np.tanh(u)
    if kind == "tanh3":
        return 3.0 * np.tanh(u / 3.0)
    raise ValueError(f"unknown bound {kind!r}; expected one of {BOUNDS}")


def prelu_np(u, slope) -> np.ndarray:
    u = np.asarray(u, dtype=np.float64)
    return np.where(u >= 0, u, slope * u)


def _per_channel(p) -> np.ndarray:
    return np.asarray(p, dtype=np.float64).reshape(1, -1, 1, 1)


def _per_instance(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    return t.reshape(t.shape[0], t.shape[1], 1, 1) if t.ndim == 2 else t


def rsign_forward(x, params: RSignParams) -> BitTensor:
    return sign_binarize(x, params.alpha)


def insta_th_threshold(xt, params: ThresholdParams, variant: str = "cube") -> np.ndarray:
    """Per-(n, c) threshold on an already-normalized input."""
    mom = instance_moments(xt) if variant != "cube" else InstanceMoments(
        None, instance_channel_moment3(xt), None, None)
    alpha = params.alpha
    if alpha.ndim == 1:
        alpha = alpha.reshape(1, -1)
    return compute_threshold(variant, mom, ThresholdParams(alpha, params.beta.reshape(1, -1),
                                                           params.gamma.reshape(1, -1)))


def insta_th_forward(x, stats: NormStats, params: ThresholdParams, mode: str = "eval",
                     variant: str = "cube", form: str = "shifted") -> BitTensor:
    """Instance-aware sign on the normalized input.

    ``form="threshold"`` compares ``x~ >= TH``; ``form="shifted"`` computes
    ``x~ + TH'`` with ``TH' = -TH`` and compares against 0.  Both give the
    same bits.
    """
    xt = normalize_no_affine(x, stats, mode).astype(np.float64)
    th = insta_th_threshold(xt, params, variant)
    if form == "threshold":
        return sign_binarize(xt, th)
    if form == "shifted":
        return sign_binarize(xt + _per_instance(-th), 0.0)
    raise ValueError(f"form must be 'threshold' or 'shifted', got {form!r}")


def se_gate_forward(x, params: SEGateParams, bound: str = "tanh3") -> np.ndarray:
    """Per-(n, c) gate ``bound(W2 relu(W1 GAP(x)))``."""
    x = np.asarray(x, dtype=np.float64)
    n, c = x.shape[:2]
    if params.w1.shape[1] != c:
        raise ValueError(f"SE gate expects {params.w1.shape[1]} channels, input has {c}")
    squeezed = global_avg_pool(x).reshape(n, c).astype(np.float64)
    hidden = np.maximum(linear_dense(squeezed, params.w1), 0.0)
    return bound_fn(linear_dense(hidden, params.w2), bound)


def insta_th_plus_forward(x, stats: NormStats, beta, gate: SEGateParams, mode: str = "eval",
                          bound: str = "tanh3", variant: str = "cube") -> BitTensor:
    alpha = se_gate_forward(x, gate, bound)
    return insta_th_forward(x, stats, ThresholdParams(alpha, beta), mode, variant)


def rprelu_forward(x, params: RPReLUParams) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = prelu_np(x - _per_channel(params.x_shift), _per_channel(params.slope))
    return out + _per_channel(params.y_shift)


def insta_prelu_forward(x, stats: NormStats, alpha, beta, slope, y_shift=None,
                        bound: str = "tanh3", mode: str = "eval") -> np.ndarray:
    """PReLU of the normalized input shifted by ``alpha + bound(beta * E[x~^3])``."""
    xt = normalize_no_affine(x, stats, mode).astype(np.float64)
    m3 = instance_channel_moment3(xt)
    alpha = np.asarray(alpha, dtype=np.float64)
    alpha = alpha.reshape(1, -1) if alpha.ndim == 1 else alpha
    th = alpha + bound_fn(np.asarray(beta, dtype=np.float64).reshape(1, -1) * m3, bound)
    out = prelu_np(xt - _per_instance(th), _per_channel(slope))
    if y_shift is not None:
        out = out + _per_channel(y_shift)
    return out


def insta_prelu_plus_forward(x, stats: NormStats, beta, slope, gate: SEGateParams, y_shift=None,
                             bound: str = "tanh3", se_bound: str = "tanh3",
                             mode: str = "eval") -> np.ndarray:
    alpha = se_gate_forward(x, gate, se_bound)
    return insta_prelu_forward(x, stats, alpha, beta, slope, y_shift, bound, mode)


def batchnorm_forward(x, stats: NormStats, scale, shift, mode: str = "eval") -> np.ndarray:
    xt = normalize_no_affine(x, stats, mode).astype(np.float64)
    return xt * _per_channel(scale) + _per_channel(shift)

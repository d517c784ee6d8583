"""Per-instance channel statistics and instance-aware threshold formulas.

All moments are population moments over the H*W spatial samples of each
(instance, channel) map, accumulated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "THRESHOLD_VARIANTS",
    "NormStats",
    "InstanceMoments",
    "ThresholdParams",
    "normalize_no_affine",
    "instance_channel_mean",
    "instance_channel_moment3",
    "instance_channel_var",
    "fisher_skewness",
    "instance_moments",
    "moment3_identity_check",
    "compute_threshold",
]

THRESHOLD_VARIANTS = ("mean", "mean_var", "mean_skew", "mean_skew_var", "cube")


@dataclass
class NormStats:
    """Running per-channel mean/variance for normalization without affine terms."""

    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    initialized: bool = False

    @classmethod
    def create(cls, channels: int, dtype=np.float32, **kwargs) -> "NormStats":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype), **kwargs)

    @classmethod
    def from_values(cls, mean, std, eps: float = 1e-5, **kwargs) -> "NormStats":
        """Loaded stats given the std actually used for division."""
        std = np.asarray(std, dtype=np.float32)
        var = np.maximum(std.astype(np.float64) ** 2 - eps, 0.0).astype(np.float32)
        return cls(np.asarray(mean, dtype=np.float32).copy(), var, eps=eps,
                   initialized=True, **kwargs)

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]

    @property
    def running_std(self) -> np.ndarray:
        return np.sqrt(self.running_var.astype(np.float64) + self.eps).astype(self.running_var.dtype)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        dt = self.running_mean.dtype
        self.running_mean[...] = ((1 - m) * self.running_mean + m * batch_mean).astype(dt)
        self.running_var[...] = ((1 - m) * self.running_var + m * batch_var).astype(dt)
        self.initialized = True


def normalize_no_affine(x: np.ndarray, stats: NormStats, mode: str = "train") -> np.ndarray:
    """``(x - mean) / sqrt(var + eps)`` per channel, no scale or shift.

    Train mode uses the current batch statistics over N*H*W and updates the
    running stats; eval mode uses the running stats.
    """
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[1] != stats.channels:
        raise ValueError(f"input {x.shape} does not match {stats.channels}-channel stats")
    x64 = x.astype(np.float64)
    if mode == "train":
        mean = x64.mean(axis=(0, 2, 3))
        var = x64.var(axis=(0, 2, 3))
        stats.update(mean, var)
    elif mode == "eval":
        if not stats.initialized:
            raise RuntimeError("eval-mode normalization needs running stats "
                               "(run a train-mode pass or load stats first)")
        mean = stats.running_mean.astype(np.float64)
        var = stats.running_var.astype(np.float64)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    out = (x64 - mean.reshape(1, -1, 1, 1)) / np.sqrt(var.reshape(1, -1, 1, 1) + stats.eps)
    return out.astype(np.result_type(x.dtype, np.float32))


def _spatial(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError(f"expected N×C×H×W, got {x.shape}")
    return x


def instance_channel_mean(x) -> np.ndarray:
    return _spatial(x).mean(axis=(2, 3))


def instance_channel_moment3(x) -> np.ndarray:
    x = _spatial(x)
    return (x * x * x).mean(axis=(2, 3))


def instance_channel_var(x) -> np.ndarray:
    return _spatial(x).var(axis=(2, 3))


def fisher_skewness(x) -> np.ndarray:
    """``E[(X - mu)^3] / sigma^3`` per (n, c); 0 where the map is constant."""
    x = _spatial(x)
    d = x - x.mean(axis=(2, 3), keepdims=True)
    var = (d * d).mean(axis=(2, 3))
    c3 = (d * d * d).mean(axis=(2, 3))
    out = np.zeros_like(var)
    ok = var > 0
    out[ok] = c3[ok] / var[ok] ** 1.5
    return out


@dataclass
class InstanceMoments:
    m1: np.ndarray
    m3: np.ndarray
    var: np.ndarray
    skew: np.ndarray


def instance_moments(x) -> InstanceMoments:
    return InstanceMoments(instance_channel_mean(x), instance_channel_moment3(x),
                           instance_channel_var(x), fisher_skewness(x))


def moment3_identity_check(x) -> np.ndarray:
    """``|E[X^3] - (skew*sigma^3 + 3*mu*sigma^2 + mu^3)|`` per (n, c)."""
    mom = instance_moments(x)
    sigma = np.sqrt(mom.var)
    rhs = mom.skew * sigma ** 3 + 3 * mom.m1 * mom.var + mom.m1 ** 3
    return np.abs(mom.m3 - rhs)


@dataclass
class ThresholdParams:
    """Per-channel threshold coefficients (``alpha`` may also be per (n, c))."""

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray = field(default=None)

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        self.beta = np.asarray(self.beta, dtype=np.float64)
        self.gamma = (np.zeros_like(self.beta) if self.gamma is None
                      else np.asarray(self.gamma, dtype=np.float64))
        for name in ("alpha", "beta", "gamma"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"threshold parameter {name} is not finite")


def compute_threshold(variant: str, moments: InstanceMoments, params: ThresholdParams) -> np.ndarray:
    """Per-(n, c) threshold for the given statistic combination.

    ``mean``          alpha + beta*m1
    ``mean_var``      alpha + beta*m1*var
    ``mean_skew``     alpha + beta*m1 + gamma*skew
    ``mean_skew_var`` alpha + (beta*m1 + gamma*skew)*var
    ``cube``          alpha + beta*E[x^3]
    """
    a, b, g = params.alpha, params.beta, params.gamma
    if variant == "mean":
        return a + b * moments.m1
    if variant == "mean_var":
        return a + b * moments.m1 * moments.var
    if variant == "mean_skew":
        return a + b * moments.m1 + g * moments.skew
    if variant == "mean_skew_var":
        return a + (b * moments.m1 + g * moments.skew) * moments.var
    if variant == "cube":
        return a + b * moments.m3
    raise ValueError(f"unknown threshold variant {variant!r}; expected one of {THRESHOLD_VARIANTS}")

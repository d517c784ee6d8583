"""Dense reference tensors and the real-valued ops the binary paths are checked against.

Tensors are plain ``numpy.ndarray`` objects in N-C-H-W order.  Reductions
accumulate in float64 and are cast back to the input precision.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "Shape2dConv",
    "as_tensor",
    "conv_output_size",
    "im2col",
    "dense_conv2d",
    "global_avg_pool",
    "linear_dense",
]


@dataclass(frozen=True)
class Shape2dConv:
    """Geometry of a 2-D convolution with zero padding."""

    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if min(self.kernel_h, self.kernel_w, self.in_channels, self.out_channels) < 1:
            raise ValueError(f"kernel and channel dims must be >= 1: {self}")

    @classmethod
    def from_weights(cls, weights: np.ndarray, stride: int = 1, padding: int = 0) -> "Shape2dConv":
        o, c, kh, kw = weights.shape
        return cls(c, o, kh, kw, stride, padding)

    @property
    def receptive_field(self) -> int:
        return self.in_channels * self.kernel_h * self.kernel_w

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return (conv_output_size(h, self.kernel_h, self.stride, self.padding),
                conv_output_size(w, self.kernel_w, self.stride, self.padding))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    out = (size + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ValueError(f"kernel {kernel} does not fit input {size} with padding {padding}")
    return out


def as_tensor(x, ndim: int | None = 4, dtype=np.float32) -> np.ndarray:
    """Validate external input and return a C-contiguous float array.

    Raises ``ValueError`` on NaN/Inf or on a rank mismatch.
    """
    arr = np.ascontiguousarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"expected a {ndim}-d tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def im2col(x: np.ndarray, kh: int, kw: int, stride: int = 1, padding: int = 0,
           pad_value=0) -> np.ndarray:
    """Patch matrix of shape ``(N, Ho, Wo, C, kh, kw)`` (a copy)."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
                   constant_values=pad_value)
    # channels-last first so the final copy reads mostly contiguous memory
    xn = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    win = np.lib.stride_tricks.sliding_window_view(xn, (kh, kw), axis=(1, 2))
    return np.ascontiguousarray(win[:, ::stride, ::stride])


def _check_conv(x: np.ndarray, weights: np.ndarray, cfg: Shape2dConv | None,
                stride: int, padding: int) -> Shape2dConv:
    if x.ndim != 4 or weights.ndim != 4:
        raise ValueError(f"conv expects 4-d input and weights, got {x.shape} and {weights.shape}")
    if cfg is None:
        cfg = Shape2dConv.from_weights(weights, stride, padding)
    expected = (cfg.out_channels, cfg.in_channels, cfg.kernel_h, cfg.kernel_w)
    if tuple(weights.shape) != expected:
        raise ValueError(f"weight shape {weights.shape} does not match config {expected}")
    if x.shape[1] != cfg.in_channels:
        raise ValueError(f"input has {x.shape[1]} channels, config expects {cfg.in_channels}")
    cfg.output_hw(x.shape[2], x.shape[3])
    return cfg


def dense_conv2d(x: np.ndarray, weights: np.ndarray, cfg: Shape2dConv | None = None, *,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation with zero padding, float64 accumulation.

    ``cfg`` takes precedence over the ``stride``/``padding`` keywords.
    """
    x = np.asarray(x)
    weights = np.asarray(weights)
    cfg = _check_conv(x, weights, cfg, stride, padding)
    out_dtype = np.result_type(x.dtype, weights.dtype, np.float32)
    cols = im2col(x.astype(np.float64), cfg.kernel_h, cfg.kernel_w, cfg.stride, cfg.padding)
    n, ho, wo = cols.shape[:3]
    w2 = weights.astype(np.float64).reshape(cfg.out_channels, -1)
    out = cols.reshape(n * ho * wo, -1) @ w2.T
    out = out.reshape(n, ho, wo, cfg.out_channels).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out, dtype=out_dtype)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError(f"global_avg_pool expects N×C×H×W with H,W >= 1, got {x.shape}")
    out = x.astype(np.float64).mean(axis=(2, 3), keepdims=True)
    return out.astype(np.result_type(x.dtype, np.float32))


def linear_dense(x: np.ndarray, weights: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """``x @ weights.T + bias`` for ``x`` of shape (N, C_in) and weights (C_out, C_in)."""
    x = np.asarray(x)
    weights = np.asarray(weights)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ValueError(f"linear shape mismatch: input {x.shape}, weights {weights.shape}")
    out = x.astype(np.float64) @ weights.astype(np.float64).T
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (weights.shape[0],):
            raise ValueError(f"bias shape {bias.shape} does not match {weights.shape[0]} outputs")
        out = out + bias
    return out.astype(np.result_type(x.dtype, weights.dtype, np.float32))

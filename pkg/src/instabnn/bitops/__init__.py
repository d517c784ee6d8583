"""Binarization, bit packing and XNOR/popcount convolution.

The popcount GEMM has two interchangeable backends: a compiled Cython kernel
(``instabnn.bitops._xnor``) and a numpy fallback.  The compiled one is used
when it imports; set ``INSTABNN_BACKEND=python`` to force the fallback.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from ..tensor_core import Shape2dConv, as_tensor, im2col
from . import _fallback

__all__ = [
    "BACKEND",
    "BitTensor",
    "available_backends",
    "pack",
    "unpack",
    "sign_binarize",
    "weight_scale_factors",
    "xnor_popcount_gemm",
    "xnor_popcount_conv2d",
]

WORD_BITS = 64

_BACKENDS = {"python": _fallback.xnor_popcount_gemm}
try:
    from ._xnor import xnor_popcount_gemm as _compiled_gemm
except ImportError:  # extension not built
    _compiled_gemm = None
else:
    _BACKENDS["cython"] = _compiled_gemm

_requested = os.environ.get("INSTABNN_BACKEND", "auto").lower()
if _requested == "python" or _compiled_gemm is None:
    BACKEND = "python"
elif _requested in ("auto", "cython"):
    BACKEND = "cython"
else:
    raise ImportError(f"INSTABNN_BACKEND must be auto, cython or python, not {_requested!r}")


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def xnor_popcount_gemm(a_words: np.ndarray, w_words: np.ndarray, nbits: int,
                       backend: str | None = None) -> np.ndarray:
    """Matching-bit counts, shape ``(rows_a, rows_w)``, int32."""
    fn = _BACKENDS[backend or BACKEND]
    return fn(np.ascontiguousarray(a_words, dtype=np.uint64),
              np.ascontiguousarray(w_words, dtype=np.uint64), int(nbits))


@dataclass(frozen=True)
class BitTensor:
    """Packed ±1 tensor.

    Each (n, c) plane is one packing run of H*W bits, LSB-first in row-major
    (h, w) order, so every channel starts on a word boundary.  Bit 1 means +1.
    Unused bits of the last word in a run are zero.
    """

    shape: tuple[int, int, int, int]
    words: np.ndarray  # (N, C, words_per_plane), uint64

    def __post_init__(self):
        if len(self.shape) != 4:
            raise ValueError(f"BitTensor shape must be 4-d, got {self.shape}")
        n, c, h, w = self.shape
        expected = (n, c, _words_for(h * w))
        if self.words.shape != expected or self.words.dtype != np.uint64:
            raise ValueError(f"words must be uint64 with shape {expected}, got "
                             f"{self.words.dtype} {self.words.shape}")

    @property
    def plane_bits(self) -> int:
        return self.shape[2] * self.shape[3]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def to_bits(self) -> np.ndarray:
        """0/1 uint8 array of the logical shape."""
        n, c, h, w = self.shape
        raw = np.ascontiguousarray(self.words).astype("<u8", copy=False).view(np.uint8)
        bits = np.unpackbits(raw.reshape(n, c, -1), axis=-1, bitorder="little")
        return bits[..., : h * w].reshape(self.shape)

    def popcount(self) -> np.ndarray:
        """Number of +1 entries per (n, c) plane."""
        return _fallback.popcount64(self.words).sum(axis=-1, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    __hash__ = None


def _words_for(nbits: int) -> int:
    return -(-nbits // WORD_BITS)


def _pack_rows(bits: np.ndarray) -> np.ndarray:
    """Pack the last axis of a 0/1 uint8 array into LSB-first uint64 words."""
    nbits = bits.shape[-1]
    nw = _words_for(nbits)
    pad = nw * WORD_BITS - nbits
    if pad:
        bits = np.concatenate(
            [bits, np.zeros((*bits.shape[:-1], pad), dtype=np.uint8)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def _bits_to_bittensor(bits: np.ndarray) -> BitTensor:
    n, c, h, w = bits.shape
    words = _pack_rows(bits.reshape(n, c, h * w).astype(np.uint8, copy=False))
    return BitTensor(tuple(int(s) for s in bits.shape), words)


def pack(values) -> BitTensor:
    """Pack a 4-d array whose entries are exactly +1 or -1."""
    values = np.asarray(values)
    if values.ndim != 4:
        raise ValueError(f"pack expects a 4-d array, got shape {values.shape}")
    plus = values == 1
    if not np.all(plus | (values == -1)):
        raise ValueError("pack accepts only +1/-1 values")
    return _bits_to_bittensor(plus.astype(np.uint8))


def unpack(b: BitTensor, dtype=np.float32) -> np.ndarray:
    bits = b.to_bits()
    return (bits.astype(dtype) * 2 - 1).astype(dtype)


def _broadcast_threshold(threshold, shape) -> np.ndarray:
    th = np.asarray(threshold, dtype=np.float64)
    if not np.all(np.isfinite(th)):
        raise ValueError("threshold contains NaN or Inf")
    n, c = shape[:2]
    if th.ndim == 1 and th.shape[0] == c:
        th = th.reshape(1, c, 1, 1)
    elif th.ndim == 2 and th.shape == (n, c):
        th = th.reshape(n, c, 1, 1)
    try:
        return np.broadcast_to(th, shape)
    except ValueError:
        raise ValueError(f"threshold of shape {np.shape(threshold)} does not broadcast to {shape}") from None


def sign_binarize(x, threshold=0.0) -> BitTensor:
    """+1 where ``x >= threshold``, else -1.

    ``threshold`` may be a scalar, a per-channel ``(C,)`` vector, a
    per-instance ``(N, C)`` array or a 4-d array broadcastable to ``x``.
    A 1-d threshold is always read as per-channel.
    """
    x = as_tensor(x, ndim=4, dtype=np.result_type(np.asarray(x).dtype, np.float32))
    th = _broadcast_threshold(threshold, x.shape)
    return _bits_to_bittensor((x >= th).astype(np.uint8))


def weight_scale_factors(real_weights) -> np.ndarray:
    """Per-output-channel mean absolute weight (XNOR-Net scaling)."""
    w = as_tensor(real_weights, ndim=4, dtype=np.float64)
    scale = np.abs(w).reshape(w.shape[0], -1).mean(axis=1)
    if np.any(scale == 0):
        warnings.warn("all-zero filter: its weight scale is 0", RuntimeWarning, stacklevel=2)
    return scale.astype(np.float32)


def _padding_correction(h: int, w: int, w_pm1: np.ndarray, cfg: Shape2dConv) -> np.ndarray:
    """Per (output pixel, output channel) sum of ±1 weights that land on padding.

    Padding is packed as -1 bits, contributing ``-w`` to each XNOR sum, while
    the zero-padded reference contributes 0; adding this back makes the two
    agree exactly.
    """
    inside = np.zeros((1, 1, h, w), dtype=np.int64)
    cols = im2col(inside, cfg.kernel_h, cfg.kernel_w, cfg.stride, cfg.padding, pad_value=1)
    pad_taps = cols.reshape(-1, cfg.kernel_h * cfg.kernel_w)
    wsum = w_pm1.sum(axis=1).reshape(cfg.out_channels, -1)
    return pad_taps @ wsum.T  # (Ho*Wo, O)


def xnor_popcount_conv2d(acts: BitTensor, weights: BitTensor, cfg: Shape2dConv | None = None,
                         scale=None, *, stride: int = 1, padding: int = 0,
                         backend: str | None = None) -> np.ndarray:
    """Binary convolution ``2*popcount(xnor(a, w)) - K``, optionally scaled per channel.

    Equals ``dense_conv2d(unpack(acts), unpack(weights))`` exactly.
    """
    if cfg is None:
        o, c, kh, kw = weights.shape
        cfg = Shape2dConv(c, o, kh, kw, stride, padding)
    n, c, h, w = acts.shape
    if weights.shape != (cfg.out_channels, cfg.in_channels, cfg.kernel_h, cfg.kernel_w):
        raise ValueError(f"weight shape {weights.shape} does not match config {cfg}")
    if c != cfg.in_channels:
        raise ValueError(f"activations have {c} channels, config expects {cfg.in_channels}")
    ho, wo = cfg.output_hw(h, w)
    k = cfg.receptive_field

    cols = im2col(acts.to_bits(), cfg.kernel_h, cfg.kernel_w, cfg.stride, cfg.padding, pad_value=0)
    a_words = _pack_rows(cols.reshape(n * ho * wo, k))
    w_bits = weights.to_bits().reshape(cfg.out_channels, k)
    w_words = _pack_rows(w_bits)

    matches = xnor_popcount_gemm(a_words, w_words, k, backend=backend).astype(np.int64)
    out = 2 * matches - k
    if cfg.padding:
        w_pm1 = w_bits.astype(np.int64) * 2 - 1
        corr = _padding_correction(h, w, w_pm1.reshape(weights.shape), cfg)
        out = out.reshape(n, ho * wo, cfg.out_channels) + corr[None]
    out = out.reshape(n, ho, wo, cfg.out_channels).transpose(0, 3, 1, 2).astype(np.float32)
    if scale is not None:
        s = np.asarray(scale, dtype=np.float32)
        if s.shape != (cfg.out_channels,):
            raise ValueError(f"scale must have shape ({cfg.out_channels},), got {s.shape}")
        out = out * s.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)

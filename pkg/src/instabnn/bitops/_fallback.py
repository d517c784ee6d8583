"""Pure-numpy XNOR/popcount GEMM, used when the compiled kernel is unavailable."""
from __future__ import annotations

import numpy as np

_CHUNK_ELEMS = 1 << 22

if hasattr(np, "bitwise_count"):
    def popcount64(words: np.ndarray) -> np.ndarray:
        return np.bitwise_count(words)
else:  # numpy < 2.0
    _BYTE_COUNTS = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)

    def popcount64(words: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(words, dtype="<u8").view(np.uint8)
        return _BYTE_COUNTS[b].reshape(*words.shape, 8).sum(axis=-1, dtype=np.uint8)


def xnor_popcount_gemm(a: np.ndarray, w: np.ndarray, nbits: int) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.uint64)
    w = np.ascontiguousarray(w, dtype=np.uint64)
    p, nw = a.shape
    o = w.shape[0]
    if w.shape[1] != nw:
        raise ValueError("word counts differ between activations and weights")
    if nw * 64 < nbits or (nbits > 0 and (nw - 1) * 64 >= nbits):
        raise ValueError("nbits inconsistent with word count")
    out = np.empty((p, o), dtype=np.int32)
    if nw == 0:
        out[:] = 0
        return out
    tail = nbits - 64 * (nw - 1)
    mask = np.full(nw, np.uint64(0xFFFFFFFFFFFFFFFF), dtype=np.uint64)
    mask[-1] = np.uint64((1 << tail) - 1) if tail < 64 else np.uint64(0xFFFFFFFFFFFFFFFF)
    rows = max(1, _CHUNK_ELEMS // max(1, o * nw))
    for start in range(0, p, rows):
        blk = a[start:start + rows, None, :]
        xnor = ~(blk ^ w[None, :, :]) & mask
        out[start:start + rows] = popcount64(xnor).sum(axis=-1, dtype=np.int32)
    return out

# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled XNOR/popcount GEMM."""
import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint64_t, int32_t

cdef extern from *:
    """
    static inline int bnn_popcount64(unsigned long long x) {
    #if defined(__GNUC__) || defined(__clang__)
        return __builtin_popcountll(x);
    #else
        x = x - ((x >> 1) & 0x5555555555555555ULL);
        x = (x & 0x3333333333333333ULL) + ((x >> 2) & 0x3333333333333333ULL);
        x = (x + (x >> 4)) & 0x0F0F0F0F0F0F0F0FULL;
        return (int)((x * 0x0101010101010101ULL) >> 56);
    #endif
    }
    """
    int bnn_popcount64(unsigned long long x) nogil

cnp.import_array()


def xnor_popcount_gemm(const uint64_t[:, ::1] a, const uint64_t[:, ::1] w, Py_ssize_t nbits):
    """Matching-bit counts between every row of ``a`` and every row of ``w``.

    Rows hold ``nbits`` valid bits; bits past ``nbits`` in the last word are
    masked out of the XNOR.
    """
    cdef Py_ssize_t p = a.shape[0], o = w.shape[0], nw = a.shape[1]
    if w.shape[1] != nw:
        raise ValueError("word counts differ between activations and weights")
    if nw * 64 < nbits or (nw - 1) * 64 >= nbits > 0:
        raise ValueError("nbits inconsistent with word count")
    out = np.empty((p, o), dtype=np.int32)
    cdef int32_t[:, ::1] res = out
    cdef Py_ssize_t i, j, k, last = nw - 1
    cdef int tail = nbits - 64 * last
    cdef uint64_t mask = <uint64_t>0xFFFFFFFFFFFFFFFF if tail == 64 else ((<uint64_t>1 << tail) - 1)
    cdef int acc
    cdef const uint64_t* ar
    cdef const uint64_t* wr
    if nw == 0:
        out[:] = 0
        return out
    with nogil:
        for i in range(p):
            ar = &a[i, 0]
            for j in range(o):
                wr = &w[j, 0]
                acc = 0
                for k in range(last):
                    acc += bnn_popcount64(~(ar[k] ^ wr[k]))
                acc += bnn_popcount64((~(ar[last] ^ wr[last])) & mask)
                res[i, j] = acc
    return out

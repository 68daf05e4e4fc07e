# cython: language_level=3
"""Compiled hot kernels: PCG32 streams, Box-Muller normals and batched matmul.

Every routine here has a numpy twin in ``_fallback`` with the same signature.
Row softmax is not here: numpy's vectorized exp already beats a scalar loop,
so both backends share the numpy version.
The matmul accumulation order (k = 0, 1, ..., K-1, one rounding per product and
per sum) is shared by both, so matmul results agree bit for bit.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport log, sqrt, cos, sin
from libc.stdint cimport uint32_t, uint64_t

cnp.import_array()

cdef uint64_t PCG_MULT = 6364136223846793005ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_32 = 2.3283064365386963e-10


cdef inline uint32_t _pcg_output(uint64_t old) nogil:
    cdef uint32_t xorshifted = <uint32_t>(((old >> 18) ^ old) >> 27)
    cdef uint32_t rot = <uint32_t>(old >> 59)
    return (xorshifted >> rot) | (xorshifted << ((-rot) & 31))


def pcg32_fill(uint64_t state, uint64_t inc, Py_ssize_t n):
    """Return ``(outputs, new_state)`` for ``n`` consecutive PCG32 draws."""
    out = np.empty(n, dtype=np.uint32)
    cdef uint32_t[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = _pcg_output(state)
            state = state * PCG_MULT + inc
    return out, state


def normal_fill(uint64_t state, uint64_t inc, Py_ssize_t n):
    """Box-Muller normals from consecutive (u1, u2) PCG32 pairs.

    Consumes ``2 * ceil(n / 2)`` raw outputs; returns ``(float64 array, new_state)``.
    """
    cdef Py_ssize_t pairs = (n + 1) // 2
    out = np.empty(2 * pairs, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef uint32_t x1, x2
    cdef double u1, u2, r
    with nogil:
        for i in range(pairs):
            x1 = _pcg_output(state)
            state = state * PCG_MULT + inc
            x2 = _pcg_output(state)
            state = state * PCG_MULT + inc
            u1 = (<double>x1 + 1.0) * INV_2_32
            u2 = <double>x2 * INV_2_32
            r = sqrt(-2.0 * log(u1))
            o[2 * i] = r * cos(TWO_PI * u2)
            o[2 * i + 1] = r * sin(TWO_PI * u2)
    return out[:n], state


def bmm(floating[:, :, ::1] a, floating[:, :, ::1] b, floating[:, :, ::1] out):
    """out[p] = a[p] @ b[p or 0]; b may carry a single shared batch slice."""
    cdef Py_ssize_t batch = a.shape[0], m = a.shape[1], kk = a.shape[2]
    cdef Py_ssize_t n = b.shape[2]
    cdef bint shared = b.shape[0] == 1
    cdef Py_ssize_t p, pb, i, k, j
    cdef floating aik, a0, a1, a2, a3
    cdef floating* orow
    cdef floating* brow
    cdef floating *b0
    cdef floating *b1
    cdef floating *b2
    cdef floating *b3
    with nogil:
        for p in range(batch):
            pb = 0 if shared else p
            for i in range(m):
                orow = &out[p, i, 0]
                brow = &b[pb, 0, 0]
                aik = a[p, i, 0]
                for j in range(n):
                    orow[j] = aik * brow[j]
                k = 1
                # four k-steps per sweep over the row; same left-to-right order
                while k + 3 < kk:
                    a0 = a[p, i, k]
                    a1 = a[p, i, k + 1]
                    a2 = a[p, i, k + 2]
                    a3 = a[p, i, k + 3]
                    b0 = &b[pb, k, 0]
                    b1 = &b[pb, k + 1, 0]
                    b2 = &b[pb, k + 2, 0]
                    b3 = &b[pb, k + 3, 0]
                    for j in range(n):
                        orow[j] = (((orow[j] + a0 * b0[j]) + a1 * b1[j]) + a2 * b2[j]) + a3 * b3[j]
                    k = k + 4
                while k < kk:
                    aik = a[p, i, k]
                    brow = &b[pb, k, 0]
                    for j in range(n):
                        orow[j] = orow[j] + aik * brow[j]
                    k = k + 1

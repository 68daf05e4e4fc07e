"""Numpy implementations of the compiled kernels in ``_kernels.pyx``.

Signatures match the extension module one for one. PCG32 outputs and matmul
results are bit-identical to the compiled core; normals and softmax can differ
in the last ulp because numpy and libm disagree on transcendental rounding.
"""

import numpy as np

_MULT = np.uint64(6364136223846793005)
_MASK64 = (1 << 64) - 1
_INV_2_32 = 2.0**-32


def _old_states(state, inc, n):
    # s_i = a^i s_0 + inc * (1 + a + ... + a^(i-1))  (mod 2^64); uint64 arrays wrap
    powers = np.full(n, _MULT, dtype=np.uint64)
    powers[0] = 1
    np.cumprod(powers, out=powers)
    offsets = np.cumsum(powers) - powers
    states = powers * np.uint64(state) + offsets * np.uint64(inc)
    return states


def _output(old):
    xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)).astype(np.uint32)
    rot = (old >> np.uint64(59)).astype(np.uint32)
    return (xorshifted >> rot) | (xorshifted << ((-rot.astype(np.int64)) & 31).astype(np.uint32))


def _advance(last, inc):
    return (int(last) * 6364136223846793005 + inc) & _MASK64


def pcg32_fill(state, inc, n):
    if n == 0:
        return np.empty(0, dtype=np.uint32), state
    old = _old_states(state, inc, n)
    return _output(old), _advance(old[-1], inc)


def normal_fill(state, inc, n):
    pairs = (n + 1) // 2
    if pairs == 0:
        return np.empty(0, dtype=np.float64), state
    raw, state = pcg32_fill(state, inc, 2 * pairs)
    u1 = (raw[0::2].astype(np.float64) + 1.0) * _INV_2_32
    u2 = raw[1::2].astype(np.float64) * _INV_2_32
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * pairs, dtype=np.float64)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n], state


def bmm(a, b, out):
    # one multiply and one add per k, in k order, exactly like the C loop
    np.multiply(a[:, :, 0:1], b[:, 0:1, :], out=out)
    tmp = np.empty_like(out)
    for k in range(1, a.shape[2]):
        np.multiply(a[:, :, k : k + 1], b[:, k : k + 1, :], out=tmp)
        out += tmp


def softmax_rows(x, out):
    np.subtract(x, x.max(axis=1, keepdims=True), out=out)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)

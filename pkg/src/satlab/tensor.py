"""Dense numeric kernels, reproducible randomness and the SATN tensor format.

Tensors are plain numpy arrays. float32 is the compute type; every routine
also accepts float64 (used as a verification mode by the gradient checks)
and preserves the input dtype.
"""

import io
import struct

import numpy as np

from . import kernels

SATN_MAGIC = b"SATN"
SATN_VERSION = 1
_MASK64 = (1 << 64) - 1


class NumericError(FloatingPointError):
    """Raised when a kernel sees or produces NaN/Inf."""


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


def _as_float(x):
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float32)
    return x


class Rng:
    """PCG32 (XSH-RR) generator, seeded like the reference ``pcg32_srandom``.

    The raw output sequence for a given ``(seed, stream)`` is the same on
    every platform and backend.
    """

    MULT = 6364136223846793005

    def __init__(self, seed=42, stream=54):
        self.inc = ((int(stream) << 1) | 1) & _MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + int(seed)) & _MASK64
        self.next_u32()

    def __repr__(self):
        return f"Rng(state={self.state:#018x}, inc={self.inc:#018x})"

    def next_u32(self):
        old = self.state
        self.state = (old * self.MULT + self.inc) & _MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & 0xFFFFFFFF
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & 0xFFFFFFFF

    def raw(self, n):
        """Next ``n`` raw 32-bit outputs as a uint32 array."""
        out, self.state = kernels.pcg32_fill(self.state, self.inc, int(n))
        return out

    def uniform(self, n=None):
        """Uniform floats in [0, 1): one Python float, or a float64 array of ``n``."""
        if n is None:
            return self.next_u32() * 2.0**-32
        return self.raw(n).astype(np.float64) * 2.0**-32

    def randint(self, high):
        """Integer in ``[0, high)`` (multiply-shift, bias below 2^-32 * high)."""
        return (self.next_u32() * int(high)) >> 32

    def normal(self, n):
        """``n`` standard normals (float64) via Box-Muller on consecutive pairs."""
        out, self.state = kernels.normal_fill(self.state, self.inc, int(n))
        return out


def randn(rng, dims, dtype=np.float32):
    """Standard-normal tensor of shape ``dims`` drawn from ``rng``."""
    dims = tuple(int(d) for d in np.atleast_1d(dims))
    if any(d < 0 for d in dims):
        raise ValueError(f"invalid dims {dims}")
    n = int(np.prod(dims, dtype=np.int64))
    return rng.normal(n).astype(dtype).reshape(dims)


def matmul(a, b):
    """Matrix product with a fixed accumulation order.

    ``a`` is ``(..., m, k)``; ``b`` is ``(k, n)`` (shared) or ``(..., k, n)``
    with the same leading dims. Each output element is summed k = 0..K-1
    left to right, so a row's result does not depend on how many other rows
    are in the batch.
    """
    a = _as_float(a)
    b = _as_float(b)
    if a.dtype != b.dtype:
        dtype = np.result_type(a, b)
        a, b = a.astype(dtype), b.astype(dtype)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs at least 2-d operands")
    m, k = a.shape[-2:]
    if b.shape[-2] != k:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    n = b.shape[-1]
    lead = a.shape[:-2]
    if b.ndim == 2:
        a3 = np.ascontiguousarray(a).reshape(1, -1, k)
        b3 = np.ascontiguousarray(b).reshape(1, k, n)
        out = np.empty((1, a3.shape[1], n), dtype=a.dtype)
    else:
        if b.shape[:-2] != lead:
            raise ValueError(f"matmul batch dims disagree: {a.shape} x {b.shape}")
        a3 = np.ascontiguousarray(a).reshape(-1, m, k)
        b3 = np.ascontiguousarray(b).reshape(-1, k, n)
        out = np.empty((a3.shape[0], m, n), dtype=a.dtype)
    if k == 0:
        out[...] = 0
    elif out.size:
        kernels.bmm(a3, b3, out)
    return check_finite(out, "matmul output").reshape(*lead, m, n)


def softmax_rows(logits):
    """Softmax along the last axis with max subtraction."""
    x = _as_float(logits)
    if np.isnan(x).any():
        raise NumericError("NaN logits in softmax_rows")
    shape = x.shape
    x2 = np.ascontiguousarray(x).reshape(-1, shape[-1])
    out = np.empty_like(x2)
    if out.size:
        kernels.softmax_rows(x2, out)
    return check_finite(out, "softmax output").reshape(shape)


def column_stats(x):
    """Per-channel mean and population std over the position axis (-2).

    Rows are accumulated in order, so every channel's statistics are
    independent of any leading batch dims.
    """
    x = _as_float(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ValueError("column_stats needs at least one row")
    m = x.shape[-2]
    total = x[..., 0, :].copy()
    for i in range(1, m):
        total += x[..., i, :]
    mean = total / x.dtype.type(m)
    dev = x - mean[..., None, :]
    sq = dev[..., 0, :] * dev[..., 0, :]
    for i in range(1, m):
        sq += dev[..., i, :] * dev[..., i, :]
    std = np.sqrt(sq / x.dtype.type(m))
    return mean, std


# ---------------------------------------------------------------------------
# SATN binary tensor dump
# ---------------------------------------------------------------------------


def write_tensor(fh, x):
    """Write ``x`` as a SATN record (always stored as little-endian float32)."""
    x = np.asarray(x)
    if x.ndim == 0:
        x = x.reshape(1)
    fh.write(SATN_MAGIC)
    fh.write(struct.pack("<II", SATN_VERSION, x.ndim))
    fh.write(struct.pack(f"<{x.ndim}Q", *x.shape))
    fh.write(np.ascontiguousarray(x, dtype="<f4").tobytes())


def read_tensor(fh):
    magic = fh.read(4)
    if magic != SATN_MAGIC:
        raise ValueError(f"bad SATN magic {magic!r}")
    version, ndim = struct.unpack("<II", fh.read(8))
    if version != SATN_VERSION:
        raise ValueError(f"unsupported SATN version {version}")
    dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
    count = int(np.prod(dims, dtype=np.int64))
    data = fh.read(4 * count)
    if len(data) != 4 * count:
        raise ValueError("truncated SATN payload")
    return np.frombuffer(data, dtype="<f4").astype(np.float32).reshape(dims)


def dumps(x):
    buf = io.BytesIO()
    write_tensor(buf, x)
    return buf.getvalue()


def loads(data):
    return read_tensor(io.BytesIO(data))


def save(path, x):
    with open(path, "wb") as fh:
        write_tensor(fh, x)


def load(path):
    with open(path, "rb") as fh:
        return read_tensor(fh)

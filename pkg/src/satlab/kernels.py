"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise (or when the
``SATLAB_PURE_PYTHON`` environment variable is set) the numpy twins in
``_fallback`` take over. ``BACKEND`` names the active one.
"""

import os

from . import _fallback

if os.environ.get("SATLAB_PURE_PYTHON"):
    _impl = _fallback
else:
    try:
        from . import _kernels as _impl
    except ImportError:
        _impl = _fallback

BACKEND = "compiled" if _impl is not _fallback else "python"

pcg32_fill = _impl.pcg32_fill
normal_fill = _impl.normal_fill
bmm = _impl.bmm
# numpy's vectorized exp is faster than a scalar C loop, so one version serves both
softmax_rows = _fallback.softmax_rows


def backends():
    """Map of available backend name -> kernel module (for parity tests and benchmarks)."""
    found = {"python": _fallback}
    try:
        from . import _kernels
    except ImportError:
        pass
    else:
        found["compiled"] = _kernels
    return found

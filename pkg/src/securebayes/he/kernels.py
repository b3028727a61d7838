"""Kernel selection: the compiled extension when importable, numpy otherwise.

Set ``SECUREBAYES_PURE_PYTHON=1`` to force the numpy fallback.
"""
import os

from . import _kernels_py

if os.environ.get("SECUREBAYES_PURE_PYTHON"):
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl
    except ImportError:  # extension not built
        _impl = _kernels_py

BACKEND = _impl.BACKEND
mulmod_rows = _impl.mulmod_rows
ntt_forward_rows = _impl.ntt_forward_rows
ntt_inverse_rows = _impl.ntt_inverse_rows


def implementations():
    """Return ``{name: module}`` for every kernel implementation available."""
    found = {"numpy": _kernels_py}
    try:
        from . import _kernels
        found["cython"] = _kernels
    except ImportError:
        pass
    return found

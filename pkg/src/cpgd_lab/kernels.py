"""Kernel backend selection.

The compiled extension is used when it imports cleanly; setting
``CPGD_LAB_BACKEND=python`` forces the numpy fallback. Results agree across
backends to ~1e-12 but are only bit-reproducible within one backend.
"""

import os

from . import _kernels_py

_requested = os.environ.get("CPGD_LAB_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _kernels_py
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _kernels_py

BACKEND = _impl.BACKEND
token_logprobs = _impl.token_logprobs
scatter_grad = _impl.scatter_grad
sample_batch = _impl.sample_batch


def available_backends():
    """Return the importable kernel modules keyed by backend name."""
    found = {"python": _kernels_py}
    try:
        from . import _kernels  # type: ignore[attr-defined]
    except ImportError:
        return found
    found["cython"] = _kernels
    return found

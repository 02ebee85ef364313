"""Compositing backend selection.

The compiled extension is preferred; the pure-Python fallback is used when
it is missing or when FLOD_BACKEND=python is set. Both expose the same
kernel functions and produce bit-identical results.
"""

from __future__ import annotations

import os

from . import _compose_py

_requested = os.environ.get("FLOD_BACKEND", "").strip().lower()

if _requested in ("", "cython", "compiled"):
    try:
        from . import _compose as _kernels  # type: ignore[attr-defined]
    except ImportError:
        if _requested:
            raise ImportError(
                "FLOD_BACKEND=cython requested but the compiled extension is not built"
            )
        _kernels = _compose_py
elif _requested == "python":
    _kernels = _compose_py
else:
    raise ValueError(f"unknown FLOD_BACKEND {_requested!r} (use 'cython' or 'python')")

kernels = _kernels
BACKEND = _kernels.backend_name()


def get_kernels(name: str | None = None):
    """Kernel module by name ('cython' or 'python'); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _compose_py
    if name in ("cython", "compiled"):
        from . import _compose  # raises ImportError if not built

        return _compose
    raise ValueError(f"unknown backend {name!r}")

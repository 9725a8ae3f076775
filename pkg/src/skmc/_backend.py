"""Kernel backend selection.

The compiled Cython extension is preferred when importable; otherwise the
pure-NumPy reference kernels are used. The environment variable
``SKMC_BACKEND=python|compiled`` forces a choice (useful for the benchmark
and the cross-backend equivalence tests), as does :func:`set_backend`.
"""

from __future__ import annotations

import os

from . import _kernels_py

try:
    from . import _kernels_cy
    HAVE_COMPILED = True
except ImportError:
    _kernels_cy = None
    HAVE_COMPILED = False


def _from_name(name):
    if name == "python":
        return _kernels_py
    if name == "compiled":
        if not HAVE_COMPILED:
            raise RuntimeError(
                "compiled backend requested but skmc._kernels_cy is not built; "
                "run `pip install -e . --no-build-isolation`")
        return _kernels_cy
    raise ValueError(f"unknown backend {name!r} (use 'python' or 'compiled')")


_env = os.environ.get("SKMC_BACKEND")
if _env:
    _active = _from_name(_env)
else:
    _active = _kernels_cy if HAVE_COMPILED else _kernels_py


def kernels():
    """Active kernel module."""
    return _active


def backend_name():
    return _active.BACKEND_NAME


def set_backend(name):
    """Switch the active backend; returns the previous name."""
    global _active
    prev = _active.BACKEND_NAME
    _active = _from_name(name)
    return prev

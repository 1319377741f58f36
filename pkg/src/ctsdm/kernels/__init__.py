"""Projector kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import: numba unless ``CTSDM_DISABLE_NUMBA``
is set to a truthy value or numba fails to import. Both backends stay
reachable through :func:`get_backend` for tests and benchmarks.
"""
from __future__ import annotations

import logging
import os
from types import ModuleType

from . import _numpy

logger = logging.getLogger(__name__)

KERNEL_NAMES = (
    "forward_project",
    "back_project",
    "weighted_backproject",
    "weighted_backproject_adjoint",
)


def _flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() in {"1", "true", "yes", "on"}


def numba_available() -> bool:
    try:
        from . import _numba  # noqa: F401
    except ImportError:
        return False
    return True


def get_backend(name: str | None = None) -> ModuleType:
    """Return the kernel module for ``"numba"`` or ``"numpy"`` (default: active)."""
    name = name or BACKEND
    if name == "numpy":
        return _numpy
    if name == "numba":
        from . import _numba

        return _numba
    raise ValueError(f"unknown kernel backend {name!r}")


def apply_thread_limit() -> int | None:
    """Cap numba/torch threads from ``CTSDM_THREADS``; returns the cap applied."""
    raw = os.environ.get("CTSDM_THREADS")
    if not raw:
        return None
    threads = max(1, int(raw))
    if BACKEND == "numba":
        import numba

        numba.set_num_threads(min(threads, numba.config.NUMBA_NUM_THREADS))
    try:
        import torch

        torch.set_num_threads(threads)
    except ImportError:
        pass
    return threads


if _flag("CTSDM_DISABLE_NUMBA"):
    BACKEND = "numpy"
elif numba_available():
    BACKEND = "numba"
else:
    logger.warning("numba unavailable, using numpy kernels")
    BACKEND = "numpy"

_active = get_backend(BACKEND)
forward_project = _active.forward_project
back_project = _active.back_project
weighted_backproject = _active.weighted_backproject
weighted_backproject_adjoint = _active.weighted_backproject_adjoint

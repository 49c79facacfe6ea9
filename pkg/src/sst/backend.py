"""Kernel backend selection.

At import time the compiled Cython kernels (``sst._kernels``) are preferred,
falling back to the numpy implementation (``sst._kernels_py``).  Set
``SST_BACKEND=python`` or ``SST_BACKEND=cython`` to force one; forcing the
compiled backend when it is not built is an error.

``SST_THREADS`` caps internal parallelism (row-partitioned batch labeling);
the default of 1 keeps every run bit-deterministic trivially.  Chunk
boundaries are fixed regardless of the thread count, so results are
identical at any setting.
"""

from __future__ import annotations

import os

from . import _kernels_py
from .errors import ValidationError

try:
    from . import _kernels as _compiled
except ImportError:
    _compiled = None


def _select():
    forced = os.environ.get("SST_BACKEND", "").strip().lower()
    if forced in ("python", "numpy"):
        return _kernels_py
    if forced in ("cython", "compiled", "c"):
        if _compiled is None:
            raise ValidationError(
                "SST_BACKEND requests the compiled backend but sst._kernels is not built"
            )
        return _compiled
    if forced:
        raise ValidationError(f"unknown SST_BACKEND value: {forced!r}")
    return _compiled if _compiled is not None else _kernels_py


kernels = _select()
BACKEND = kernels.BACKEND


def num_threads() -> int:
    """Thread cap from SST_THREADS (default 1)."""
    raw = os.environ.get("SST_THREADS", "1").strip()
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"SST_THREADS must be an integer, got {raw!r}") from exc
    return max(1, n)

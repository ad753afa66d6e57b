"""Backend switch for the compiled kernels.

Numba is a dependency but the import is guarded. When it is importable the ``@njit`` kernels in
:mod:`fsdakit.kernels` are used, unless ``FSDAKIT_DISABLE_NUMBA`` is set to a
truthy value, in which case the vectorised numpy implementations are used.
The flag is read once at import time.
"""

from __future__ import annotations

import os

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

ENV_FLAG = "FSDAKIT_DISABLE_NUMBA"

HAVE_NUMBA = numba is not None


def numba_disabled_by_env() -> bool:
    return os.environ.get(ENV_FLAG, "").strip().lower() in {"1", "true", "yes", "on"}


USE_NUMBA = HAVE_NUMBA and not numba_disabled_by_env()


def njit(fn):
    """``numba.njit(cache=True)`` when numba is installed, identity otherwise."""
    if numba is None:
        return fn
    return numba.njit(cache=True)(fn)

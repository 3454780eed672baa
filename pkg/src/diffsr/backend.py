"""Numba/numpy kernel backend selection.

The hot kernels in :mod:`diffsr.kernels` exist in two functionally identical
variants: numba ``@njit`` loops and pure-numpy array code.  The active variant
is chosen once at import time from the ``DIFFSR_NUMBA`` environment variable:

* ``DIFFSR_NUMBA=0`` (or ``off``/``false``): force the numpy fallback.
* ``DIFFSR_NUMBA=1`` (or ``require``): require numba, fail if unavailable.
* unset / ``auto``: use numba when it imports, numpy otherwise.

Both paths agree to floating-point roundoff (asserted in the test suite);
``benchmarks/bench_kernels.py`` compares their throughput.
"""

from __future__ import annotations

import os

_FALSY = {"0", "off", "false", "no"}
_TRUTHY = {"1", "on", "true", "yes", "require"}


def _resolve() -> bool:
    raw = os.environ.get("DIFFSR_NUMBA", "auto").strip().lower()
    if raw in _FALSY:
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        if raw in _TRUTHY:
            raise ImportError(
                "DIFFSR_NUMBA=%r requires numba, but it failed to import" % raw
            )
        return False
    return True


NUMBA_ENABLED: bool = _resolve()


def backend_name() -> str:
    return "numba" if NUMBA_ENABLED else "numpy"

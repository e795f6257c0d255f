"""Kernel selection.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``SMRLNN_PURE_PYTHON=1`` to force the fallback (both paths are tested).
"""
import os

from . import _fallback

compiled = None
if os.environ.get("SMRLNN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as compiled
    except ImportError:  # extension not built
        compiled = None

impl = compiled if compiled is not None else _fallback
COMPILED = compiled is not None
BACKEND = "compiled" if COMPILED else "python"

jacobi_eigh = impl.jacobi_eigh
cholesky = impl.cholesky
cho_solve_factored = impl.cho_solve_factored
greedy_match = impl.greedy_match

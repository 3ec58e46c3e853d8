"""Selects the compiled kernels when available, else the numpy fallback."""
import os

if os.environ.get("GRADMERGE_PURE", "") not in ("", "0"):
    from . import _kernels_py as kernels
    BACKEND = "python"
else:
    try:
        from . import _kernels as kernels
        BACKEND = "cython"
    except ImportError:
        from . import _kernels_py as kernels
        BACKEND = "python"

__all__ = ["kernels", "BACKEND"]

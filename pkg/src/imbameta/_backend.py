"""Select the kernel backend at import time.

The compiled extension is preferred; set ``IMBAMETA_BACKEND=python`` to force
the NumPy fallback (benchmarks and tests use this to compare both).
"""
import importlib
import os

from . import _kernels_py

BACKENDS = {"python": _kernels_py}

try:
    BACKENDS["cython"] = importlib.import_module("imbameta._kernels")
except ImportError:
    pass


def _select():
    wanted = os.environ.get("IMBAMETA_BACKEND", "").strip().lower()
    if wanted:
        if wanted not in BACKENDS:
            raise ImportError(f"IMBAMETA_BACKEND={wanted!r} is not available; have {sorted(BACKENDS)}")
        return wanted
    return "cython" if "cython" in BACKENDS else "python"


NAME = _select()
kernels = BACKENDS[NAME]

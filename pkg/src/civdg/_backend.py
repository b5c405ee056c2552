"""Kernel backend selection.

The compiled Cython module is used when it imports cleanly; otherwise the
numpy implementations are used.  Set ``CIVDG_PURE_PYTHON=1`` to force the
fallback (the benchmark and the backend-agreement tests do this per call via
``load``).
"""

import importlib
import os

_FORCE_PY = os.environ.get("CIVDG_PURE_PYTHON", "") not in ("", "0")


def load(name=None):
    """Return a kernel module: ``"cython"``, ``"python"`` or best available."""
    if name == "python":
        return importlib.import_module("civdg._pykernels")
    if name == "cython":
        return importlib.import_module("civdg._ckernels")
    if not _FORCE_PY:
        try:
            return importlib.import_module("civdg._ckernels")
        except ImportError:
            pass
    return importlib.import_module("civdg._pykernels")


kernels = load()
BACKEND = kernels.BACKEND

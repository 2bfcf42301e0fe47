"""Pick the compiled kernels when they import, the numpy ones otherwise.

Set ``IMA_BSS_PURE=1`` to force the numpy backend.
"""
import os

from . import _reference

_forced_pure = os.environ.get("IMA_BSS_PURE", "").strip() not in ("", "0")

try:
    if _forced_pure:
        raise ImportError("pure backend forced by IMA_BSS_PURE")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

kernels = _compiled if _compiled is not None else _reference
BACKEND = "cython" if _compiled is not None else "python"


def get_kernels(name: str | None = None):
    """Kernel module by name (``"cython"`` / ``"python"``); default is the active one."""
    if name is None:
        return kernels
    if name == "python":
        return _reference
    if name == "cython":
        if _compiled is None:
            raise ImportError("compiled kernels are not available")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _compiled is not None else [])

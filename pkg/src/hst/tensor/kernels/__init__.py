"""Spatial hot kernels: compiled core with a pure-numpy fallback.

The backend is selected once at import. The Cython extension is used when
importable; otherwise the numpy fallback takes over transparently. Set
HST_KERNELS=numpy or HST_KERNELS=native to force a backend (forcing the
native one raises if the extension was not built).
"""

from __future__ import annotations

import importlib
import os

from . import fallback


def _load_native():
    try:
        return importlib.import_module("._native", __name__)
    except ImportError:
        return None


_requested = os.environ.get("HST_KERNELS", "auto")
if _requested not in ("auto", "native", "numpy"):
    raise ValueError(f"HST_KERNELS must be auto, native or numpy, got {_requested!r}")

_native_mod = _load_native() if _requested in ("auto", "native") else None
if _requested == "native" and _native_mod is None:
    raise ImportError("HST_KERNELS=native but the compiled kernel extension is missing")

_active = _native_mod if _native_mod is not None else fallback

BACKEND_NAME = "native" if _native_mod is not None else "numpy"

conv2d_forward = _active.conv2d_forward
conv2d_grad_input = _active.conv2d_grad_input
conv2d_grad_weight = _active.conv2d_grad_weight
bilinear_forward = _active.bilinear_forward
bilinear_grad_input = _active.bilinear_grad_input


def available_backends() -> list[str]:
    names = ["numpy"]
    native = _native_mod if _native_mod is not None else _load_native()
    if native is not None:
        names.insert(0, "native")
    return names


def get_backend(name: str):
    """Fetch a backend module by name (for parity tests and benchmarks)."""
    if name == "numpy":
        return fallback
    if name == "native":
        native = _native_mod if _native_mod is not None else _load_native()
        if native is None:
            raise ImportError("native kernel extension is not built")
        return native
    raise ValueError(f"unknown kernel backend {name!r}")

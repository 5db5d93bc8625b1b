"""Kernel backend selection.

The compiled Cython module is used when it imports; otherwise the numpy
fallback is used. Setting ``QFEEDSIM_PURE_PYTHON=1`` forces the fallback.
"""
import importlib
import os

__all__ = ["kernels", "NAME", "load"]


def load(name):
    """Return the kernel module called ``"compiled"`` or ``"python"``."""
    if name == "compiled":
        return importlib.import_module("qfeedsim._kernels")
    if name == "python":
        return importlib.import_module("qfeedsim._fallback")
    raise ValueError(f"unknown backend {name!r}")


def _select():
    if os.environ.get("QFEEDSIM_PURE_PYTHON", "") not in ("", "0"):
        return "python", load("python")
    try:
        return "compiled", load("compiled")
    except ImportError:
        return "python", load("python")


NAME, kernels = _select()

"""Backend dispatch for the hot kernels.

Two interchangeable implementations exist: a numba-compiled one and a pure
numpy one.  Selection order: an explicit ``set_backend`` call, else the
``EPCONV_BACKEND`` environment variable (``numba``, ``numpy`` or ``auto``),
else ``auto``, which prefers numba and silently falls back to numpy when
numba is unavailable.
"""

from __future__ import annotations

import contextlib
import importlib
import os

_ENV_VAR = "EPCONV_BACKEND"
_current = None  # loaded backend module


def _load(name: str):
    if name == "numpy":
        return importlib.import_module("epconv.kernels.numpy_backend")
    if name == "numba":
        return importlib.import_module("epconv.kernels.numba_backend")
    if name == "auto":
        try:
            return importlib.import_module("epconv.kernels.numba_backend")
        except ImportError:
            return importlib.import_module("epconv.kernels.numpy_backend")
    raise ValueError(f"unknown backend {name!r} (expected 'numba', 'numpy' or 'auto')")


def set_backend(name: str) -> str:
    """Force a backend.  Returns the name actually in effect."""
    global _current
    _current = _load(name)
    return _current.NAME


def get_backend() -> str:
    return _mod().NAME


def available_backends() -> list[str]:
    names = ["numpy"]
    try:
        importlib.import_module("epconv.kernels.numba_backend")
        names.insert(0, "numba")
    except ImportError:
        pass
    return names


@contextlib.contextmanager
def use_backend(name: str):
    """Temporarily switch backends (tests, benchmarks)."""
    global _current
    saved = _current
    set_backend(name)
    try:
        yield
    finally:
        _current = saved


def _mod():
    global _current
    if _current is None:
        _current = _load(os.environ.get(_ENV_VAR, "auto"))
    return _current


# ---- dispatched kernel surface ----


def conv2d(x, w, stride=1, padding=0):
    return _mod().conv2d(x, w, stride, padding)


def conv2d_transpose(g, w, stride, padding, out_hw):
    return _mod().conv2d_transpose(g, w, stride, padding, out_hw)


def conv2d_wgrad(x, g, stride, padding, kernel):
    return _mod().conv2d_wgrad(x, g, stride, padding, kernel)


def maxpool(x, f):
    return _mod().maxpool(x, f)


def maxunpool(y, idx, f):
    return _mod().maxunpool(y, idx, f)


def avgpool(x, f):
    return _mod().avgpool(x, f)


def avgunpool(y, f, alpha):
    return _mod().avgunpool(y, f, alpha)


def crnn_update(xi, drive, step_size):
    return _mod().crnn_update(xi, drive, step_size)


def snn_update(xi, rho_prev, v, d, s, phi, step_size, decay, threshold):
    return _mod().snn_update(xi, rho_prev, v, d, s, phi, step_size, decay, threshold)


def sigma_delta(v, x, threshold):
    return _mod().sigma_delta(v, x, threshold)

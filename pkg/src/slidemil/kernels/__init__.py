"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

Backend selection:
  * default: numba if importable, else numpy
  * env var SLIDEMIL_NUMBA=0 (or "false"/"off"/"no") forces the numpy path
  * set_backend("numpy"|"numba"|None) overrides programmatically (None = auto)

Both backends implement the same contracts and accumulate in the same order,
so depthwise_conv2d / depthwise_conv2d_grad_input results are bitwise equal.
"""

import os

from . import _numpy

_ENV_VAR = "SLIDEMIL_NUMBA"
_override = None
_numba_mod = None
_numba_error = None


def _load_numba():
    global _numba_mod, _numba_error
    if _numba_mod is None and _numba_error is None:
        try:
            from . import _numba as mod
            _numba_mod = mod
        except ImportError as exc:  # pragma: no cover - depends on env
            _numba_error = exc
    return _numba_mod


def _env_allows_numba():
    value = os.environ.get(_ENV_VAR, "1").strip().lower()
    return value not in ("0", "false", "off", "no")


def set_backend(name):
    """Force a backend ("numpy" or "numba") or restore auto selection (None)."""
    global _override
    if name not in (None, "numpy", "numba"):
        raise ValueError(f"unknown kernel backend: {name!r}")
    if name == "numba" and _load_numba() is None:
        raise RuntimeError(f"numba backend unavailable: {_numba_error}")
    _override = name


def active_backend():
    """Name of the backend that will serve the next kernel call."""
    if _override is not None:
        return _override
    if _env_allows_numba() and _load_numba() is not None:
        return "numba"
    return "numpy"


def _impl():
    return _numba_mod if active_backend() == "numba" else _numpy


def depthwise_conv2d(x, kernel):
    return _impl().depthwise_conv2d(x, kernel)


def depthwise_conv2d_grad_input(grad_out, kernel):
    return _impl().depthwise_conv2d_grad_input(grad_out, kernel)


def depthwise_conv2d_grad_kernel(grad_out, x, k):
    return _impl().depthwise_conv2d_grad_kernel(grad_out, x, k)


def points_in_polygon(points, polygon):
    return _impl().points_in_polygon(points, polygon)

"""Execution backend selection for the per-pixel fused convolution.

At import time we prefer the compiled Cython extension and fall back to
the pure-numpy kernels if it is absent (source checkout without a build,
unsupported platform).  Set ``KBNET_BACKEND=numpy`` or
``KBNET_BACKEND=compiled`` to force a choice; forcing ``compiled`` raises
if the extension is missing.

Both backends implement the identical mathematical contract and agree
elementwise to floating-point roundoff; ``benchmarks/bench_kernels.py``
compares their throughput.
"""

from __future__ import annotations

import os

import numpy as np

from . import _fused_np
from .errors import ConfigError

try:
    from . import _fused_cy

    _HAVE_COMPILED = True
except ImportError:
    _fused_cy = None
    _HAVE_COMPILED = False

_choice = os.environ.get("KBNET_BACKEND", "auto")
if _choice == "numpy":
    _impl = _fused_np
    ACTIVE = "numpy"
elif _choice == "compiled":
    if not _HAVE_COMPILED:
        raise ConfigError("KBNET_BACKEND=compiled but the extension is not built")
    _impl = _fused_cy
    ACTIVE = "compiled"
elif _choice == "auto":
    _impl = _fused_cy if _HAVE_COMPILED else _fused_np
    ACTIVE = "compiled" if _HAVE_COMPILED else "numpy"
else:
    raise ConfigError(f"unknown KBNET_BACKEND value: {_choice!r}")


def _as_c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def fused_conv_forward(xe, bases, coeffs):
    return _impl.fused_conv_forward(_as_c(xe), _as_c(bases), _as_c(coeffs))


def fused_conv_backward(xe, bases, coeffs, grad_out):
    return _impl.fused_conv_backward(
        _as_c(xe), _as_c(bases), _as_c(coeffs), _as_c(grad_out)
    )


def get_impl(name: str):
    """Return a specific backend module by name (for tests/benchmarks)."""
    if name == "numpy":
        return _fused_np
    if name == "compiled":
        if not _HAVE_COMPILED:
            raise ConfigError("compiled backend is not available")
        return _fused_cy
    raise ConfigError(f"unknown backend {name!r}")


def available() -> list[str]:
    return ["numpy", "compiled"] if _HAVE_COMPILED else ["numpy"]

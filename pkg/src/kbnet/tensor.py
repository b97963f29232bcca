"""Dense rank-4 tensor substrate.

Tensors are plain numpy arrays in NCHW layout (batch, channel, height,
width), row-major and contiguous.  Everything above this module -- the
neural operators, the network, the training loop -- is built from the
handful of primitives here: elementwise arithmetic, reductions, and
grouped 2-D convolution with its exact analytic adjoint.

All operations are pure and deterministic: reductions accumulate in
numpy's fixed row-major order, so identical inputs give bit-identical
outputs across runs.  Set the environment variable ``KBNET_DEBUG_FINITE=1``
to scan every convolution result for NaN/Inf.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

_DEBUG_FINITE = os.environ.get("KBNET_DEBUG_FINITE", "") not in ("", "0")


def require_nchw(x: np.ndarray, name: str = "tensor") -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 NCHW, got shape {x.shape}")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")


def require_same_shape(a: np.ndarray, b: np.ndarray, op: str = "op") -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _check_finite(x: np.ndarray, where: str) -> None:
    if _DEBUG_FINITE and not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values produced by {where}")


# ---------------------------------------------------------------------------
# Elementwise suite


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    require_same_shape(a, b, "add")
    return a + b


def sub(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    require_same_shape(a, b, "sub")
    return a - b


def mul(a: np.ndarray, b) -> np.ndarray:
    if isinstance(b, np.ndarray):
        require_same_shape(a, b, "mul")
    return a * b


def scale(a: np.ndarray, s: float) -> np.ndarray:
    return a * s


def tensor_sum(a: np.ndarray) -> float:
    # numpy sums in row-major order for C-contiguous input, which pins the
    # accumulation order and keeps results reproducible.
    return float(np.sum(np.ascontiguousarray(a)))


# ---------------------------------------------------------------------------
# Convolution


@dataclass(frozen=True)
class ConvSpec:
    """Static grouped-convolution geometry.

    ``padding=None`` means "same" padding (stride 1, odd K only).
    """

    out_channels: int
    in_channels: int
    kernel_size: int
    stride: int = 1
    padding: int | None = None
    groups: int = 1

    def __post_init__(self):
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"channels ({self.in_channels}->{self.out_channels}) not divisible "
                f"by groups={self.groups}"
            )
        if self.stride not in (1, 2):
            raise ShapeError(f"stride must be 1 or 2, got {self.stride}")
        if self.padding is None and self.kernel_size % 2 == 0:
            raise ShapeError("'same' padding requires odd kernel size")

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding

    def weight_shape(self) -> tuple[int, int, int, int]:
        return (
            self.out_channels,
            self.in_channels // self.groups,
            self.kernel_size,
            self.kernel_size,
        )

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1


def _im2col(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Gather K*K patches: (n, Cin, H, W) -> (n, Cin, K, K, Ho, Wo)."""
    n, c, h, w = x.shape
    k, s, p = spec.kernel_size, spec.stride, spec.pad
    ho, wo = spec.out_hw(h, w)
    if p:
        xp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xp[:, :, p : p + h, p : p + w] = x
    else:
        xp = x
    cols = np.empty((n, c, k, k, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s]
    return cols


def _col2im(
    gcols: np.ndarray, x_shape: tuple[int, int, int, int], spec: ConvSpec
) -> np.ndarray:
    """Scatter-add the adjoint of _im2col back onto the input grid."""
    n, c, h, w = x_shape
    k, s, p = spec.kernel_size, spec.stride, spec.pad
    ho, wo = gcols.shape[-2:]
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=gcols.dtype)
    for ki in range(k):
        for kj in range(k):
            gxp[:, :, ki : ki + s * ho : s, kj : kj + s * wo : s] += gcols[:, :, ki, kj]
    return gxp[:, :, p : p + h, p : p + w] if p else gxp


def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray | None,
    spec: ConvSpec,
) -> np.ndarray:
    """Grouped 2-D convolution (cross-correlation), zero padded."""
    require_nchw(x, "conv input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(
            f"conv input has {x.shape[1]} channels, spec expects {spec.in_channels}"
        )
    if weight.shape != spec.weight_shape():
        raise ShapeError(
            f"conv weight shape {weight.shape} != spec shape {spec.weight_shape()}"
        )
    n = x.shape[0]
    g = spec.groups
    k = spec.kernel_size
    cing = spec.in_channels // g
    coutg = spec.out_channels // g
    ho, wo = spec.out_hw(x.shape[2], x.shape[3])

    cols = _im2col(x, spec).reshape(n, g, cing * k * k, ho * wo)
    wg = weight.reshape(g, coutg, cing * k * k)
    out = np.matmul(wg, cols)  # (n, g, coutg, L)
    out = out.reshape(n, spec.out_channels, ho, wo)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    _check_finite(out, "conv2d_forward")
    return np.ascontiguousarray(out)


def conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    grad_out: np.ndarray,
    spec: ConvSpec,
    need_grad_x: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Exact adjoints of conv2d_forward: (grad_x, grad_weight, grad_bias)."""
    require_nchw(grad_out, "grad_out")
    ho, wo = spec.out_hw(x.shape[2], x.shape[3])
    if grad_out.shape != (x.shape[0], spec.out_channels, ho, wo):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} != expected "
            f"{(x.shape[0], spec.out_channels, ho, wo)}"
        )
    n = x.shape[0]
    g = spec.groups
    k = spec.kernel_size
    cing = spec.in_channels // g
    coutg = spec.out_channels // g

    grad_b = grad_out.sum(axis=(0, 2, 3))

    cols = _im2col(x, spec).reshape(n, g, cing * k * k, ho * wo)
    go = grad_out.reshape(n, g, coutg, ho * wo)
    grad_w = np.matmul(go, cols.transpose(0, 1, 3, 2)).sum(axis=0)
    grad_w = grad_w.reshape(spec.weight_shape())

    grad_x = None
    if need_grad_x:
        wg = weight.reshape(g, coutg, cing * k * k)
        gcols = np.matmul(wg.transpose(0, 2, 1), go)  # (n, g, cing*k*k, L)
        gcols = gcols.reshape(n, spec.in_channels, k, k, ho, wo)
        grad_x = _col2im(gcols, x.shape, spec)
        _check_finite(grad_x, "conv2d_backward")
    return grad_x, grad_w, grad_b

"""Numpy implementation of the per-pixel fused grouped convolution.

This is the "materialize the fused kernels" execution strategy: the
per-pixel aggregation kernels M = sum_t F_t * W_t are contracted against
im2col patches in one einsum, without ever forming M for the whole image
at once.  The compiled extension (kbnet._fused_cy) implements the same
contract with explicit loops; kbnet.backend picks one at import time.

Shapes:
    xe     (b, C, H, W)      feature map, C divisible by 4
    bases  (N, C, 4, K, K)   kernel bank, groups of 4 input channels
    coeffs (b, N, H, W)      per-pixel fusion coefficients
    out    (b, C, H, W)      zero-padded "same" convolution
"""

from __future__ import annotations

import numpy as np

from .tensor import ConvSpec, _col2im, _im2col


def _grouped_views(xe, bases, coeffs):
    b, c, h, w = xe.shape
    n_bases, _, _, k, _ = bases.shape
    g = c // 4
    spec = ConvSpec(
        out_channels=c, in_channels=c, kernel_size=k, stride=1, groups=g
    )
    cols = _im2col(xe, spec).reshape(b, g, 4, k * k, h * w)
    wview = bases.reshape(n_bases, g, 4, 4, k * k)  # (t, g, out, in, k*k)
    fview = coeffs.reshape(b, n_bases, h * w)
    return cols, wview, fview, spec


def fused_conv_forward(
    xe: np.ndarray, bases: np.ndarray, coeffs: np.ndarray
) -> np.ndarray:
    b, c, h, w = xe.shape
    cols, wview, fview, _ = _grouped_views(xe, bases, coeffs)
    out = np.einsum("btl,tgvuk,bgukl->bgvl", fview, wview, cols, optimize=True)
    return np.ascontiguousarray(out.reshape(b, c, h, w))


def fused_conv_backward(
    xe: np.ndarray,
    bases: np.ndarray,
    coeffs: np.ndarray,
    grad_out: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    b, c, h, w = xe.shape
    n_bases, _, _, k, _ = bases.shape
    g = c // 4
    cols, wview, fview, spec = _grouped_views(xe, bases, coeffs)
    go = grad_out.reshape(b, g, 4, h * w)

    grad_f = np.einsum("bgvl,tgvuk,bgukl->btl", go, wview, cols, optimize=True)
    grad_w = np.einsum("bgvl,btl,bgukl->tgvuk", go, fview, cols, optimize=True)
    gcols = np.einsum("bgvl,btl,tgvuk->bgukl", go, fview, wview, optimize=True)
    gcols = gcols.reshape(b, c, k, k, h, w)
    grad_xe = _col2im(gcols, xe.shape, spec)
    return (
        grad_xe,
        grad_w.reshape(bases.shape),
        grad_f.reshape(coeffs.shape),
    )

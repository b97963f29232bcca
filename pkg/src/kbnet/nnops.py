"""Elementary neural operators with hand-derived backward passes.

Every forward returns ``(output, cache)`` where ``cache`` holds exactly
the activations its matching backward needs.  Backwards return the input
gradient followed by parameter gradients in declaration order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import require_nchw, require_same_shape


# ---------------------------------------------------------------------------
# SimpleGate


def simple_gate(x: np.ndarray):
    """Split channels in half and multiply the halves elementwise."""
    require_nchw(x, "simple_gate input")
    c = x.shape[1]
    if c % 2:
        raise ShapeError(f"simple_gate needs an even channel count, got {c}")
    a, b = x[:, : c // 2], x[:, c // 2 :]
    return a * b, (a, b)


def simple_gate_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    a, b = cache
    return np.concatenate([grad_out * b, grad_out * a], axis=1)


# ---------------------------------------------------------------------------
# Per-pixel layer normalization (over the channel axis)


@dataclass
class LayerNormParams:
    gamma: np.ndarray  # (C,)
    beta: np.ndarray  # (C,)
    epsilon: float = 1e-6


def layer_norm2d(x: np.ndarray, p: LayerNormParams):
    """Standardize the C-vector at each (n, h, w), then scale and shift."""
    require_nchw(x, "layer_norm input")
    if x.shape[1] != p.gamma.shape[0]:
        raise ShapeError(
            f"layer_norm: {x.shape[1]} channels vs gamma length {p.gamma.shape[0]}"
        )
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.epsilon)
    xhat = centered * inv_std
    out = xhat * p.gamma.reshape(1, -1, 1, 1) + p.beta.reshape(1, -1, 1, 1)
    return out, (xhat, inv_std, p.gamma)


def layer_norm2d_backward(cache, grad_out: np.ndarray):
    xhat, inv_std, gamma = cache
    c = xhat.shape[1]
    g = grad_out * gamma.reshape(1, -1, 1, 1)
    # standard layernorm adjoint over the channel axis
    gsum = g.sum(axis=1, keepdims=True)
    gxhat_sum = (g * xhat).sum(axis=1, keepdims=True)
    grad_x = inv_std * (g - gsum / c - xhat * gxhat_sum / c)
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Squeeze-excitation channel attention


@dataclass
class ChannelAttentionParams:
    reduce_w: np.ndarray  # (C/r, C)
    reduce_b: np.ndarray  # (C/r,)
    expand_w: np.ndarray  # (C, C/r)
    expand_b: np.ndarray  # (C,)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def channel_attention(x: np.ndarray, p: ChannelAttentionParams):
    """Rescale channels by a sigmoid gate of globally pooled statistics."""
    require_nchw(x, "channel_attention input")
    pooled = x.mean(axis=(2, 3))  # (n, C)
    hidden_pre = pooled @ p.reduce_w.T + p.reduce_b
    hidden = np.maximum(hidden_pre, 0.0)
    logits = hidden @ p.expand_w.T + p.expand_b
    s = _sigmoid(logits)
    out = x * s[:, :, None, None]
    return out, (x, pooled, hidden_pre, hidden, s, p)


def channel_attention_backward(cache, grad_out: np.ndarray):
    x, pooled, hidden_pre, hidden, s, p = cache
    _, _, h, w = x.shape
    grad_x_direct = grad_out * s[:, :, None, None]
    grad_s = (grad_out * x).sum(axis=(2, 3))  # (n, C)
    grad_logits = grad_s * s * (1.0 - s)
    grad_expand_w = grad_logits.T @ hidden
    grad_expand_b = grad_logits.sum(axis=0)
    grad_hidden = (grad_logits @ p.expand_w) * (hidden_pre > 0)
    grad_reduce_w = grad_hidden.T @ pooled
    grad_reduce_b = grad_hidden.sum(axis=0)
    grad_pooled = grad_hidden @ p.reduce_w  # (n, C)
    grad_x = grad_x_direct + grad_pooled[:, :, None, None] / (h * w)
    return grad_x, grad_reduce_w, grad_reduce_b, grad_expand_w, grad_expand_b


# ---------------------------------------------------------------------------
# Pixel shuffle / unshuffle


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(n, c, h, w) -> (n, c/r^2, h*r, w*r) with sub-pixel interleaving."""
    require_nchw(x, "pixel_shuffle input")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by r^2={r * r}")
    x = x.reshape(n, c // (r * r), r, r, h, w)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(x.reshape(n, c // (r * r), h * r, w * r))


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of pixel_shuffle."""
    require_nchw(x, "pixel_unshuffle input")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial {h}x{w} not divisible by r={r}")
    x = x.reshape(n, c, h // r, r, w // r, r)
    x = x.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(n, c * r * r, h // r, w // r))


# ---------------------------------------------------------------------------
# SimpleGate feed-forward block


@dataclass
class FfnParams:
    norm: LayerNormParams
    expand_w: np.ndarray  # (2eC, C, 1, 1)
    expand_b: np.ndarray
    project_w: np.ndarray  # (C, eC, 1, 1)
    project_b: np.ndarray


def _conv1x1(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c, h, w_ = x.shape
    out = np.matmul(w.reshape(w.shape[0], c), x.reshape(n, c, h * w_))
    return out.reshape(n, -1, h, w_) + b.reshape(1, -1, 1, 1)


def _conv1x1_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    n, c, h, w_ = x.shape
    co = grad_out.shape[1]
    go = grad_out.reshape(n, co, h * w_)
    xf = x.reshape(n, c, h * w_)
    grad_w = np.matmul(go, xf.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = np.matmul(w.reshape(co, c).T, go).reshape(x.shape)
    return grad_x, grad_w, grad_b


def ffn_block(x: np.ndarray, p: FfnParams):
    """Residual FFN: x + project(simple_gate(expand(layer_norm(x))))."""
    xn, ln_cache = layer_norm2d(x, p.norm)
    expanded = _conv1x1(xn, p.expand_w, p.expand_b)
    gated, sg_cache = simple_gate(expanded)
    out = x + _conv1x1(gated, p.project_w, p.project_b)
    return out, (xn, ln_cache, expanded, sg_cache, gated, p)


def ffn_block_backward(cache, grad_out: np.ndarray):
    xn, ln_cache, expanded, sg_cache, gated, p = cache
    require_same_shape(grad_out, xn, "ffn_block_backward")
    grad_gated, grad_pw, grad_pb = _conv1x1_backward(gated, p.project_w, grad_out)
    grad_expanded = simple_gate_backward(sg_cache, grad_gated)
    grad_xn, grad_ew, grad_eb = _conv1x1_backward(xn, p.expand_w, grad_expanded)
    grad_x, grad_gamma, grad_beta = layer_norm2d_backward(ln_cache, grad_xn)
    grads = FfnParams(
        norm=LayerNormParams(grad_gamma, grad_beta, p.norm.epsilon),
        expand_w=grad_ew,
        expand_b=grad_eb,
        project_w=grad_pw,
        project_b=grad_pb,
    )
    return grad_out + grad_x, grads

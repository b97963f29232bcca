"""Multi-axis feature fusion block.

Layer norm feeds three parallel branches -- a 3x3 depthwise convolution
(spatially invariant), squeeze-excitation channel attention, and the
kernel-basis-attention operator (pixel adaptive).  Enabled branch outputs
are fused by elementwise product (which doubles as the block's
non-linearity), projected by a 1x1 convolution, and added residually.

The 1x1 output projection is zero-initialized so a freshly built block is
the identity map; branches can be masked off individually for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kba as kba_mod
from .errors import ConfigError
from .nnops import (
    ChannelAttentionParams,
    LayerNormParams,
    _conv1x1,
    _conv1x1_backward,
    channel_attention,
    channel_attention_backward,
    layer_norm2d,
    layer_norm2d_backward,
)
from .tensor import ConvSpec, conv2d_backward, conv2d_forward


@dataclass(frozen=True)
class BranchMask:
    dw: bool = True
    ca: bool = True
    kba: bool = True

    def __post_init__(self):
        if not (self.dw or self.ca or self.kba):
            raise ConfigError("MFF block needs at least one enabled branch")


@dataclass
class MffParams:
    norm: LayerNormParams
    dw_w: np.ndarray  # (C, 1, 3, 3) depthwise
    dw_b: np.ndarray
    ca: ChannelAttentionParams
    kba: kba_mod.KbaParams
    proj_w: np.ndarray  # (C, C, 1, 1)
    proj_b: np.ndarray
    mask: BranchMask = field(default_factory=BranchMask)


def init_mff_params(
    c: int,
    n_bases: int,
    k: int,
    rng: np.random.Generator,
    normalize: str = "none",
    mask: BranchMask = BranchMask(),
    ca_reduction: int = 4,
    dtype=np.float32,
) -> MffParams:
    if c % ca_reduction:
        raise ConfigError(
            f"channel attention needs C % r == 0, got C={c}, r={ca_reduction}"
        )

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    cr = c // ca_reduction
    return MffParams(
        norm=LayerNormParams(
            gamma=np.ones(c, dtype=dtype), beta=np.zeros(c, dtype=dtype)
        ),
        dw_w=u((c, 1, 3, 3), 9),
        dw_b=np.zeros(c, dtype=dtype),
        ca=ChannelAttentionParams(
            reduce_w=u((cr, c), c),
            reduce_b=np.zeros(cr, dtype=dtype),
            expand_w=u((c, cr), cr),
            expand_b=np.zeros(c, dtype=dtype),
        ),
        kba=kba_mod.init_kba_params(c, n_bases, k, rng, normalize, dtype),
        proj_w=np.zeros((c, c, 1, 1), dtype=dtype),
        proj_b=np.zeros(c, dtype=dtype),
        mask=mask,
    )


def _dw_spec(c: int) -> ConvSpec:
    return ConvSpec(out_channels=c, in_channels=c, kernel_size=3, groups=c)


def mff_forward(x: np.ndarray, p: MffParams, capture_coeffs: bool = False):
    """Returns (out, cache); ``capture_coeffs`` additionally records the
    KBA fusion-coefficient map in the cache (for visualization)."""
    c = x.shape[1]
    xn, ln_cache = layer_norm2d(x, p.norm)
    branches = []  # product is formed in fixed order: dw, ca, kba
    dw_out = ca_out = kba_out = None
    ca_cache = kba_cache = None
    if p.mask.dw:
        dw_out = conv2d_forward(xn, p.dw_w, p.dw_b, _dw_spec(c))
        branches.append(dw_out)
    if p.mask.ca:
        ca_out, ca_cache = channel_attention(xn, p.ca)
        branches.append(ca_out)
    if p.mask.kba:
        kba_out, kba_cache = kba_mod.kba_forward(xn, p.kba)
        branches.append(kba_out)
    fused = branches[0]
    for b in branches[1:]:
        fused = fused * b
    out = x + _conv1x1(fused, p.proj_w, p.proj_b)
    coeffs = kba_cache[1] if (capture_coeffs and kba_cache is not None) else None
    cache = (x, xn, ln_cache, dw_out, ca_cache, ca_out, kba_cache, kba_out, fused, p)
    return (out, cache, coeffs) if capture_coeffs else (out, cache)


def _zeros_like_params(p: MffParams) -> MffParams:
    z = lambda a: np.zeros_like(a)
    return MffParams(
        norm=LayerNormParams(z(p.norm.gamma), z(p.norm.beta), p.norm.epsilon),
        dw_w=z(p.dw_w),
        dw_b=z(p.dw_b),
        ca=ChannelAttentionParams(
            z(p.ca.reduce_w), z(p.ca.reduce_b), z(p.ca.expand_w), z(p.ca.expand_b)
        ),
        kba=kba_mod.KbaParams(
            z(p.kba.bases),
            z(p.kba.coeff1_w),
            z(p.kba.coeff1_b),
            z(p.kba.coeff2_w),
            z(p.kba.coeff2_b),
            z(p.kba.ft_w),
            z(p.kba.ft_b),
            p.kba.normalize,
        ),
        proj_w=z(p.proj_w),
        proj_b=z(p.proj_b),
        mask=p.mask,
    )


def mff_backward(cache, grad_out: np.ndarray):
    x, xn, ln_cache, dw_out, ca_cache, ca_out, kba_cache, kba_out, fused, p = cache
    c = x.shape[1]
    grads = _zeros_like_params(p)

    grad_fused, grads.proj_w, grads.proj_b = _conv1x1_backward(
        fused, p.proj_w, grad_out
    )

    # product rule: grad of each branch is grad_fused times the others
    outs = [o for o in (dw_out, ca_out, kba_out) if o is not None]
    grad_xn = np.zeros_like(xn)

    def others_product(skip):
        prod = None
        for o in outs:
            if o is skip:
                continue
            prod = o if prod is None else prod * o
        return prod if prod is not None else np.ones_like(grad_fused)

    if p.mask.dw:
        g_dw = grad_fused * others_product(dw_out)
        gx, grads.dw_w, grads.dw_b = conv2d_backward(xn, p.dw_w, g_dw, _dw_spec(c))
        grad_xn += gx
    if p.mask.ca:
        g_ca = grad_fused * others_product(ca_out)
        gx, grw, grb, gew, geb = channel_attention_backward(ca_cache, g_ca)
        grads.ca = ChannelAttentionParams(grw, grb, gew, geb)
        grad_xn += gx
    if p.mask.kba:
        g_kba = grad_fused * others_product(kba_out)
        gx, grads.kba = kba_mod.kba_backward(kba_cache, g_kba)
        grad_xn += gx

    gx, grads.norm.gamma, grads.norm.beta = layer_norm2d_backward(ln_cache, grad_xn)
    return grad_out + gx, grads

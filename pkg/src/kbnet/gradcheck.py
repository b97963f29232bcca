"""Finite-difference verification of every analytic backward pass.

Central differences in double precision against the scalar objective
L = sum(forward(...) * R) for a fixed random R.  Large tensors are probed
at a deterministic random sample of entries; relative error is
|analytic - fd| / max(|analytic|, |fd|, 1e-8).
"""

from __future__ import annotations

import numpy as np

from . import kba as kba_mod
from . import mff as mff_mod
from . import net as net_mod
from .errors import ConfigError
from .nnops import (
    channel_attention,
    channel_attention_backward,
    ffn_block,
    ffn_block_backward,
    layer_norm2d,
    layer_norm2d_backward,
    simple_gate,
    simple_gate_backward,
)

COMPONENTS = (
    "simple_gate",
    "layer_norm",
    "channel_attention",
    "ffn",
    "kba",
    "mff",
    "net",
)

DEFAULT_EPS = 1e-4


def rel_err(a: float, f: float) -> float:
    return abs(a - f) / max(abs(a), abs(f), 1e-8)


def _probe(obj_fn, tensors, rng, eps, max_samples):
    report = {}
    for name, arr, grad in tensors:
        if arr.size <= max_samples:
            idxs = np.arange(arr.size)
        else:
            idxs = np.sort(rng.choice(arr.size, size=max_samples, replace=False))
        worst = 0.0
        for flat in idxs:
            orig = arr.flat[flat]
            arr.flat[flat] = orig + eps
            f1 = obj_fn()
            arr.flat[flat] = orig - eps
            f2 = obj_fn()
            arr.flat[flat] = orig
            fd = (f1 - f2) / (2.0 * eps)
            worst = max(worst, rel_err(float(grad.flat[flat]), fd))
        report[name] = worst
    return report


def _named_grad_tensors(prefix, params_named, grads_named):
    gmap = dict(grads_named)
    return [(f"{prefix}{n}", a, gmap[n]) for n, a in params_named]


def _check_simple_gate(rng, eps, max_samples):
    x = rng.standard_normal((1, 8, 4, 4))
    r = rng.standard_normal((1, 4, 4, 4))

    def obj():
        out, _ = simple_gate(x)
        return float(np.sum(out * r))

    _, cache = simple_gate(x)
    gx = simple_gate_backward(cache, r)
    return _probe(obj, [("input", x, gx)], rng, eps, max_samples)


def _check_layer_norm(rng, eps, max_samples):
    from .nnops import LayerNormParams

    x = rng.standard_normal((2, 6, 3, 3))
    p = LayerNormParams(rng.standard_normal(6), rng.standard_normal(6))
    r = rng.standard_normal(x.shape)

    def obj():
        out, _ = layer_norm2d(x, p)
        return float(np.sum(out * r))

    _, cache = layer_norm2d(x, p)
    gx, gg, gb = layer_norm2d_backward(cache, r)
    tensors = [("input", x, gx), ("gamma", p.gamma, gg), ("beta", p.beta, gb)]
    return _probe(obj, tensors, rng, eps, max_samples)


def _check_channel_attention(rng, eps, max_samples):
    from .nnops import ChannelAttentionParams

    c, red = 8, 2
    x = rng.standard_normal((1, c, 4, 4))
    p = ChannelAttentionParams(
        rng.standard_normal((red, c)) * 0.5,
        rng.standard_normal(red) * 0.1,
        rng.standard_normal((c, red)) * 0.5,
        rng.standard_normal(c) * 0.1,
    )
    r = rng.standard_normal(x.shape)

    def obj():
        out, _ = channel_attention(x, p)
        return float(np.sum(out * r))

    _, cache = channel_attention(x, p)
    gx, grw, grb, gew, geb = channel_attention_backward(cache, r)
    tensors = [
        ("input", x, gx),
        ("reduce_w", p.reduce_w, grw),
        ("reduce_b", p.reduce_b, grb),
        ("expand_w", p.expand_w, gew),
        ("expand_b", p.expand_b, geb),
    ]
    return _probe(obj, tensors, rng, eps, max_samples)


def _check_ffn(rng, eps, max_samples):
    c = 8
    x = rng.standard_normal((1, c, 6, 6))
    p = net_mod._init_ffn(c, 2, rng, np.float64)
    r = rng.standard_normal(x.shape)

    def obj():
        out, _ = ffn_block(x, p)
        return float(np.sum(out * r))

    _, cache = ffn_block(x, p)
    gx, grads = ffn_block_backward(cache, r)
    tensors = [("input", x, gx)] + _named_grad_tensors(
        "", net_mod._named_ffn("ffn", p), net_mod._named_ffn("ffn", grads)
    )
    return _probe(obj, tensors, rng, eps, max_samples)


def _check_kba(rng, eps, max_samples):
    report = {}
    for mode in ("none", "softmax"):
        c, n, k = 8, 4, 3
        x = rng.standard_normal((1, c, 5, 5))
        p = kba_mod.init_kba_params(c, n, k, rng, normalize=mode, dtype=np.float64)
        # scale the near-zero coefficient head up so its gradients are probed
        # at a meaningful magnitude
        p.coeff2_w = rng.standard_normal(p.coeff2_w.shape) * 0.3
        r = rng.standard_normal(x.shape)

        def obj():
            out, _ = kba_mod.kba_forward(x, p)
            return float(np.sum(out * r))

        _, cache = kba_mod.kba_forward(x, p)
        gx, grads = kba_mod.kba_backward(cache, r)
        tensors = [
            (f"{mode}.input", x, gx),
            (f"{mode}.bases", p.bases, grads.bases),
            (f"{mode}.coeff1_w", p.coeff1_w, grads.coeff1_w),
            (f"{mode}.coeff1_b", p.coeff1_b, grads.coeff1_b),
            (f"{mode}.coeff2_w", p.coeff2_w, grads.coeff2_w),
            (f"{mode}.coeff2_b", p.coeff2_b, grads.coeff2_b),
            (f"{mode}.ft_w", p.ft_w, grads.ft_w),
            (f"{mode}.ft_b", p.ft_b, grads.ft_b),
        ]
        report.update(_probe(obj, tensors, rng, eps, max_samples))
    return report


def _check_mff(rng, eps, max_samples):
    c, n, k = 8, 4, 3
    x = rng.standard_normal((1, c, 6, 6))
    p = mff_mod.init_mff_params(c, n, k, rng, dtype=np.float64)
    # the projection is zero at init, which would make every branch gradient
    # trivially zero; randomize it for a meaningful check
    p.proj_w = rng.standard_normal(p.proj_w.shape) * 0.3
    p.proj_b = rng.standard_normal(p.proj_b.shape) * 0.1
    p.kba.coeff2_w = rng.standard_normal(p.kba.coeff2_w.shape) * 0.3
    r = rng.standard_normal(x.shape)

    def obj():
        out, _ = mff_mod.mff_forward(x, p)
        return float(np.sum(out * r))

    _, cache = mff_mod.mff_forward(x, p)
    gx, grads = mff_mod.mff_backward(cache, r)
    tensors = [("input", x, gx)] + _named_grad_tensors(
        "", net_mod._named_mff("mff", p), net_mod._named_mff("mff", grads)
    )
    return _probe(obj, tensors, rng, eps, max_samples)


def tiny_net_config() -> net_mod.NetConfig:
    return net_mod.NetConfig(
        base_width=8,
        encoder_blocks=(1, 1, 1, 1),
        decoder_blocks=(1, 1, 1, 1),
        n_bases=4,
    )


def _check_net(rng, eps, max_samples):
    cfg = tiny_net_config()
    params = net_mod.build(cfg, seed=7, dtype=np.float64)
    # zero-initialized projections block gradient flow; randomize them
    for name, arr in net_mod.named_params(params):
        if ".proj." in name or name.startswith("tail."):
            arr[...] = rng.standard_normal(arr.shape) * 0.2
        if name.endswith("kba.coeff2_w"):
            arr[...] = rng.standard_normal(arr.shape) * 0.3
    x = rng.standard_normal((1, 3, 16, 16))
    r = rng.standard_normal(x.shape)

    def obj():
        out, _ = net_mod.forward(x, params, cfg)
        return float(np.sum(out * r))

    _, cache = net_mod.forward(x, params, cfg)
    gx, grads = net_mod.backward(cache, params, cfg, r)
    tensors = [("input", x, gx)] + _named_grad_tensors(
        "", net_mod.named_params(params), net_mod.named_params(grads)
    )
    # probing every tensor of the full net is slow; probe a deterministic
    # subset of tensors plus the input
    keep = [tensors[0]]
    step = max(1, len(tensors) // 40)
    keep += tensors[1::step]
    return _probe(obj, keep, rng, eps, max_samples)


_CHECKS = {
    "simple_gate": _check_simple_gate,
    "layer_norm": _check_layer_norm,
    "channel_attention": _check_channel_attention,
    "ffn": _check_ffn,
    "kba": _check_kba,
    "mff": _check_mff,
    "net": _check_net,
}


def grad_check(
    component: str,
    seed: int = 0,
    eps: float = DEFAULT_EPS,
    max_samples: int = 6,
) -> dict[str, float]:
    """Run the FD suite for one component; returns {tensor name: max rel err}."""
    if component not in _CHECKS:
        raise ConfigError(
            f"unknown component {component!r}; choose from {COMPONENTS}"
        )
    rng = np.random.default_rng(seed)
    return _CHECKS[component](rng, eps, max_samples)


def grad_check_all(seed: int = 0, eps: float = DEFAULT_EPS, max_samples: int = 6):
    return {c: grad_check(c, seed, eps, max_samples) for c in COMPONENTS}

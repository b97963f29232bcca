"""Kernel basis attention: per-pixel fusion of learnable kernel bases.

A bank of N grouped-convolution kernels (4 input channels per group) is
shared across all pixels.  A lightweight branch predicts an N-vector of
fusion coefficients at every pixel; the bases are blended with those
coefficients into a per-pixel kernel which aggregates the K x K
neighborhood of a 1x1-transformed feature map.

Because convolution is linear in its kernel, the per-pixel operation can
be evaluated two ways that agree exactly:

  * ``fuse_kernels``  - blend the bases at each pixel, then convolve
    (routed through the selected backend, see kbnet.backend);
  * ``fuse_outputs``  - convolve with each basis once, then blend the N
    static outputs per pixel (the default: it reuses the fast static
    convolution).

``kba_oracle`` is the literal per-pixel reference used by the
equivalence suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import backend
from .errors import ConfigError
from .nnops import _conv1x1, _conv1x1_backward, simple_gate, simple_gate_backward
from .tensor import ConvSpec, conv2d_backward, conv2d_forward


@dataclass
class KbaParams:
    bases: np.ndarray  # (N, C, 4, K, K)
    coeff1_w: np.ndarray  # (N, C/N, 3, 3), groups=N
    coeff1_b: np.ndarray  # (N,)
    coeff2_w: np.ndarray  # (N, N/2, 3, 3)
    coeff2_b: np.ndarray  # (N,)
    ft_w: np.ndarray  # (C, C, 1, 1) feature transform producing X_e
    ft_b: np.ndarray  # (C,)
    normalize: str = "none"  # {"none", "softmax"}

    @property
    def n_bases(self) -> int:
        return self.bases.shape[0]

    @property
    def channels(self) -> int:
        return self.bases.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.bases.shape[3]


def validate_kba_config(c: int, n_bases: int, k: int) -> None:
    if c % 4:
        raise ConfigError(f"KBA needs channels divisible by 4, got C={c}")
    if c % n_bases:
        raise ConfigError(
            f"KBA coefficient branch needs C % N == 0, got C={c}, N={n_bases}"
        )
    if n_bases % 2:
        raise ConfigError(f"KBA needs an even basis count, got N={n_bases}")
    if k % 2 == 0:
        raise ConfigError(f"KBA kernel size must be odd, got K={k}")


def init_kba_params(
    c: int,
    n_bases: int,
    k: int,
    rng: np.random.Generator,
    normalize: str = "none",
    dtype=np.float32,
) -> KbaParams:
    """Fan-in scaled init; the coefficient head starts near zero so the
    module begins close to "no dynamic aggregation"."""
    validate_kba_config(c, n_bases, k)
    if normalize not in ("none", "softmax"):
        raise ConfigError(f"unknown normalize mode {normalize!r}")

    def u(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    bases = u((n_bases, c, 4, k, k), 4 * k * k) / np.sqrt(n_bases)
    return KbaParams(
        bases=bases.astype(dtype),
        coeff1_w=u((n_bases, c // n_bases, 3, 3), (c // n_bases) * 9),
        coeff1_b=np.zeros(n_bases, dtype=dtype),
        coeff2_w=(0.01 * rng.standard_normal((n_bases, n_bases // 2, 3, 3))).astype(
            dtype
        ),
        coeff2_b=np.zeros(n_bases, dtype=dtype),
        ft_w=u((c, c, 1, 1), c),
        ft_b=np.zeros(c, dtype=dtype),
        normalize=normalize,
    )


def _coeff_specs(p: KbaParams) -> tuple[ConvSpec, ConvSpec]:
    c, n = p.channels, p.n_bases
    return (
        ConvSpec(out_channels=n, in_channels=c, kernel_size=3, groups=n),
        ConvSpec(out_channels=n, in_channels=n // 2, kernel_size=3),
    )


def _basis_spec(p: KbaParams) -> ConvSpec:
    c = p.channels
    return ConvSpec(
        out_channels=c, in_channels=c, kernel_size=p.kernel_size, groups=c // 4
    )


def predict_coefficients(x: np.ndarray, p: KbaParams):
    """Two-layer coefficient branch with SimpleGate in between; optional
    per-pixel softmax over the basis axis."""
    spec1, spec2 = _coeff_specs(p)
    c1 = conv2d_forward(x, p.coeff1_w, p.coeff1_b, spec1)
    gated, sg_cache = simple_gate(c1)
    logits = conv2d_forward(gated, p.coeff2_w, p.coeff2_b, spec2)
    if p.normalize == "softmax":
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        coeffs = e / e.sum(axis=1, keepdims=True)
    else:
        coeffs = logits
    return coeffs, (x, sg_cache, gated, coeffs)


def _predict_coefficients_backward(cache, p: KbaParams, grad_f: np.ndarray):
    x, sg_cache, gated, coeffs = cache
    spec1, spec2 = _coeff_specs(p)
    if p.normalize == "softmax":
        inner = (grad_f * coeffs).sum(axis=1, keepdims=True)
        grad_logits = coeffs * (grad_f - inner)
    else:
        grad_logits = grad_f
    grad_gated, g_w2, g_b2 = conv2d_backward(gated, p.coeff2_w, grad_logits, spec2)
    grad_c1 = simple_gate_backward(sg_cache, grad_gated)
    grad_x, g_w1, g_b1 = conv2d_backward(x, p.coeff1_w, grad_c1, spec1)
    return grad_x, g_w1, g_b1, g_w2, g_b2


def fuse_kernels_at(
    coeffs: np.ndarray, bases: np.ndarray, i: int, j: int, b: int = 0
) -> np.ndarray:
    """Materialize the fused kernel M at one pixel: (C, 4, K, K)."""
    return np.einsum("t,tcuk...->cuk...", coeffs[b, :, i, j], bases)


def aggregate_oracle(
    xe: np.ndarray, bases: np.ndarray, coeffs: np.ndarray
) -> np.ndarray:
    """Literal per-pixel reference: fuse bases at each pixel, then take the
    grouped dot product over the zero-padded neighborhood.  Slow; ground
    truth for the equivalence suite."""
    b, c, h, w = xe.shape
    k = bases.shape[3]
    pad = k // 2
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=xe.dtype)
    xp[:, :, pad : pad + h, pad : pad + w] = xe
    out = np.zeros_like(xe)
    for bi in range(b):
        for i in range(h):
            for j in range(w):
                m = fuse_kernels_at(coeffs, bases, i, j, bi)
                patch = xp[bi, :, i : i + k, j : j + k]
                for ci in range(c):
                    grp = ci // 4
                    out[bi, ci, i, j] = np.sum(
                        m[ci] * patch[4 * grp : 4 * grp + 4]
                    )
    return out


def aggregate_fuse_outputs(
    xe: np.ndarray, bases: np.ndarray, coeffs: np.ndarray
) -> np.ndarray:
    """Static conv per basis, then per-pixel blending of the N outputs."""
    c = xe.shape[1]
    k = bases.shape[3]
    spec = ConvSpec(out_channels=c, in_channels=c, kernel_size=k, groups=c // 4)
    basis_outs = np.stack(
        [conv2d_forward(xe, bases[t], None, spec) for t in range(bases.shape[0])]
    )
    return np.einsum("bnhw,nbchw->bchw", coeffs, basis_outs)


def aggregate_fuse_kernels(
    xe: np.ndarray, bases: np.ndarray, coeffs: np.ndarray
) -> np.ndarray:
    """Per-pixel kernel materialization, routed through the active backend."""
    return backend.fused_conv_forward(xe, bases, coeffs)


def kba_oracle(x: np.ndarray, p: KbaParams) -> np.ndarray:
    coeffs, _ = predict_coefficients(x, p)
    xe = _conv1x1(x, p.ft_w, p.ft_b)
    return aggregate_oracle(xe, p.bases, coeffs)


def _combined_basis_conv(p: KbaParams) -> tuple[np.ndarray, ConvSpec]:
    """Fold the N bases into one grouped conv so the im2col work over X_e
    is shared: output channels are ordered (group, basis, within-group)."""
    n, c, _, k, _ = p.bases.shape
    g = c // 4
    w = p.bases.reshape(n, g, 4, 4, k, k).transpose(1, 0, 2, 3, 4, 5)
    spec = ConvSpec(out_channels=n * c, in_channels=c, kernel_size=k, groups=g)
    return np.ascontiguousarray(w.reshape(n * c, 4, k, k)), spec


def kba_forward(x: np.ndarray, p: KbaParams, path: str = "fuse_outputs"):
    """Fast paths; both agree with kba_oracle up to roundoff."""
    coeffs, coeff_cache = predict_coefficients(x, p)
    xe = _conv1x1(x, p.ft_w, p.ft_b)
    if path == "fuse_outputs":
        n, c = p.n_bases, p.channels
        b, _, h, w = xe.shape
        w_comb, spec = _combined_basis_conv(p)
        y = conv2d_forward(xe, w_comb, None, spec)
        basis_outs = np.ascontiguousarray(
            y.reshape(b, c // 4, n, 4, h, w).transpose(2, 0, 1, 3, 4, 5)
        ).reshape(n, b, c, h, w)
        out = np.einsum("bnhw,nbchw->bchw", coeffs, basis_outs)
    elif path == "fuse_kernels":
        basis_outs = None
        out = backend.fused_conv_forward(xe, p.bases, coeffs)
    else:
        raise ConfigError(f"unknown KBA path {path!r}")
    return out, (x, coeffs, coeff_cache, xe, basis_outs, p, path)


def kba_backward(cache, grad_out: np.ndarray):
    x, coeffs, coeff_cache, xe, basis_outs, p, path = cache
    if path == "fuse_outputs":
        n, c = p.n_bases, p.channels
        b, _, h, w = xe.shape
        k = p.kernel_size
        grad_f = np.einsum("bchw,nbchw->bnhw", grad_out, basis_outs)
        gy = coeffs[:, :, None] * grad_out[:, None]  # (b, N, C, h, w)
        gy = np.ascontiguousarray(
            gy.reshape(b, n, c // 4, 4, h, w).transpose(0, 2, 1, 3, 4, 5)
        ).reshape(b, n * c, h, w)
        w_comb, spec = _combined_basis_conv(p)
        grad_xe, gw_comb, _ = conv2d_backward(xe, w_comb, gy, spec)
        grad_bases = np.ascontiguousarray(
            gw_comb.reshape(c // 4, n, 4, 4, k, k).transpose(1, 0, 2, 3, 4, 5)
        ).reshape(p.bases.shape)
    else:
        grad_xe, grad_bases, grad_f = backend.fused_conv_backward(
            xe, p.bases, coeffs, grad_out
        )

    grad_x_ft, g_ftw, g_ftb = _conv1x1_backward(x, p.ft_w, grad_xe)
    grad_x_coeff, g_w1, g_b1, g_w2, g_b2 = _predict_coefficients_backward(
        coeff_cache, p, grad_f
    )
    grads = KbaParams(
        bases=grad_bases,
        coeff1_w=g_w1,
        coeff1_b=g_b1,
        coeff2_w=g_w2,
        coeff2_b=g_b2,
        ft_w=g_ftw,
        ft_b=g_ftb,
        normalize=p.normalize,
    )
    return grad_x_ft + grad_x_coeff, grads


def with_normalize(p: KbaParams, mode: str) -> KbaParams:
    return replace(p, normalize=mode)


def equivalence_sweep(trials: int = 50, seed: int = 0):
    """Randomized sweep comparing the oracle against both fast paths.

    Configurations are drawn from N in {1,2,4,8}, C in {4,8,16},
    K in {1,3,5}, spatial sizes up to 16x16, in double precision.  The
    aggregation core is always compared; when the coefficient branch is
    buildable (N even, C % N == 0) the full module is compared as well.
    Returns a list of per-trial dicts with the max elementwise deviations.
    """
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(trials):
        n = int(rng.choice([1, 2, 4, 8]))
        c = int(rng.choice([4, 8, 16]))
        k = int(rng.choice([1, 3, 5]))
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        b = int(rng.integers(1, 3))
        xe = rng.standard_normal((b, c, h, w))
        bases = rng.standard_normal((n, c, 4, k, k))
        coeffs = rng.standard_normal((b, n, h, w))
        ref = aggregate_oracle(xe, bases, coeffs)
        d_kernels = float(np.abs(aggregate_fuse_kernels(xe, bases, coeffs) - ref).max())
        d_outputs = float(np.abs(aggregate_fuse_outputs(xe, bases, coeffs) - ref).max())
        res = {
            "n": n, "c": c, "k": k, "h": h, "w": w, "b": b,
            "fuse_kernels": d_kernels, "fuse_outputs": d_outputs,
        }
        if n % 2 == 0 and c % n == 0:
            mode = "softmax" if rng.integers(2) else "none"
            p = init_kba_params(c, n, k, rng, normalize=mode, dtype=np.float64)
            p.coeff2_w = rng.standard_normal(p.coeff2_w.shape) * 0.3
            x = rng.standard_normal((b, c, h, w))
            full_ref = kba_oracle(x, p)
            for path in ("fuse_kernels", "fuse_outputs"):
                out, _ = kba_forward(x, p, path)
                res[f"module_{path}"] = float(np.abs(out - full_ref).max())
        results.append(res)
    return results

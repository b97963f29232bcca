"""Four-stage encoder/decoder U-Net built from MFF + FFN blocks.

Encoder stage s runs its blocks at width C0 * 2^s, then a 2x2 stride-2
convolution halves the resolution and doubles the channels.  The decoder
mirrors it: a 1x1 convolution doubles the channels, pixel-shuffle trades
them for 2x resolution, the encoder skip is added, and the stage's blocks
run.  Head/tail are 3x3 convolutions; the tail is zero-initialized so a
freshly built network with the global residual enabled is the identity.

Also here: the parameter registry (stable hierarchical names for every
tensor), the reflect-pad helper for arbitrary input sizes, and the
closed-form multiply-accumulate counter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import mff as mff_mod
from .errors import ConfigError, ShapeError
from .kba import validate_kba_config
from .mff import BranchMask, MffParams
from .nnops import (
    FfnParams,
    LayerNormParams,
    _conv1x1,
    _conv1x1_backward,
    ffn_block,
    ffn_block_backward,
    pixel_shuffle,
    pixel_unshuffle,
)
from .tensor import ConvSpec, conv2d_backward, conv2d_forward

N_STAGES = 4
DOWN_FACTOR = 2**N_STAGES  # input H, W must be divisible by this


@dataclass(frozen=True)
class NetConfig:
    # the default width is the smallest one divisible by the default basis
    # count at every stage; desk-scale runs override both (C0=16, N=8)
    base_width: int = 32
    encoder_blocks: tuple[int, ...] = (2, 2, 2, 2)
    decoder_blocks: tuple[int, ...] = (4, 2, 2, 2)
    n_bases: int = 32
    kernel_size: int = 3
    ffn_expansion: int = 2
    normalize_mode: str = "none"
    branch_dw: bool = True
    branch_ca: bool = True
    branch_kba: bool = True
    global_residual: bool = True
    in_channels: int = 3
    out_channels: int = 3

    def mask(self) -> BranchMask:
        return BranchMask(dw=self.branch_dw, ca=self.branch_ca, kba=self.branch_kba)

    def stage_width(self, s: int) -> int:
        return self.base_width * (2**s)

    def validate(self) -> None:
        if len(self.encoder_blocks) != N_STAGES or len(self.decoder_blocks) != N_STAGES:
            raise ConfigError("encoder_blocks and decoder_blocks must have 4 entries")
        if self.normalize_mode not in ("none", "softmax"):
            raise ConfigError(f"unknown normalize_mode {self.normalize_mode!r}")
        self.mask()  # raises if no branch enabled
        for s in range(N_STAGES):
            w = self.stage_width(s)
            if self.branch_kba:
                try:
                    validate_kba_config(w, self.n_bases, self.kernel_size)
                except ConfigError as e:
                    raise ConfigError(f"stage {s} (width {w}): {e}") from e
            elif w % 4:
                raise ConfigError(f"stage {s}: width {w} not divisible by 4")
        if self.global_residual and self.in_channels != self.out_channels:
            raise ConfigError("global residual requires in_channels == out_channels")


@dataclass
class ConvP:
    w: np.ndarray
    b: np.ndarray


@dataclass
class BlockParams:
    mff: MffParams
    ffn: FfnParams


@dataclass
class NetParams:
    head: ConvP
    enc: list  # [stage][block] -> BlockParams
    downs: list  # [stage] -> ConvP
    ups: list  # [stage] -> ConvP (indexed by target stage)
    dec: list  # [stage][block] -> BlockParams
    tail: ConvP


# ---------------------------------------------------------------------------
# Build / registry


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _init_ffn(c: int, e: int, rng, dtype) -> FfnParams:
    return FfnParams(
        norm=LayerNormParams(np.ones(c, dtype=dtype), np.zeros(c, dtype=dtype)),
        expand_w=_uniform(rng, (2 * e * c, c, 1, 1), c, dtype),
        expand_b=np.zeros(2 * e * c, dtype=dtype),
        project_w=_uniform(rng, (c, e * c, 1, 1), e * c, dtype),
        project_b=np.zeros(c, dtype=dtype),
    )


def _init_block(cfg: NetConfig, c: int, rng, dtype) -> BlockParams:
    return BlockParams(
        mff=mff_mod.init_mff_params(
            c,
            cfg.n_bases,
            cfg.kernel_size,
            rng,
            normalize=cfg.normalize_mode,
            mask=cfg.mask(),
            dtype=dtype,
        ),
        ffn=_init_ffn(c, cfg.ffn_expansion, rng, dtype),
    )


def build(cfg: NetConfig, seed: int, dtype=np.float32) -> NetParams:
    """Deterministic initialization: identical (config, seed) pairs yield
    bit-identical parameters."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    c0 = cfg.base_width
    head = ConvP(
        _uniform(rng, (c0, cfg.in_channels, 3, 3), cfg.in_channels * 9, dtype),
        np.zeros(c0, dtype=dtype),
    )
    enc, downs = [], []
    for s in range(N_STAGES):
        c = cfg.stage_width(s)
        enc.append([_init_block(cfg, c, rng, dtype) for _ in range(cfg.encoder_blocks[s])])
        downs.append(
            ConvP(
                _uniform(rng, (2 * c, c, 2, 2), c * 4, dtype),
                np.zeros(2 * c, dtype=dtype),
            )
        )
    ups, dec = [None] * N_STAGES, [None] * N_STAGES
    for s in reversed(range(N_STAGES)):
        c = cfg.stage_width(s)
        ups[s] = ConvP(
            _uniform(rng, (4 * c, 2 * c, 1, 1), 2 * c, dtype),
            np.zeros(4 * c, dtype=dtype),
        )
        dec[s] = [_init_block(cfg, c, rng, dtype) for _ in range(cfg.decoder_blocks[s])]
    tail = ConvP(
        np.zeros((cfg.out_channels, c0, 3, 3), dtype=dtype),
        np.zeros(cfg.out_channels, dtype=dtype),
    )
    return NetParams(head=head, enc=enc, downs=downs, ups=ups, dec=dec, tail=tail)


def _named_mff(prefix: str, p: MffParams):
    yield f"{prefix}.norm.gamma", p.norm.gamma
    yield f"{prefix}.norm.beta", p.norm.beta
    if p.mask.dw:
        yield f"{prefix}.dw.w", p.dw_w
        yield f"{prefix}.dw.b", p.dw_b
    if p.mask.ca:
        yield f"{prefix}.ca.reduce_w", p.ca.reduce_w
        yield f"{prefix}.ca.reduce_b", p.ca.reduce_b
        yield f"{prefix}.ca.expand_w", p.ca.expand_w
        yield f"{prefix}.ca.expand_b", p.ca.expand_b
    if p.mask.kba:
        yield f"{prefix}.kba.bases", p.kba.bases
        yield f"{prefix}.kba.coeff1_w", p.kba.coeff1_w
        yield f"{prefix}.kba.coeff1_b", p.kba.coeff1_b
        yield f"{prefix}.kba.coeff2_w", p.kba.coeff2_w
        yield f"{prefix}.kba.coeff2_b", p.kba.coeff2_b
        yield f"{prefix}.kba.ft_w", p.kba.ft_w
        yield f"{prefix}.kba.ft_b", p.kba.ft_b
    yield f"{prefix}.proj.w", p.proj_w
    yield f"{prefix}.proj.b", p.proj_b


def _named_ffn(prefix: str, p: FfnParams):
    yield f"{prefix}.norm.gamma", p.norm.gamma
    yield f"{prefix}.norm.beta", p.norm.beta
    yield f"{prefix}.expand.w", p.expand_w
    yield f"{prefix}.expand.b", p.expand_b
    yield f"{prefix}.project.w", p.project_w
    yield f"{prefix}.project.b", p.project_b


def named_params(params: NetParams):
    """Enumerate every parameter tensor with a stable hierarchical name."""
    yield "head.w", params.head.w
    yield "head.b", params.head.b
    for s, blocks in enumerate(params.enc):
        for i, bp in enumerate(blocks):
            yield from _named_mff(f"encoder.{s}.block{i}.mff", bp.mff)
            yield from _named_ffn(f"encoder.{s}.block{i}.ffn", bp.ffn)
        yield f"encoder.{s}.down.w", params.downs[s].w
        yield f"encoder.{s}.down.b", params.downs[s].b
    for s in reversed(range(N_STAGES)):
        yield f"decoder.{s}.up.w", params.ups[s].w
        yield f"decoder.{s}.up.b", params.ups[s].b
        for i, bp in enumerate(params.dec[s]):
            yield from _named_mff(f"decoder.{s}.block{i}.mff", bp.mff)
            yield from _named_ffn(f"decoder.{s}.block{i}.ffn", bp.ffn)
    yield "tail.w", params.tail.w
    yield "tail.b", params.tail.b


def param_count(params: NetParams) -> int:
    return sum(a.size for _, a in named_params(params))


# ---------------------------------------------------------------------------
# Forward / backward


def _head_spec(cfg: NetConfig) -> ConvSpec:
    return ConvSpec(cfg.base_width, cfg.in_channels, 3)


def _tail_spec(cfg: NetConfig) -> ConvSpec:
    return ConvSpec(cfg.out_channels, cfg.base_width, 3)


def _down_spec(c: int) -> ConvSpec:
    return ConvSpec(2 * c, c, 2, stride=2, padding=0)


def _block_forward(x, bp: BlockParams, capture_coeffs=False):
    if capture_coeffs:
        y, mff_cache, coeffs = mff_mod.mff_forward(x, bp.mff, capture_coeffs=True)
    else:
        y, mff_cache = mff_mod.mff_forward(x, bp.mff)
        coeffs = None
    out, ffn_cache = ffn_block(y, bp.ffn)
    return out, (mff_cache, ffn_cache), coeffs


def _block_backward(cache, bp: BlockParams, grad):
    mff_cache, ffn_cache = cache
    grad, ffn_grads = ffn_block_backward(ffn_cache, grad)
    grad, mff_grads = mff_mod.mff_backward(mff_cache, grad)
    return grad, BlockParams(mff=mff_grads, ffn=ffn_grads)


def forward(img: np.ndarray, params: NetParams, cfg: NetConfig,
            capture_coeffs: bool = False):
    """Returns (out, cache).  With ``capture_coeffs``, the cache carries the
    fusion-coefficient map of the final MFF block of each encoder stage
    under ``cache['coeffs']``."""
    n, c, h, w = img.shape
    if c != cfg.in_channels:
        raise ShapeError(f"input has {c} channels, config expects {cfg.in_channels}")
    if h % DOWN_FACTOR or w % DOWN_FACTOR:
        raise ShapeError(
            f"input {h}x{w} not divisible by {DOWN_FACTOR}; wrap with pad_crop()"
        )
    cache: dict = {"img": img, "coeffs": []}
    f = conv2d_forward(img, params.head.w, params.head.b, _head_spec(cfg))
    cache["head_in"] = img
    enc_caches, skips, down_ins = [], [], []
    for s in range(N_STAGES):
        stage_caches = []
        n_blocks = len(params.enc[s])
        for i, bp in enumerate(params.enc[s]):
            cap = capture_coeffs and i == n_blocks - 1
            f, bc, coeffs = _block_forward(f, bp, cap)
            stage_caches.append(bc)
            if cap:
                cache["coeffs"].append(coeffs)
        enc_caches.append(stage_caches)
        skips.append(f)
        down_ins.append(f)
        f = conv2d_forward(f, params.downs[s].w, params.downs[s].b,
                           _down_spec(cfg.stage_width(s)))
    dec_caches = [None] * N_STAGES
    up_ins = [None] * N_STAGES
    for s in reversed(range(N_STAGES)):
        up_ins[s] = f
        f = pixel_shuffle(_conv1x1(f, params.ups[s].w, params.ups[s].b), 2)
        f = f + skips[s]
        stage_caches = []
        for bp in params.dec[s]:
            f, bc, _ = _block_forward(f, bp)
            stage_caches.append(bc)
        dec_caches[s] = stage_caches
    cache.update(enc=enc_caches, dec=dec_caches, down_ins=down_ins,
                 up_ins=up_ins, tail_in=f)
    res = conv2d_forward(f, params.tail.w, params.tail.b, _tail_spec(cfg))
    out = img + res if cfg.global_residual else res
    return out, cache


def backward(cache, params: NetParams, cfg: NetConfig, grad_out: np.ndarray):
    """Adjoint of forward; returns (grad_img, NetParams-shaped grads)."""
    img = cache["img"]
    grad_img = grad_out.copy() if cfg.global_residual else np.zeros_like(img)

    g, tail_w, tail_b = conv2d_backward(
        cache["tail_in"], params.tail.w, grad_out, _tail_spec(cfg)
    )
    grads = NetParams(
        head=None,
        enc=[None] * N_STAGES,
        downs=[None] * N_STAGES,
        ups=[None] * N_STAGES,
        dec=[None] * N_STAGES,
        tail=ConvP(tail_w, tail_b),
    )
    skip_grads = [None] * N_STAGES
    for s in range(N_STAGES):
        stage_grads = []
        for bc, bp in zip(reversed(cache["dec"][s]), reversed(params.dec[s])):
            g, bg = _block_backward(bc, bp, g)
            stage_grads.append(bg)
        grads.dec[s] = list(reversed(stage_grads))
        skip_grads[s] = g
        g_shuffled = pixel_unshuffle(g, 2)
        g, up_w, up_b = _conv1x1_backward(cache["up_ins"][s], params.ups[s].w, g_shuffled)
        grads.ups[s] = ConvP(up_w, up_b)
    for s in reversed(range(N_STAGES)):
        gx, dw, db = conv2d_backward(
            cache["down_ins"][s], params.downs[s].w, g, _down_spec(cfg.stage_width(s))
        )
        grads.downs[s] = ConvP(dw, db)
        g = gx + skip_grads[s]
        stage_grads = []
        for bc, bp in zip(reversed(cache["enc"][s]), reversed(params.enc[s])):
            g, bg = _block_backward(bc, bp, g)
            stage_grads.append(bg)
        grads.enc[s] = list(reversed(stage_grads))
    gx, hw, hb = conv2d_backward(img, params.head.w, g, _head_spec(cfg))
    grads.head = ConvP(hw, hb)
    return grad_img + gx, grads


# ---------------------------------------------------------------------------
# Padding for arbitrary input sizes


def pad_crop(img: np.ndarray):
    """Reflect-pad H and W up to the next multiple of 16; returns the padded
    tensor and the record unpad() needs."""
    n, c, h, w = img.shape
    ph = (-h) % DOWN_FACTOR
    pw = (-w) % DOWN_FACTOR
    record = (h, w)
    if ph == 0 and pw == 0:
        return img, record
    mode = "reflect" if min(h, w) > max(ph, pw) else "edge"
    padded = np.pad(img, ((0, 0), (0, 0), (0, ph), (0, pw)), mode=mode)
    return padded, record


def unpad(out: np.ndarray, record) -> np.ndarray:
    h, w = record
    return np.ascontiguousarray(out[:, :, :h, :w])


# ---------------------------------------------------------------------------
# MAC accounting


def _conv_macs(h, w, cout, cin_per_group, k) -> int:
    return h * w * cout * cin_per_group * k * k


def count_macs(cfg: NetConfig, h: int, w: int):
    """Closed-form multiply-accumulate counts, per layer and total.

    Conventions (multiplications only, additions are free):
      static conv            H*W*Cout*(Cin/groups)*K^2
      channel attention      C*(C/r) + (C/r)*C for the two pooled 1x1
                             transforms, plus H*W*C for the gating product
      KBA                    coefficient branch convs + feature transform
                             + N basis applications at H*W*C*4*K^2 each
                             + H*W*C*N for the per-pixel fusion
      branch fusion          H*W*C per elementwise product joining branches
    Layer norms and residual adds are not counted.
    """
    cfg.validate()
    layers: list[tuple[str, int]] = []

    def add(name, macs):
        layers.append((name, int(macs)))

    def block_macs(prefix, c, bh, bw):
        n, k, e = cfg.n_bases, cfg.kernel_size, cfg.ffn_expansion
        n_branches = 0
        if cfg.branch_dw:
            add(f"{prefix}.mff.dw", _conv_macs(bh, bw, c, 1, 3))
            n_branches += 1
        if cfg.branch_ca:
            r = 4
            add(f"{prefix}.mff.ca", c * (c // r) + (c // r) * c + bh * bw * c)
            n_branches += 1
        if cfg.branch_kba:
            kba = (
                _conv_macs(bh, bw, n, c // n, 3)      # coeff1 (grouped)
                + _conv_macs(bh, bw, n, n // 2, 3)    # coeff2
                + _conv_macs(bh, bw, c, c, 1)         # feature transform
                + n * bh * bw * c * 4 * k * k         # basis applications
                + bh * bw * c * n                     # per-pixel fusion
            )
            add(f"{prefix}.mff.kba", kba)
            n_branches += 1
        add(f"{prefix}.mff.fuse", (n_branches - 1) * bh * bw * c)
        add(f"{prefix}.mff.proj", _conv_macs(bh, bw, c, c, 1))
        add(f"{prefix}.ffn.expand", _conv_macs(bh, bw, 2 * e * c, c, 1))
        add(f"{prefix}.ffn.gate", bh * bw * e * c)
        add(f"{prefix}.ffn.project", _conv_macs(bh, bw, c, e * c, 1))

    add("head", _conv_macs(h, w, cfg.base_width, cfg.in_channels, 3))
    for s in range(N_STAGES):
        c = cfg.stage_width(s)
        bh, bw = h >> s, w >> s
        for i in range(cfg.encoder_blocks[s]):
            block_macs(f"encoder.{s}.block{i}", c, bh, bw)
        add(f"encoder.{s}.down", _conv_macs(bh // 2, bw // 2, 2 * c, c, 2))
    for s in reversed(range(N_STAGES)):
        c = cfg.stage_width(s)
        bh, bw = h >> s, w >> s
        add(f"decoder.{s}.up", _conv_macs(bh // 2, bw // 2, 4 * c, 2 * c, 1))
        for i in range(cfg.decoder_blocks[s]):
            block_macs(f"decoder.{s}.block{i}", c, bh, bw)
    add("tail", _conv_macs(h, w, cfg.out_channels, cfg.base_width, 3))
    total = sum(m for _, m in layers)
    return total, layers

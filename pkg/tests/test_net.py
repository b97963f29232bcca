import numpy as np
import pytest

from kbnet import net
from kbnet.errors import ConfigError, ShapeError


def tiny_cfg(**kw):
    base = dict(
        base_width=8,
        encoder_blocks=(1, 1, 1, 1),
        decoder_blocks=(1, 1, 1, 1),
        n_bases=4,
    )
    base.update(kw)
    return net.NetConfig(**base)


def _flatten(params):
    return np.concatenate([a.ravel() for _, a in net.named_params(params)])


def test_build_is_deterministic():
    cfg = net.NetConfig()
    a = net.build(cfg, seed=0)
    b = net.build(cfg, seed=0)
    assert np.array_equal(_flatten(a), _flatten(b))
    c = net.build(cfg, seed=1)
    assert not np.array_equal(_flatten(a), _flatten(c))


def test_build_rejects_width_violating_group_constraint():
    with pytest.raises(ConfigError, match="divisible by 4"):
        net.build(tiny_cfg(base_width=6), seed=0)


def test_build_rejects_bad_basis_count():
    with pytest.raises(ConfigError, match="C % N"):
        net.build(tiny_cfg(base_width=8, n_bases=16), seed=0)


def test_identity_at_init():
    cfg = tiny_cfg()
    params = net.build(cfg, seed=0)
    rng = np.random.default_rng(0)
    img = rng.random((1, 3, 64, 64)).astype(np.float32)
    out, _ = net.forward(img, params, cfg)
    assert np.abs(out - img).max() < 1e-7


@pytest.mark.parametrize("size", [64, 128, 256])
def test_shape_preserved(size):
    cfg = tiny_cfg()
    params = net.build(cfg, seed=0)
    img = np.random.default_rng(1).random((1, 3, size, size)).astype(np.float32)
    out, _ = net.forward(img, params, cfg)
    assert out.shape == img.shape


def test_forward_rejects_unpadded_sizes():
    cfg = tiny_cfg()
    params = net.build(cfg, seed=0)
    with pytest.raises(ShapeError, match="pad_crop"):
        net.forward(np.zeros((1, 3, 60, 64), dtype=np.float32), params, cfg)


def test_pad_crop_arithmetic():
    img = np.random.default_rng(2).random((1, 3, 65, 70)).astype(np.float32)
    padded, rec = net.pad_crop(img)
    assert padded.shape == (1, 3, 80, 80)
    assert np.array_equal(net.unpad(padded, rec), img)
    aligned = np.zeros((1, 3, 64, 64), dtype=np.float32)
    same, rec2 = net.pad_crop(aligned)
    assert same is aligned and rec2 == (64, 64)


def test_pad_crop_constant_image_stays_constant():
    img = np.full((1, 3, 30, 45), 0.25, dtype=np.float32)
    padded, _ = net.pad_crop(img)
    assert np.all(padded == 0.25)


def test_pad_crop_tiny_image():
    img = np.random.default_rng(3).random((1, 3, 5, 5)).astype(np.float32)
    padded, rec = net.pad_crop(img)
    assert padded.shape == (1, 3, 16, 16)
    assert np.array_equal(net.unpad(padded, rec), img)


# ---------------------------------------------------------------------------
# Counting oracles (written as independent walks over the config)


def _oracle_param_count(cfg: net.NetConfig) -> int:
    def kba_params(c):
        n, k = cfg.n_bases, cfg.kernel_size
        return (
            n * c * 4 * k * k
            + n * (c // n) * 9 + n  # coeff conv 1
            + n * (n // 2) * 9 + n  # coeff conv 2
            + c * c + c  # feature transform
        )

    def mff_params(c):
        total = 2 * c  # layer norm
        if cfg.branch_dw:
            total += c * 9 + c
        if cfg.branch_ca:
            r = 4
            total += (c // r) * c + c // r + c * (c // r) + c
        if cfg.branch_kba:
            total += kba_params(c)
        total += c * c + c  # projection
        return total

    def ffn_params(c):
        e = cfg.ffn_expansion
        return 2 * c + (2 * e * c) * c + 2 * e * c + c * (e * c) + c

    def block_params(c):
        return mff_params(c) + ffn_params(c)

    total = cfg.base_width * cfg.in_channels * 9 + cfg.base_width  # head
    for s in range(4):
        c = cfg.base_width * 2**s
        total += cfg.encoder_blocks[s] * block_params(c)
        total += (2 * c) * c * 4 + 2 * c  # down conv
        total += (4 * c) * (2 * c) + 4 * c  # up conv
        total += cfg.decoder_blocks[s] * block_params(c)
    total += cfg.out_channels * cfg.base_width * 9 + cfg.out_channels  # tail
    return total


def _oracle_macs(cfg: net.NetConfig, h: int, w: int) -> int:
    def block(c, bh, bw):
        n, k, e = cfg.n_bases, cfg.kernel_size, cfg.ffn_expansion
        total = 0
        branches = 0
        if cfg.branch_dw:
            total += bh * bw * c * 9
            branches += 1
        if cfg.branch_ca:
            total += c * (c // 4) * 2 + bh * bw * c
            branches += 1
        if cfg.branch_kba:
            total += bh * bw * n * (c // n) * 9  # coeff conv 1
            total += bh * bw * n * (n // 2) * 9  # coeff conv 2
            total += bh * bw * c * c  # feature transform
            total += n * bh * bw * c * 4 * k * k  # basis applications
            total += bh * bw * c * n  # fusion
            branches += 1
        total += (branches - 1) * bh * bw * c  # branch products
        total += bh * bw * c * c  # projection
        total += bh * bw * (2 * e * c) * c  # ffn expand
        total += bh * bw * e * c  # gate
        total += bh * bw * c * (e * c)  # ffn project
        return total

    total = h * w * cfg.base_width * cfg.in_channels * 9
    for s in range(4):
        c = cfg.base_width * 2**s
        bh, bw = h // 2**s, w // 2**s
        total += (cfg.encoder_blocks[s] + cfg.decoder_blocks[s]) * block(c, bh, bw)
        total += (bh // 2) * (bw // 2) * (2 * c) * c * 4  # down
        total += (bh // 2) * (bw // 2) * (4 * c) * (2 * c)  # up
    total += h * w * cfg.out_channels * cfg.base_width * 9
    return total


def test_param_count_matches_oracle():
    for cfg in (
        net.NetConfig(
            base_width=16, encoder_blocks=(1, 1, 1, 1), decoder_blocks=(1, 1, 1, 1),
            n_bases=8,
        ),
        tiny_cfg(),
        net.NetConfig(),
    ):
        params = net.build(cfg, seed=0)
        assert net.param_count(params) == _oracle_param_count(cfg)


def test_mac_closed_form_unit_cases():
    assert net._conv_macs(8, 8, 16, 16, 1) == 16_384  # 1x1 conv, C=16->16
    assert net._conv_macs(8, 8, 16, 1, 3) == 9_216  # depthwise 3x3, C=16


def test_count_macs_matches_oracle():
    pinned = [
        (net.NetConfig(), 256, 256),
        (tiny_cfg(), 64, 64),
        (net.NetConfig(base_width=16, encoder_blocks=(1, 1, 1, 1),
                       decoder_blocks=(1, 1, 1, 1), n_bases=8), 64, 64),
        (net.NetConfig(base_width=32, n_bases=16), 128, 128),
        (tiny_cfg(branch_ca=False), 64, 64),
    ]
    for cfg, h, w in pinned:
        total, layers = net.count_macs(cfg, h, w)
        assert total == sum(m for _, m in layers)  # additive over the registry
        assert total == _oracle_macs(cfg, h, w)


def test_registry_names_are_stable_and_unique():
    cfg = tiny_cfg()
    params = net.build(cfg, seed=0)
    names = [n for n, _ in net.named_params(params)]
    assert len(names) == len(set(names))
    assert names[0] == "head.w" and names[-1] == "tail.b"
    assert "encoder.0.block0.mff.kba.bases" in names
    assert "decoder.3.up.w" in names


def test_encoder_stage_widths():
    cfg = tiny_cfg()
    params = net.build(cfg, seed=0)
    for s in range(4):
        c = cfg.stage_width(s)
        assert params.enc[s][0].mff.dw_w.shape == (c, 1, 3, 3)
        assert params.downs[s].w.shape == (2 * c, c, 2, 2)
        assert params.ups[s].w.shape == (4 * c, 2 * c, 1, 1)


def test_full_net_adjoint_dot_product():
    cfg = tiny_cfg()
    rng = np.random.default_rng(9)
    params = net.build(cfg, seed=9, dtype=np.float64)
    for name, arr in net.named_params(params):
        if ".proj." in name or name.startswith("tail."):
            arr[...] = rng.standard_normal(arr.shape) * 0.2
    x = rng.standard_normal((1, 3, 16, 16))
    y = rng.standard_normal((1, 3, 16, 16))
    out, cache = net.forward(x, params, cfg)
    gx, _ = net.backward(cache, params, cfg, y)
    # the network is nonlinear, so test the adjoint identity through the
    # Jacobian-vector product: <J v, y> == <v, J^T y> via finite differences
    v = rng.standard_normal(x.shape)
    eps = 1e-6
    out_p, _ = net.forward(x + eps * v, params, cfg)
    out_m, _ = net.forward(x - eps * v, params, cfg)
    jv = (out_p - out_m) / (2 * eps)
    lhs = float(np.sum(jv * y))
    rhs = float(np.sum(v * gx))
    assert abs(lhs - rhs) / max(abs(lhs), 1.0) < 1e-5

import numpy as np
import pytest

from kbnet import kba
from kbnet.errors import ConfigError
from kbnet.nnops import _conv1x1
from kbnet.tensor import ConvSpec, conv2d_backward, conv2d_forward


def _params(c=8, n=4, k=3, seed=11, mode="none", live_head=True):
    rng = np.random.default_rng(seed)
    p = kba.init_kba_params(c, n, k, rng, normalize=mode, dtype=np.float64)
    if live_head:
        # the coefficient head starts near zero; give it real magnitude
        p.coeff2_w = rng.standard_normal(p.coeff2_w.shape) * 0.3
    return p


def test_validate_rejects_bad_configs():
    with pytest.raises(ConfigError):
        kba.validate_kba_config(6, 2, 3)  # C % 4
    with pytest.raises(ConfigError):
        kba.validate_kba_config(8, 3, 3)  # N odd
    with pytest.raises(ConfigError):
        kba.validate_kba_config(8, 16, 3)  # C % N
    with pytest.raises(ConfigError):
        kba.validate_kba_config(8, 4, 4)  # even K


def test_zero_weights_give_zero_coefficients():
    p = _params(live_head=False)
    p.coeff1_w[...] = 0.0
    p.coeff2_w[...] = 0.0
    x = np.random.default_rng(0).standard_normal((1, 8, 5, 5))
    coeffs, _ = kba.predict_coefficients(x, p)
    assert not coeffs.any()


def test_zero_weights_softmax_gives_uniform():
    p = _params(mode="softmax", live_head=False)
    p.coeff1_w[...] = 0.0
    p.coeff2_w[...] = 0.0
    x = np.random.default_rng(0).standard_normal((1, 8, 5, 5))
    coeffs, _ = kba.predict_coefficients(x, p)
    assert np.allclose(coeffs, 1.0 / p.n_bases)


def test_softmax_sums_to_one():
    rng = np.random.default_rng(3)
    p = _params(c=16, n=8, mode="softmax", seed=3)
    x = rng.standard_normal((2, 16, 6, 6))
    coeffs, _ = kba.predict_coefficients(x, p)
    sums = coeffs.sum(axis=1)
    assert np.abs(sums - 1.0).max() < 1e-6


def test_none_mode_is_raw_logits():
    rng = np.random.default_rng(4)
    p = _params(seed=4)
    x = rng.standard_normal((1, 8, 6, 6))
    coeffs, _ = kba.predict_coefficients(x, p)
    sums = coeffs.sum(axis=1)
    assert np.abs(sums - 1.0).max() > 1e-3  # unconstrained


def test_coefficient_shape_contract():
    p = _params()
    x = np.zeros((2, 8, 5, 7))
    coeffs, _ = kba.predict_coefficients(x, p)
    assert coeffs.shape == (2, 4, 5, 7)


def test_fuse_kernels_at_one_hot_selection():
    rng = np.random.default_rng(5)
    bases = rng.standard_normal((4, 8, 4, 3, 3))
    coeffs = np.zeros((1, 4, 5, 5))
    coeffs[0, 2, 1, 3] = 1.0
    m = kba.fuse_kernels_at(coeffs, bases, 1, 3)
    assert np.array_equal(m, bases[2])


def test_fuse_kernels_at_zero_and_cancellation():
    rng = np.random.default_rng(6)
    bases = rng.standard_normal((2, 8, 4, 3, 3))
    bases[1] = -bases[0]
    zeros = np.zeros((1, 2, 4, 4))
    assert not kba.fuse_kernels_at(zeros, bases, 0, 0).any()
    halves = np.full((1, 2, 4, 4), 0.5)
    assert np.abs(kba.fuse_kernels_at(halves, bases, 2, 2)).max() < 1e-12


def test_oracle_degenerates_to_static_conv():
    # N=1 with unit coefficients everywhere is a plain grouped conv
    rng = np.random.default_rng(7)
    c = 8
    xe = rng.standard_normal((1, c, 5, 5))
    bases = rng.standard_normal((1, c, 4, 3, 3))
    coeffs = np.ones((1, 1, 5, 5))
    out = kba.aggregate_oracle(xe, bases, coeffs)
    spec = ConvSpec(c, c, 3, groups=c // 4)
    ref = conv2d_forward(xe, bases[0], None, spec)
    assert np.abs(out - ref).max() < 1e-10


def test_oracle_zero_input_annihilates():
    rng = np.random.default_rng(8)
    bases = rng.standard_normal((4, 8, 4, 3, 3))
    coeffs = rng.standard_normal((1, 4, 5, 5))
    out = kba.aggregate_oracle(np.zeros((1, 8, 5, 5)), bases, coeffs)
    assert not out.any()


def test_fast_paths_match_oracle():
    rng = np.random.default_rng(11)
    xe = rng.standard_normal((1, 8, 6, 6))
    bases = rng.standard_normal((4, 8, 4, 3, 3))
    coeffs = rng.standard_normal((1, 4, 6, 6))
    ref = kba.aggregate_oracle(xe, bases, coeffs)
    assert np.abs(kba.aggregate_fuse_kernels(xe, bases, coeffs) - ref).max() < 1e-10
    assert np.abs(kba.aggregate_fuse_outputs(xe, bases, coeffs) - ref).max() < 1e-10


def test_full_module_paths_agree():
    rng = np.random.default_rng(12)
    p = _params(seed=12)
    x = rng.standard_normal((2, 8, 6, 6))
    ref = kba.kba_oracle(x, p)
    for path in ("fuse_kernels", "fuse_outputs"):
        out, _ = kba.kba_forward(x, p, path)
        assert out.shape == x.shape
        assert np.abs(out - ref).max() < 1e-10


def test_zero_coefficient_branch_zeroes_output():
    p = _params(live_head=False)
    p.coeff1_w[...] = 0.0
    p.coeff2_w[...] = 0.0
    x = np.random.default_rng(13).standard_normal((1, 8, 5, 5))
    out, _ = kba.kba_forward(x, p)
    assert not out.any()


def test_fusion_linearity_identity():
    # conv(X_e, sum_t F_t W_t) == sum_t F_t * conv(X_e, W_t), per pixel
    rng = np.random.default_rng(14)
    for _ in range(20):
        n = int(rng.choice([2, 4, 8]))
        c = int(rng.choice([4, 8, 16]))
        k = int(rng.choice([1, 3, 5]))
        h, w = int(rng.integers(3, 10)), int(rng.integers(3, 10))
        xe = rng.standard_normal((1, c, h, w))
        bases = rng.standard_normal((n, c, 4, k, k))
        coeffs = rng.standard_normal((1, n, h, w))
        fused = kba.aggregate_fuse_kernels(xe, bases, coeffs)
        blended = kba.aggregate_fuse_outputs(xe, bases, coeffs)
        assert np.abs(fused - blended).max() < 1e-10


def test_backward_zero_grad():
    p = _params(seed=15)
    x = np.random.default_rng(15).standard_normal((1, 8, 5, 5))
    for path in ("fuse_kernels", "fuse_outputs"):
        _, cache = kba.kba_forward(x, p, path)
        gx, grads = kba.kba_backward(cache, np.zeros_like(x))
        assert not gx.any()
        assert not grads.bases.any() and not grads.ft_w.any()


def test_backward_paths_agree():
    rng = np.random.default_rng(16)
    p = _params(seed=16)
    x = rng.standard_normal((1, 8, 5, 5))
    r = rng.standard_normal(x.shape)
    results = []
    for path in ("fuse_kernels", "fuse_outputs"):
        _, cache = kba.kba_forward(x, p, path)
        results.append(kba.kba_backward(cache, r))
    (gx1, g1), (gx2, g2) = results
    assert np.abs(gx1 - gx2).max() < 1e-9
    assert np.abs(g1.bases - g2.bases).max() < 1e-9
    assert np.abs(g1.coeff2_w - g2.coeff2_w).max() < 1e-9


def test_degenerate_grad_bases_matches_static_conv():
    # with the coefficient branch frozen at F == 1 the basis gradient is the
    # static grouped-conv weight gradient
    rng = np.random.default_rng(17)
    c = 8
    xe = rng.standard_normal((1, c, 5, 5))
    bases = rng.standard_normal((1, c, 4, 3, 3))
    coeffs = np.ones((1, 1, 5, 5))
    r = rng.standard_normal(xe.shape)
    from kbnet import backend

    _, grad_bases, _ = backend.fused_conv_backward(xe, bases, coeffs, r)
    spec = ConvSpec(c, c, 3, groups=c // 4)
    _, gw, _ = conv2d_backward(xe, bases[0], r, spec)
    assert np.abs(grad_bases[0] - gw).max() < 1e-9


def test_basis_permutation_equivariance():
    # permuting the bases and the coefficient-head output channels together
    # leaves the module output unchanged
    rng = np.random.default_rng(18)
    p = _params(seed=18)
    x = rng.standard_normal((1, 8, 5, 5))
    out_ref, _ = kba.kba_forward(x, p)
    perm = rng.permutation(p.n_bases)
    import copy

    q = copy.deepcopy(p)
    q.bases = q.bases[perm]
    q.coeff2_w = q.coeff2_w[perm]
    q.coeff2_b = q.coeff2_b[perm]
    out_perm, _ = kba.kba_forward(x, q)
    assert np.abs(out_ref - out_perm).max() < 1e-10


def test_equivalence_sweep_runs_clean():
    results = kba.equivalence_sweep(trials=10, seed=123)
    assert len(results) == 10
    for r in results:
        assert r["fuse_kernels"] < 1e-10
        assert r["fuse_outputs"] < 1e-10
        for key in ("module_fuse_kernels", "module_fuse_outputs"):
            if key in r:
                assert r[key] < 1e-10


def test_unknown_path_rejected():
    p = _params(seed=19)
    with pytest.raises(ConfigError):
        kba.kba_forward(np.zeros((1, 8, 5, 5)), p, path="nope")


def test_feature_transform_applied_before_aggregation():
    rng = np.random.default_rng(20)
    p = _params(seed=20)
    x = rng.standard_normal((1, 8, 5, 5))
    coeffs, _ = kba.predict_coefficients(x, p)
    xe = _conv1x1(x, p.ft_w, p.ft_b)
    ref = kba.aggregate_fuse_outputs(xe, p.bases, coeffs)
    out, _ = kba.kba_forward(x, p)
    assert np.abs(out - ref).max() < 1e-10

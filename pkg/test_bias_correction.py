"""
测试偏差校正模块：解析校正、截面刀切法与整体估计流程
"""
from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import bias_correction
from bias_correction import (BiasCorrectedSet, EstimationOptions, analytic_bc, estimate_all, g_matrices,
                             jackknife_bc, split_halves)
from covariance import PoetConfig, poet_cov, residual_matrix
from errors import RankError, ValidationError
from factor_extraction import extract_factors
from regression import ols_augmented


@pytest.fixture
def fitted(design_dataset):
    pc = extract_factors(design_dataset.X, 2)
    fit = ols_augmented(design_dataset.y, pc.Fhat, design_dataset.W)
    Sigma = poet_cov(residual_matrix(design_dataset.X, pc))
    return fit, pc, Sigma


def test_g_matrices_spherical_errors():
    B = np.random.default_rng(0).standard_normal((15, 2))
    Ghat, Gbar = g_matrices(B, 0.3 * np.eye(15))
    expected = 0.3 * np.linalg.inv(B.T @ B)
    assert_allclose(Ghat, expected, rtol=1e-10)
    assert_allclose(Gbar, expected, rtol=1e-10)


def test_g_matrices_single_factor():
    rng = np.random.default_rng(1)
    b = rng.standard_normal((10, 1))
    A = rng.standard_normal((10, 10))
    Sigma = A @ A.T
    Ghat, Gbar = g_matrices(b, Sigma)
    expected = (b[:, 0] @ Sigma @ b[:, 0]) / (b[:, 0] @ b[:, 0]) ** 2
    assert Ghat[0, 0] == pytest.approx(expected, rel=1e-10)
    assert Gbar[0, 0] == pytest.approx(expected, rel=1e-10)


def test_g_matrices_general(fitted):
    _, pc, Sigma = fitted
    inv = np.linalg.inv(pc.Bhat.T @ pc.Bhat)
    M = pc.Bhat.T @ Sigma @ pc.Bhat
    Ghat, Gbar = g_matrices(pc.Bhat, Sigma)
    assert_allclose(Ghat, M @ inv @ inv, rtol=1e-10)
    assert_allclose(Gbar, inv @ M @ inv, rtol=1e-10)


def test_analytic_bc_matches_direct_formula(fitted, design_dataset):
    fit, pc, Sigma = fitted
    W = design_dataset.W
    T, r = fit.T, fit.r
    Ghat, Gbar = g_matrices(pc.Bhat, Sigma)
    Q_inv = np.linalg.inv(fit.Zhat.T @ fit.Zhat / T)
    WtF = W.T @ pc.Fhat / T
    gamma = fit.gamma_hat
    kappa = -Q_inv @ np.concatenate([(Ghat + Gbar) @ gamma, WtF @ Ghat @ gamma])
    kappa_bar = Q_inv @ np.concatenate([np.zeros(r), WtF @ Gbar @ gamma])

    bc_H, bc_Hq, k_hat, k_bar = analytic_bc(fit, pc, W, Sigma)
    assert_allclose(k_hat, kappa, rtol=1e-8, atol=1e-12)
    assert_allclose(k_bar, kappa_bar, rtol=1e-8, atol=1e-12)
    assert_allclose(bc_H, fit.delta_hat - kappa, rtol=1e-8, atol=1e-12)
    assert_allclose(bc_Hq, fit.delta_hat - kappa_bar, rtol=1e-8, atol=1e-12)


def test_analytic_bc_zero_gamma_is_noop(fitted, design_dataset):
    fit, pc, Sigma = fitted
    zero = replace(fit, delta_hat=np.concatenate([np.zeros(fit.r), fit.beta_hat]))
    bc_H, bc_Hq, k_hat, k_bar = analytic_bc(zero, pc, design_dataset.W, Sigma)
    assert_array_equal(k_hat, 0.0)
    assert_array_equal(k_bar, 0.0)
    assert_array_equal(bc_H, zero.delta_hat)
    assert_array_equal(bc_Hq, zero.delta_hat)


def test_analytic_bc_zero_sigma(fitted, design_dataset):
    fit, pc, _ = fitted
    bc_H, bc_Hq, _, _ = analytic_bc(fit, pc, design_dataset.W, np.zeros((50, 50)))
    assert_allclose(bc_H, fit.delta_hat)
    assert_allclose(bc_Hq, fit.delta_hat)


def test_mw_kappa_bar_vanishes(design_dataset):
    options = EstimationOptions(use_mw=True, corrections=('bcHhatq',))
    _, _, _, bcset = estimate_all(design_dataset, options=options)
    assert_allclose(bcset.kappa_bar_hat, 0.0, atol=1e-10)
    assert bcset.delta_bc_Hhat is None and bcset.delta_bcjk is None


def test_sample_cov_gives_zero_correction(design_dataset):
    # 主成分残差与载荷正交，Ê B̂ = 0，未阈值化时 B̂'SB̂ = 0
    poet = PoetConfig(threshold_const=0.0, enforce_psd=False)
    options = EstimationOptions(poet=poet, corrections=('bcHhat', 'bcHhatq'))
    fit, _, _, bcset = estimate_all(design_dataset, options=options)
    assert_allclose(bcset.kappa_hat, 0.0, atol=1e-8)
    assert_allclose(bcset.kappa_bar_hat, 0.0, atol=1e-8)
    assert_allclose(bcset.delta_bc_Hhat, fit.delta_hat, atol=1e-8)


def test_estimate_all_uses_signal_rate(design_dataset):
    options = EstimationOptions(corrections=('bcHhat',))
    fit, pc, _, bcset = estimate_all(design_dataset, options=options)
    Sigma = poet_cov(residual_matrix(design_dataset.X, pc), options.poet, signal=pc.LambdaHat[-1])
    _, _, kappa, _ = analytic_bc(fit, pc, design_dataset.W, Sigma)
    assert_allclose(bcset.kappa_hat, kappa, rtol=1e-10, atol=1e-14)
    assert np.any(np.abs(bcset.kappa_hat) > 0)


def test_split_halves_even_and_odd():
    N1, N2 = split_halves(np.arange(8))
    assert_array_equal(N1, [0, 1, 2, 3])
    assert_array_equal(N2, [4, 5, 6, 7])
    N1, N2 = split_halves(np.array([8, 7, 6, 5, 4, 3, 2, 1, 0]))
    assert_array_equal(N1, [8, 7, 6, 5, 4])
    assert_array_equal(N2, [4, 3, 2, 1, 0])


def _half_delta(X, y, W, F_full, cols):
    T = X.shape[0]
    U, _, _ = np.linalg.svd(X[:, cols], full_matrices=False)
    f = np.sqrt(T) * U[:, :1]
    if np.corrcoef(f[:, 0], F_full[:, 0])[0, 1] < 0:
        f = -f
    return np.linalg.lstsq(np.hstack([f, W]), y, rcond=None)[0]


def test_jackknife_matches_direct_computation(small_dataset):
    X, y, W = small_dataset.X[:, :8], small_dataset.y, small_dataset.W
    rng = np.random.default_rng(11)
    perms = [rng.permutation(8) for _ in range(3)]
    pc = extract_factors(X, 1)
    delta_full = ols_augmented(y, pc.Fhat, W).delta_hat

    halves = []
    for perm in perms:
        halves.append(0.5 * (_half_delta(X, y, W, pc.Fhat, perm[:4]) + _half_delta(X, y, W, pc.Fhat, perm[4:])))
    expected = 2.0 * delta_full - np.mean(halves, axis=0)

    delta_jk, meta = jackknife_bc(X, y, W, 1, permutations=perms)
    assert_allclose(delta_jk, expected, rtol=1e-8, atol=1e-10)
    assert meta.R == 3 and meta.redraws == 0
    assert len(meta.splits) == 3


def test_jackknife_single_split(small_dataset):
    X, y, W = small_dataset.X, small_dataset.y, small_dataset.W
    perm = np.arange(small_dataset.N)
    pc = extract_factors(X, 2)
    delta_full = ols_augmented(y, pc.Fhat, W).delta_hat
    split_mean, _ = bias_correction._split_estimate(X, y, W, 2, pc.Fhat, perm, 1e-10, 1e-10)
    delta_jk, meta = jackknife_bc(X, y, W, 2, permutations=[perm])
    assert_allclose(delta_jk, 2.0 * delta_full - split_mean, rtol=1e-10)
    assert meta.R == 1


def test_jackknife_linear_in_y(small_dataset):
    X, W = small_dataset.X, small_dataset.W
    rng = np.random.default_rng(12)
    perms = [rng.permutation(small_dataset.N) for _ in range(4)]
    y1 = small_dataset.y
    y2 = rng.standard_normal(small_dataset.T)
    a, _ = jackknife_bc(X, y1, W, 2, permutations=perms)
    b, _ = jackknife_bc(X, y2, W, 2, permutations=perms)
    c, _ = jackknife_bc(X, y1 + 3.0 * y2, W, 2, permutations=perms)
    assert_allclose(c, a + 3.0 * b, rtol=1e-8, atol=1e-10)


def test_jackknife_deterministic_and_parallel_invariant(small_dataset):
    X, y, W = small_dataset.X, small_dataset.y, small_dataset.W
    a, _ = jackknife_bc(X, y, W, 2, R=6, rng=np.random.default_rng(3))
    b, _ = jackknife_bc(X, y, W, 2, R=6, rng=np.random.default_rng(3))
    c, _ = jackknife_bc(X, y, W, 2, R=6, rng=np.random.default_rng(3), n_jobs=2)
    assert_array_equal(a, b)
    assert_allclose(a, c, rtol=1e-12)


def test_jackknife_noiseless_single_factor(noiseless_dataset_r1):
    ds = noiseless_dataset_r1
    delta_jk, _ = jackknife_bc(ds.X, ds.y, ds.W, 1, R=5, rng=np.random.default_rng(0))
    expected = np.concatenate([ds.truth.gamma0, ds.truth.beta])
    assert_allclose(np.abs(delta_jk[:1]), np.abs(expected[:1]), atol=1e-8)
    assert_allclose(delta_jk[1:], expected[1:], atol=1e-8)


def test_jackknife_noiseless_beta_block(noiseless_dataset):
    ds = noiseless_dataset
    delta_jk, _ = jackknife_bc(ds.X, ds.y, ds.W, 2, R=5, rng=np.random.default_rng(0))
    assert_allclose(delta_jk[2:], ds.truth.beta, atol=1e-8)


def test_jackknife_requires_four_columns():
    rng = np.random.default_rng(4)
    with pytest.raises(ValidationError) as exc:
        jackknife_bc(rng.standard_normal((20, 3)), rng.standard_normal(20), np.ones((20, 1)), 1, R=2)
    assert exc.value.field == 'N'


def test_jackknife_rejects_invalid_permutation(small_dataset):
    with pytest.raises(ValidationError):
        jackknife_bc(small_dataset.X, small_dataset.y, small_dataset.W, 2,
                     permutations=[np.zeros(small_dataset.N, dtype=int)])


def test_jackknife_redraws_failed_splits(small_dataset, monkeypatch):
    original = bias_correction._split_estimate
    calls = {'n': 0}

    def flaky(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] in (1, 3):
            raise RankError('模拟失败')
        return original(*args, **kwargs)

    monkeypatch.setattr(bias_correction, '_split_estimate', flaky)
    _, meta = jackknife_bc(small_dataset.X, small_dataset.y, small_dataset.W, 2, R=4,
                           rng=np.random.default_rng(5))
    assert meta.redraws == 2
    assert len(meta.splits) == 4


def test_jackknife_redraw_limit(small_dataset, monkeypatch):
    def always_fail(*args, **kwargs):
        raise RankError('模拟失败')

    monkeypatch.setattr(bias_correction, '_split_estimate', always_fail)
    with pytest.raises(RankError):
        jackknife_bc(small_dataset.X, small_dataset.y, small_dataset.W, 2, R=2, redraw_factor=1,
                     rng=np.random.default_rng(6))


def test_estimate_all_noiseless_recovers_truth(noiseless_dataset_r1):
    ds = noiseless_dataset_r1
    fit, pc, rotations, bcset = estimate_all(ds, options=EstimationOptions(r=1, jk_replications=5))
    delta0 = np.concatenate([ds.truth.gamma0, ds.truth.beta])
    for name in ('ls', 'bcHhat', 'bcHhatq', 'bcjk'):
        assert_allclose(bcset.estimator(name), delta0, atol=1e-8)
    for name in ('delta0', 'delta_Hhat', 'delta_Hhatq'):
        assert_allclose(bcset.target(name), delta0, atol=1e-8)
    assert rotations is not None
    assert_allclose(pc.Fhat, ds.truth.F0, atol=1e-8)


def test_estimate_all_without_truth(design_dataset):
    ds = replace(design_dataset, truth=None)
    fit, pc, rotations, bcset = estimate_all(ds, options=EstimationOptions(jk_replications=4, cov_kind='hac'))
    assert rotations is None and bcset.targets is None
    assert fit.cov_kind == 'hac'
    assert bcset.delta_bcjk.shape == (4,)
    with pytest.raises(ValidationError):
        bcset.target('delta0')


def test_estimate_all_targets_consistent(design_dataset):
    _, _, rotations, bcset = estimate_all(design_dataset, options=EstimationOptions(jk_replications=4))
    assert_allclose(bcset.target('delta0')[:2], rotations.gamma0)
    assert_allclose(bcset.target('delta_Hhat')[:2], rotations.gamma_Hhat)
    assert_allclose(bcset.target('delta_Hhatq')[:2], rotations.gamma_Hhat_q)
    assert_allclose(bcset.target('delta0')[2:], design_dataset.truth.beta)
    assert rotations.tildes is not None


def test_estimation_options_validation():
    assert EstimationOptions(corrections='bcjk, bcHhat').corrections == ('bcjk', 'bcHhat')
    assert EstimationOptions(cov_kind='HC0').cov_kind == 'hetero'
    with pytest.raises(ValidationError) as exc:
        EstimationOptions(corrections=('bcfoo',))
    assert exc.value.field == 'corrections'
    with pytest.raises(ValidationError):
        EstimationOptions(r=0)
    with pytest.raises(ValidationError):
        EstimationOptions(poet=PoetConfig(threshold_const=-1))


def test_bias_corrected_set_lookup():
    bcset = BiasCorrectedSet(delta_hat=np.ones(3))
    assert_array_equal(bcset.estimator('ls'), np.ones(3))
    assert bcset.estimator('bcjk') is None
    with pytest.raises(ValidationError):
        bcset.estimator('ols')

"""
偏差校正模块 - 两种解析偏差校正估计、随机分组的截面刀切法估计，以及整体估计流程
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.linalg as la
from joblib import Parallel, delayed

from covariance import PoetConfig, poet_cov, residual_matrix
from errors import NumericalError, RankError, SingularityError, ValidationError
from factor_extraction import EIGEN_GAP_TOL, RANK_TOL, extract_factors, project_out
from regression import compute_cov, normalize_cov_kind, ols_augmented
from rotations import (COND_LIMIT, align_factors, apply_alignment, compute_rotation_set,
                       rotation_H, tilde_rotations)

logger = logging.getLogger(__name__)

CORRECTIONS = ('bcHhat', 'bcHhatq', 'bcjk')
ESTIMATORS = ('ls',) + CORRECTIONS
TARGETS = ('delta0', 'delta_Hhat', 'delta_Hhatq')


@dataclass
class EstimationOptions:
    """
    估计选项

    Attributes:
        r: 因子个数
        poet: PoetConfig
        jk_replications: 刀切法随机分组次数R
        jk_redraw_factor: 失败分组最多重抽 redraw_factor·R 次
        jk_n_jobs: 刀切法并行数
        use_mw: 是否先对W正交化后提取因子
        cov_kind: homoskedastic / hetero / hac
        hac_bandwidth: HAC截断参数，None为 floor(T^{1/4})
        corrections: 需要计算的校正估计
        seed: 刀切法随机种子（未显式传入rng时使用）
    """

    r: int = 2
    poet: PoetConfig = field(default_factory=PoetConfig)
    jk_replications: int = 100
    jk_redraw_factor: int = 10
    jk_n_jobs: int = 1
    use_mw: bool = False
    cov_kind: str = 'hetero'
    hac_bandwidth: Optional[int] = None
    eigen_gap_tol: float = EIGEN_GAP_TOL
    rank_tol: float = RANK_TOL
    cond_limit: float = COND_LIMIT
    corrections: tuple = CORRECTIONS
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.corrections, str):
            self.corrections = tuple(c.strip() for c in self.corrections.split(',') if c.strip())
        self.corrections = tuple(self.corrections)
        unknown = [c for c in self.corrections if c not in CORRECTIONS]
        if unknown:
            raise ValidationError(f'未知的校正方法 {unknown}，可选 {CORRECTIONS}', field='corrections')
        if int(self.r) < 1:
            raise ValidationError(f'须 ≥ 1，当前 {self.r}', field='r')
        if int(self.jk_replications) < 1:
            raise ValidationError(f'须 ≥ 1，当前 {self.jk_replications}', field='jk_replications')
        if int(self.jk_redraw_factor) < 0:
            raise ValidationError('须非负', field='jk_redraw_factor')
        self.r = int(self.r)
        self.jk_replications = int(self.jk_replications)
        self.cov_kind = normalize_cov_kind(self.cov_kind)


@dataclass
class JkMeta:
    """刀切法运行信息"""

    R: int
    seed: Optional[int] = None
    redraws: int = 0
    splits: list = field(default_factory=list)

    @property
    def realigned_splits(self):
        """半样本因子顺序与全样本不一致的分组数"""
        return sum(1 for s in self.splits if s['reordered'])


@dataclass
class BiasCorrectedSet:
    """
    各估计量及其目标参数

    未请求的校正估计为None；targets 仅在已知真值时给出。
    """

    delta_hat: np.ndarray
    delta_bc_Hhat: Optional[np.ndarray] = None
    delta_bc_Hhat_q: Optional[np.ndarray] = None
    delta_bcjk: Optional[np.ndarray] = None
    kappa_hat: Optional[np.ndarray] = None
    kappa_bar_hat: Optional[np.ndarray] = None
    jk_meta: Optional[JkMeta] = None
    targets: Optional[dict] = None

    def estimator(self, name):
        """按名称（ls / bcHhat / bcHhatq / bcjk）取估计值"""
        mapping = {
            'ls': self.delta_hat,
            'bcHhat': self.delta_bc_Hhat,
            'bcHhatq': self.delta_bc_Hhat_q,
            'bcjk': self.delta_bcjk,
        }
        if name not in mapping:
            raise ValidationError(f'未知的估计量 {name}', field='estimator')
        return mapping[name]

    def target(self, name):
        if not self.targets:
            raise ValidationError('数据不含真值，无目标参数', field='targets')
        if name not in self.targets:
            raise ValidationError(f'未知的目标参数 {name}', field='target')
        return self.targets[name]


def g_matrices(Bhat, Sigma_e_hat):
    """
    Ĝ = B̂'Σ̂_eB̂(B̂'B̂)⁻²，Ḡ̂ = (B̂'B̂)⁻¹B̂'Σ̂_eB̂(B̂'B̂)⁻¹

    Args:
        Bhat: N×r
        Sigma_e_hat: N×N

    Returns:
        (Ghat, Gbar_hat)
    """
    Bhat = np.asarray(Bhat, dtype=float)
    BtB = Bhat.T @ Bhat
    try:
        la.cholesky(BtB)
    except la.LinAlgError as e:
        raise SingularityError("B̂'B̂ 奇异") from e
    inv_BtB = la.inv(BtB)
    M = Bhat.T @ Sigma_e_hat @ Bhat
    Ghat = M @ inv_BtB @ inv_BtB
    Gbar_hat = inv_BtB @ M @ inv_BtB
    return Ghat, Gbar_hat


def analytic_bc(fit, pc, W, Sigma_e_hat):
    """
    解析偏差校正

    κ̂ = -(Ẑ'Ẑ/T)⁻¹[Ĝ+Ḡ̂; W'F̂Ĝ/T]γ̂，κ̄̂ = (Ẑ'Ẑ/T)⁻¹[0; W'F̂Ḡ̂/T]γ̂，
    δ̂_bcĤ = δ̂ - κ̂，δ̂_bcĤq = δ̂ - κ̄̂

    Args:
        fit: AugmentedFit
        pc: 同一数据的PcEstimate
        W: T×p
        Sigma_e_hat: N×N 特质协方差估计

    Returns:
        (delta_bc_Hhat, delta_bc_Hhat_q, kappa_hat, kappa_bar_hat)
    """
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    T = fit.T
    gamma = fit.gamma_hat
    Ghat, Gbar_hat = g_matrices(pc.Bhat, Sigma_e_hat)
    WtF = W.T @ pc.Fhat / T

    try:
        factor = la.cho_factor(fit.ZtZ_over_T)
    except la.LinAlgError as e:
        raise SingularityError("Ẑ'Ẑ/T 奇异") from e

    stacked = np.concatenate([(Ghat + Gbar_hat) @ gamma, WtF @ Ghat @ gamma])
    kappa_hat = -la.cho_solve(factor, stacked)
    stacked_bar = np.concatenate([np.zeros(fit.r), WtF @ Gbar_hat @ gamma])
    kappa_bar_hat = la.cho_solve(factor, stacked_bar)

    delta = fit.delta_hat
    return delta - kappa_hat, delta - kappa_bar_hat, kappa_hat, kappa_bar_hat


def split_halves(perm):
    """
    将排列后的列分为两半，N为奇数时两半各取 ⌈N/2⌉ 列并共用中间一列

    Returns:
        (N1, N2)
    """
    perm = np.asarray(perm)
    N = perm.size
    half = -(-N // 2)
    return perm[:half], perm[N - half:]


def _half_estimate(X, y, W, r, F_full, cols, eigen_gap_tol, rank_tol):
    pc_half = extract_factors(X[:, cols], r, eigen_gap_tol, rank_tol)
    order, signs = align_factors(F_full, pc_half.Fhat)
    F_aligned = apply_alignment(pc_half.Fhat, order, signs)
    fit = ols_augmented(y, F_aligned, W, rank_tol)
    return fit.delta_hat, order, signs


def _split_estimate(X, y, W, r, F_full, perm, eigen_gap_tol, rank_tol):
    """单次分组：(δ̂_N1 + δ̂_N2)/2 及对齐信息"""
    N1, N2 = split_halves(perm)
    d1, order1, signs1 = _half_estimate(X, y, W, r, F_full, N1, eigen_gap_tol, rank_tol)
    d2, order2, signs2 = _half_estimate(X, y, W, r, F_full, N2, eigen_gap_tol, rank_tol)
    identity = np.arange(r)
    diag = {
        'order': (order1.tolist(), order2.tolist()),
        'signs': (signs1.tolist(), signs2.tolist()),
        'reordered': bool(np.any(order1 != identity) or np.any(order2 != identity)),
    }
    return 0.5 * (d1 + d2), diag


def _try_split(s, X, y, W, r, F_full, perm, eigen_gap_tol, rank_tol):
    try:
        return _split_estimate(X, y, W, r, F_full, perm, eigen_gap_tol, rank_tol)
    except NumericalError as e:
        logger.warning(f"[split {s}] 半样本估计失败，将重新抽取: {e}")
        return None


def jackknife_bc(X, y, W, r, R=100, rng=None, n_jobs=1, redraw_factor=10,
                 F_full=None, delta_full=None, permutations=None, backend='threading',
                 eigen_gap_tol=EIGEN_GAP_TOL, rank_tol=RANK_TOL, seed=None):
    """
    随机分组截面刀切法 δ̂_bcjk = 2δ̂ - R⁻¹Σ_s(δ̂_N1(s) + δ̂_N2(s))/2

    全部R个列排列先从同一随机流依次抽出，再分发给并行任务，结果与调度无关。
    半样本因子按相关系数对齐到全样本F̂的顺序与符号。

    Args:
        X: T×N（M_w变换时传入M_wX）
        y: 长度T
        W: T×p
        r: 因子个数
        R: 分组次数
        rng: numpy Generator
        n_jobs: 并行任务数
        redraw_factor: 失败分组的重抽上限倍数
        F_full, delta_full: 全样本F̂与δ̂，缺省时重新估计
        permutations: 指定的R个列排列（缺省随机抽取）
        backend: joblib 后端

    Returns:
        (delta_bcjk, JkMeta)
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    N = X.shape[1]
    if N < 4:
        raise ValidationError(f'刀切法要求 N ≥ 4，当前 {N}', field='N')
    if rng is None:
        rng = np.random.default_rng(seed)

    if F_full is None or delta_full is None:
        pc = extract_factors(X, r, eigen_gap_tol, rank_tol)
        F_full = pc.Fhat
        delta_full = ols_augmented(y, F_full, W, rank_tol).delta_hat

    if permutations is None:
        if int(R) < 1:
            raise ValidationError(f'须 ≥ 1，当前 {R}', field='R')
        permutations = [rng.permutation(N) for _ in range(int(R))]
    else:
        permutations = [np.asarray(p, dtype=int) for p in permutations]
        R = len(permutations)
        for p in permutations:
            if sorted(p.tolist()) != list(range(N)):
                raise ValidationError('不是 0..N-1 的排列', field='permutations')
    if N % 2:
        logger.debug(f"N={N} 为奇数，两半共用中间一列")

    args = (X, y, W, r, F_full)
    if n_jobs != 1 and R > 1:
        results = Parallel(n_jobs=n_jobs, backend=backend)(
            delayed(_try_split)(s, *args, perm, eigen_gap_tol, rank_tol)
            for s, perm in enumerate(permutations))
    else:
        results = [_try_split(s, *args, perm, eigen_gap_tol, rank_tol)
                   for s, perm in enumerate(permutations)]

    meta = JkMeta(R=int(R), seed=seed)
    max_redraws = int(redraw_factor) * int(R)
    for s, result in enumerate(results):
        while result is None:
            if meta.redraws >= max_redraws:
                raise RankError(f'刀切法重抽次数超过上限 {max_redraws}')
            meta.redraws += 1
            result = _try_split(s, *args, rng.permutation(N), eigen_gap_tol, rank_tol)
        results[s] = result

    split_means = np.vstack([res[0] for res in results])
    meta.splits = [dict(split=s, **res[1]) for s, res in enumerate(results)]
    if meta.redraws:
        logger.info(f"刀切法: R={R}，重抽 {meta.redraws} 次")
    delta_jk = split_means.mean(axis=0)
    return 2.0 * np.asarray(delta_full) - delta_jk, meta


def _truth_side(truth, W, pc, use_mw, cond_limit):
    """
    真值一侧：对齐F̂符号，计算旋转矩阵、伪真参数与目标向量

    Returns:
        (pc, RotationSet, targets)
    """
    Fstar = truth.Fstar
    beta_target = np.asarray(truth.beta, dtype=float)
    if use_mw:
        Fstar = project_out(truth.Fstar, W)
        # β_w = (W'W)⁻¹W'F*γ* + β
        beta_target = beta_target + la.lstsq(W, truth.Fstar @ truth.gamma_star)[0]

    H = rotation_H(Fstar, truth.Bstar)
    F_ref = Fstar @ H
    order, _ = align_factors(F_ref, pc.Fhat)
    if np.any(order != np.arange(pc.r)):
        logger.warning(f"全样本因子与真值因子的对应顺序为 {order.tolist()}，仅调整符号")
    signs = np.sign(np.sum(F_ref * pc.Fhat, axis=0))
    signs[signs == 0] = 1.0
    pc = pc.with_signs(signs)

    rotations = compute_rotation_set(Fstar, truth.Bstar, truth.gamma_star, pc, cond_limit)
    reference = truth
    if use_mw:
        reference = replace(truth, F0=F_ref, B0=truth.Bstar @ la.inv(H).T)
    rotations.tildes = tilde_rotations(reference, pc, cond_limit)

    targets = {
        'delta0': np.concatenate([rotations.gamma0, beta_target]),
        'delta_Hhat': np.concatenate([rotations.gamma_Hhat, beta_target]),
        'delta_Hhatq': np.concatenate([rotations.gamma_Hhat_q, beta_target]),
    }
    return pc, rotations, targets


def estimate_all(dataset, r=None, options=None, rng=None):
    """
    完整估计流程：提取因子、增广回归、协方差、解析与刀切法偏差校正

    use_mw 时因子取自 M_wX，各估计量及目标均为对应的 w 版本。
    数据含真值时计算RotationSet与目标参数。

    Args:
        dataset: Dataset
        r: 因子个数，缺省取options.r
        options: EstimationOptions
        rng: 刀切法随机流，缺省由options.seed构造

    Returns:
        (AugmentedFit, PcEstimate, RotationSet或None, BiasCorrectedSet)
    """
    options = EstimationOptions() if options is None else options
    r = options.r if r is None else int(r)
    X, y, W = dataset.X, dataset.y, dataset.W

    X_used = project_out(X, W, options.rank_tol) if options.use_mw else X
    pc = extract_factors(X_used, r, options.eigen_gap_tol, options.rank_tol)

    rotations = targets = None
    if dataset.truth is not None:
        pc, rotations, targets = _truth_side(dataset.truth, W, pc, options.use_mw, options.cond_limit)

    fit = ols_augmented(y, pc.Fhat, W, options.rank_tol)
    compute_cov(fit, options.cov_kind, options.hac_bandwidth)
    bcset = BiasCorrectedSet(delta_hat=fit.delta_hat.copy(), targets=targets)

    if 'bcHhat' in options.corrections or 'bcHhatq' in options.corrections:
        Sigma_e_hat = poet_cov(residual_matrix(X_used, pc), options.poet, signal=pc.LambdaHat[-1])
        bc_H, bc_Hq, kappa, kappa_bar = analytic_bc(fit, pc, W, Sigma_e_hat)
        bcset.kappa_hat, bcset.kappa_bar_hat = kappa, kappa_bar
        if 'bcHhat' in options.corrections:
            bcset.delta_bc_Hhat = bc_H
        if 'bcHhatq' in options.corrections:
            bcset.delta_bc_Hhat_q = bc_Hq

    if 'bcjk' in options.corrections:
        if rng is None:
            rng = np.random.default_rng(options.seed)
        bcset.delta_bcjk, bcset.jk_meta = jackknife_bc(
            X_used, y, W, r, options.jk_replications, rng,
            n_jobs=options.jk_n_jobs, redraw_factor=options.jk_redraw_factor,
            F_full=pc.Fhat, delta_full=fit.delta_hat,
            eigen_gap_tol=options.eigen_gap_tol, rank_tol=options.rank_tol,
        )

    return fit, pc, rotations, bcset

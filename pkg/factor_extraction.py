"""
因子提取模块 - 主成分估计及对可观测回归元正交化的变体
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from errors import RankError, SingularityError, ValidationError

logger = logging.getLogger(__name__)

EIGEN_GAP_TOL = 1e-10
RANK_TOL = 1e-10


@dataclass
class PcEstimate:
    """
    主成分估计结果，满足 F̂'F̂/T = I_r，B̂'B̂ = diag(Λ̂)

    Attributes:
        Fhat: T×r 因子
        Bhat: N×r 载荷
        LambdaHat: 长度r，严格递减
        r: 因子个数
    """

    Fhat: np.ndarray
    Bhat: np.ndarray
    LambdaHat: np.ndarray
    r: int

    def with_signs(self, signs):
        """F̂、B̂按列同时乘以±1，归一化条件不变"""
        signs = np.asarray(signs, dtype=float)
        return PcEstimate(self.Fhat * signs, self.Bhat * signs, self.LambdaHat.copy(), self.r)


def sign_by_largest_entry(vectors):
    """
    调整列符号，使每列绝对值最大的元素为正

    Args:
        vectors: 矩阵，按列处理

    Returns:
        (调整后的矩阵, 符号向量)
    """
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs, signs


def extract_factors(X, r, eigen_gap_tol=EIGEN_GAP_TOL, rank_tol=RANK_TOL):
    """
    主成分估计：F̂ 为 XX'/T 前r个特征向量乘以√T，B̂ = X'F̂/T

    Args:
        X: T×N 数据矩阵
        r: 因子个数
        eigen_gap_tol: λ̂_r 与 λ̂_{r+1} 的相对间隔阈值，过小时告警
        rank_tol: λ̂_r ≤ rank_tol·λ̂_1 时视为秩不足

    Returns:
        PcEstimate
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValidationError('X 必须是二维矩阵', field='X')
    T, N = X.shape
    if not 1 <= r <= min(N, T):
        raise ValidationError(f'须满足 1 ≤ r ≤ min(N, T)={min(N, T)}，当前 {r}', field='r')
    if not np.all(np.isfinite(X)):
        raise ValidationError('包含非有限值', field='X')

    S = X @ X.T / T
    k = min(r + 1, T)
    # eigh 返回升序特征值，只取最大的k个
    evals, evecs = la.eigh(S, subset_by_index=[T - k, T - 1])
    evals = evals[::-1]
    evecs = evecs[:, ::-1]

    lam = evals[:r]
    if lam[0] <= 0 or lam[-1] <= rank_tol * lam[0]:
        raise RankError(f'有效秩小于 r={r}: 特征值 {lam.tolist()}')
    if k > r and lam[-1] - evals[r] <= eigen_gap_tol * lam[0]:
        logger.warning(f"第 {r} 与第 {r + 1} 个特征值几乎相等 ({lam[-1]:.6g}, {evals[r]:.6g})，因子空间不唯一")
    if np.any(np.diff(lam) >= 0):
        logger.warning(f"前 {r} 个特征值存在重根: {lam.tolist()}")

    U, _ = sign_by_largest_entry(evecs[:, :r])
    Fhat = np.sqrt(T) * U
    Bhat = X.T @ Fhat / T
    return PcEstimate(Fhat=Fhat, Bhat=Bhat, LambdaHat=lam.copy(), r=r)


def project_out(X, W, tol=1e-10):
    """
    X_w = M_w X，其中 M_w = I - W(W'W)⁻¹W'

    Args:
        X: T×N 数据矩阵
        W: T×p 可观测回归元
        tol: 判定W列秩不足的相对阈值

    Returns:
        X_w: T×N
    """
    X = np.asarray(X, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    if W.shape[0] != X.shape[0]:
        raise ValidationError(f'行数 {W.shape[0]} 与 X 的行数 {X.shape[0]} 不一致', field='W')
    Q, R, piv = la.qr(W, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    bad = np.nonzero(diag <= tol * diag[0])[0] if diag.size and diag[0] > 0 else np.arange(W.shape[1])
    if bad.size:
        raise SingularityError('W 列秩不足', pivot=int(piv[bad[0]]))
    return X - Q @ (Q.T @ X)


def standardize(X):
    """
    按列标准化（均值0，方差1），常数列保持为0

    Args:
        X: T×N

    Returns:
        标准化后的矩阵
    """
    X = np.asarray(X, dtype=float)
    centered = X - X.mean(axis=0)
    sd = centered.std(axis=0)
    constant = sd == 0
    if np.any(constant):
        logger.warning(f"{int(constant.sum())} 列为常数，标准化后置零")
    sd[constant] = 1.0
    return centered / sd

"""
特质协方差估计模块 - 主成分残差的自适应阈值（POET）稀疏协方差
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from errors import ValidationError

logger = logging.getLogger(__name__)

PSD_FLOOR = 1e-8


@dataclass
class PoetConfig:
    """
    阈值协方差配置

    Attributes:
        threshold_const: 阈值常数C ≥ 0
        kind: hard / soft
        enforce_psd: 是否将特征值下限截断为 1e-8·最大特征值
        signal_rate: 是否在 ω_T 中加入弱因子项 √N/λ̂_r
    """

    threshold_const: float = 0.5
    kind: str = 'hard'
    enforce_psd: bool = True
    signal_rate: bool = True

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.threshold_const < 0:
            raise ValidationError(f'须非负，当前 {self.threshold_const}', field='threshold_const')
        if self.kind not in ('hard', 'soft'):
            raise ValidationError(f'须为 hard 或 soft，当前 {self.kind}', field='kind')


def residual_matrix(X, pc):
    """
    主成分残差 Ê = X - F̂B̂'

    Args:
        X: T×N
        pc: 同一X的PcEstimate

    Returns:
        Ê: T×N
    """
    X = np.asarray(X, dtype=float)
    if X.shape != (pc.Fhat.shape[0], pc.Bhat.shape[0]):
        raise ValidationError(f'X 形状 {X.shape} 与因子估计不一致', field='X')
    return X - pc.Fhat @ pc.Bhat.T


def threshold_statistics(Ehat):
    """
    样本协方差S与 θ̂_ij = T⁻¹Σ_t(ê_ti ê_tj - S_ij)²

    Args:
        Ehat: T×N

    Returns:
        (S, theta)
    """
    T = Ehat.shape[0]
    S = Ehat.T @ Ehat / T
    sq = Ehat ** 2
    theta = sq.T @ sq / T - S ** 2
    return S, np.clip(theta, 0.0, None)


def _floor_eigenvalues(M):
    """特征值下限截断，已满足时原样返回"""
    w, Q = la.eigh(M)
    floor = PSD_FLOOR * max(w[-1], 0.0)
    if w[0] >= floor:
        return M
    logger.debug(f"POET估计最小特征值 {w[0]:.3e} 低于下限 {floor:.3e}，截断")
    w = np.clip(w, floor, None)
    out = (Q * w) @ Q.T
    return 0.5 * (out + out.T)


def poet_cov(Ehat, cfg=None, signal=None):
    """
    自适应阈值协方差 Σ̂_e

    τ_ij = C·√θ̂_ij·ω_T，ω_T = √(log N / T) + √N / λ̂_r；非对角元按hard/soft阈值处理，对角元保留。
    强因子时 λ̂_r ≍ N，第二项退化为 1/√N 阶；弱因子时该项主导。
    未给出 signal 或 signal_rate 关闭时只用第一项。

    Args:
        Ehat: T×N 残差
        cfg: PoetConfig
        signal: 最小因子特征值 λ̂_r（B̂'B̂ 的最小对角元）

    Returns:
        N×N 对称矩阵
    """
    cfg = PoetConfig() if cfg is None else cfg
    Ehat = np.asarray(Ehat, dtype=float)
    if Ehat.ndim != 2:
        raise ValidationError('须为二维矩阵', field='Ehat')
    T, N = Ehat.shape
    if T < 2:
        raise ValidationError(f'要求 T ≥ 2，当前 {T}', field='Ehat')

    S, theta = threshold_statistics(Ehat)
    omega_T = np.sqrt(np.log(N) / T)
    if cfg.signal_rate and signal is not None:
        if not np.isfinite(signal) or signal <= 0:
            raise ValidationError(f'须为正数，当前 {signal}', field='signal')
        omega_T += np.sqrt(N) / float(signal)
    tau = cfg.threshold_const * np.sqrt(theta) * omega_T

    absS = np.abs(S)
    if cfg.kind == 'hard':
        out = np.where(absS > tau, S, 0.0)
    else:
        out = np.sign(S) * np.clip(absS - tau, 0.0, None)
    np.fill_diagonal(out, np.diag(S))
    out = 0.5 * (out + out.T)

    if logger.isEnabledFor(logging.DEBUG):
        kept = int(np.count_nonzero(out) - np.count_nonzero(np.diag(out)))
        logger.debug(f"POET: C={cfg.threshold_const}, ω_T={omega_T:.4f}, 保留非对角元 {kept}/{N * (N - 1)}")

    if cfg.enforce_psd:
        out = _floor_eigenvalues(out)
    return out

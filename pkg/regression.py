"""
增广回归模块 - 最小二乘估计、系数协方差估计与假设检验
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as la
from scipy import stats

from errors import NumericalError, SingularityError, ValidationError

logger = logging.getLogger(__name__)

CRITICAL_5PCT = 1.96
COV_KINDS = ('homoskedastic', 'hetero', 'hac')
_COV_ALIASES = {
    'homoskedastic': 'homoskedastic', 'homo': 'homoskedastic',
    'hetero': 'hetero', 'heteroskedastic': 'hetero', 'hc0': 'hetero',
    'hac': 'hac', 'newey-west': 'hac',
}


@dataclass
class AugmentedFit:
    """
    增广回归结果，δ̂ = (γ̂', β̂')'

    cov_delta 为 δ̂ 自身的方差（已除以T），t检验无需再缩放。
    """

    delta_hat: np.ndarray
    resid: np.ndarray
    ZtZ_over_T: np.ndarray
    Zhat: np.ndarray
    y: np.ndarray
    r: int
    p: int
    cov_delta: Optional[np.ndarray] = None
    cov_kind: Optional[str] = None
    bandwidth: Optional[int] = None

    @property
    def T(self):
        return self.Zhat.shape[0]

    @property
    def gamma_hat(self):
        return self.delta_hat[:self.r]

    @property
    def beta_hat(self):
        return self.delta_hat[self.r:]

    @property
    def r_squared(self):
        """中心化R²"""
        tss = np.sum((self.y - self.y.mean()) ** 2)
        if tss == 0:
            return float('nan')
        return float(1.0 - np.sum(self.resid ** 2) / tss)

    def std_errors(self):
        if self.cov_delta is None:
            raise ValidationError('尚未计算系数协方差', field='cov_delta')
        return np.sqrt(np.clip(np.diag(self.cov_delta), 0.0, None))


def normalize_cov_kind(kind):
    """协方差类型名称归一化"""
    key = str(kind).strip().lower()
    if key not in _COV_ALIASES:
        raise ValidationError(f'未知的协方差类型 {kind}，可选 {COV_KINDS}', field='cov_kind')
    return _COV_ALIASES[key]


def default_bandwidth(T):
    """Newey-West 截断参数：T^{1/4} 的整数部分"""
    return int(math.floor(T ** 0.25))


def ols_augmented(y, Fhat, W, tol=1e-10):
    """
    将y对 Ẑ = (F̂, W) 做最小二乘回归（带列主元的QR分解求解）

    Args:
        y: 长度T
        Fhat: T×r
        W: T×p

    Returns:
        AugmentedFit（未计算协方差）
    """
    y = np.asarray(y, dtype=float).ravel()
    Fhat = np.asarray(Fhat, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W[:, None]
    Z = np.hstack([Fhat, W])
    T, k = Z.shape
    if y.shape[0] != T:
        raise ValidationError(f'长度 {y.shape[0]} 与回归元行数 {T} 不一致', field='y')
    if T < k:
        raise SingularityError(f'样本量 T={T} 小于回归元个数 {k}')

    Q, R, piv = la.qr(Z, mode='economic', pivoting=True)
    diag = np.abs(np.diag(R))
    small = np.nonzero(diag <= tol * diag[0])[0]
    if diag[0] == 0 or small.size:
        pivot = int(piv[small[0]]) if small.size else 0
        raise SingularityError('Ẑ 列秩不足', pivot=pivot)

    coef = la.solve_triangular(R, Q.T @ y)
    delta = np.empty(k)
    delta[piv] = coef
    resid = y - Z @ delta
    return AugmentedFit(
        delta_hat=delta, resid=resid, ZtZ_over_T=Z.T @ Z / T,
        Zhat=Z, y=y, r=Fhat.shape[1], p=W.shape[1],
    )


def _sandwich(Zhat, omega):
    """(Ẑ'Ẑ/T)⁻¹ Ω (Ẑ'Ẑ/T)⁻¹ / T"""
    T = Zhat.shape[0]
    factor = la.cho_factor(Zhat.T @ Zhat / T)
    left = la.cho_solve(factor, omega)
    cov = la.cho_solve(factor, left.T).T / T
    return 0.5 * (cov + cov.T)


def cov_homoskedastic(fit, Zhat=None):
    """
    同方差协方差 σ̂²(Ẑ'Ẑ)⁻¹，σ̂² = ε̂'ε̂/(T-k)，与经典OLS一致

    Returns:
        (r+p)×(r+p)
    """
    Zhat = fit.Zhat if Zhat is None else Zhat
    T, k = Zhat.shape
    if T <= k:
        raise SingularityError(f'自由度不足: T={T}, k={k}')
    sigma2 = float(fit.resid @ fit.resid) / (T - k)
    return _sandwich(Zhat, sigma2 * (Zhat.T @ Zhat) / T)


def cov_sandwich_hetero(fit, Zhat=None):
    """
    异方差稳健协方差，Σ̂_δ = (Ẑ'Ẑ/T)⁻¹(T⁻¹Σ ẑ_t ε̂_t² ẑ_t')(Ẑ'Ẑ/T)⁻¹，返回 Σ̂_δ/T

    Returns:
        (r+p)×(r+p)
    """
    Zhat = fit.Zhat if Zhat is None else Zhat
    T = Zhat.shape[0]
    scores = Zhat * fit.resid[:, None]
    return _sandwich(Zhat, scores.T @ scores / T)


def long_run_covariance(scores, bandwidth):
    """
    Bartlett核长期协方差，权重 1 - j/(bandwidth+1)

    Args:
        scores: T×k 得分序列 ẑ_t ε̂_t
        bandwidth: 截断滞后阶数

    Returns:
        k×k
    """
    T = scores.shape[0]
    omega = scores.T @ scores / T
    for j in range(1, bandwidth + 1):
        weight = 1.0 - j / (bandwidth + 1.0)
        gamma_j = scores[j:].T @ scores[:-j] / T
        omega += weight * (gamma_j + gamma_j.T)
    return omega


def cov_hac(fit, Zhat=None, bandwidth=None):
    """
    Newey-West HAC协方差，缺省截断参数为 floor(T^{1/4})

    Args:
        fit: AugmentedFit
        Zhat: 回归元矩阵，缺省取fit.Zhat
        bandwidth: 非负整数

    Returns:
        (r+p)×(r+p)
    """
    Zhat = fit.Zhat if Zhat is None else Zhat
    T = Zhat.shape[0]
    if bandwidth is None:
        bandwidth = default_bandwidth(T)
    if int(bandwidth) != bandwidth or not 0 <= bandwidth < T:
        raise ValidationError(f'须为 [0, T) 内的整数，当前 {bandwidth}', field='bandwidth')
    scores = Zhat * fit.resid[:, None]
    return _sandwich(Zhat, long_run_covariance(scores, int(bandwidth)))


def compute_cov(fit, kind='hetero', bandwidth=None):
    """
    计算协方差并写回fit

    Args:
        fit: AugmentedFit
        kind: homoskedastic / hetero / hac
        bandwidth: HAC截断参数

    Returns:
        fit
    """
    kind = normalize_cov_kind(kind)
    if kind == 'homoskedastic':
        fit.cov_delta = cov_homoskedastic(fit)
    elif kind == 'hetero':
        fit.cov_delta = cov_sandwich_hetero(fit)
    else:
        if bandwidth is None:
            bandwidth = default_bandwidth(fit.T)
        fit.cov_delta = cov_hac(fit, bandwidth=bandwidth)
        fit.bandwidth = int(bandwidth)
    fit.cov_kind = kind
    return fit


def _ratio(estimate, null_value, variance):
    if not variance > 0:
        raise NumericalError(f'方差非正 ({variance})，无法构造t统计量')
    return (estimate - null_value) / math.sqrt(variance)


def t_test(fit, index, null_value=0.0, delta=None):
    """
    双侧5% t检验

    Args:
        fit: 含协方差的AugmentedFit
        index: 系数下标
        null_value: 原假设取值
        delta: 替代的系数向量（如偏差校正估计），缺省为δ̂

    Returns:
        (t_stat, reject_5pct)
    """
    if fit.cov_delta is None:
        raise ValidationError('尚未计算系数协方差', field='cov_delta')
    delta = fit.delta_hat if delta is None else np.asarray(delta)
    t_stat = _ratio(float(delta[index]), null_value, float(fit.cov_delta[index, index]))
    return t_stat, abs(t_stat) > CRITICAL_5PCT


def wald_linear(fit, a, null_value=0.0, delta=None):
    """
    线性约束 a'δ = null 的t统计量，如 a = e₁ - e₂ 检验 γ₁ = γ₂

    Args:
        fit: 含协方差的AugmentedFit
        a: 长度 r+p 的权重向量
        null_value: 原假设取值
        delta: 替代的系数向量，缺省为δ̂

    Returns:
        (t_stat, {'10%': bool, '5%': bool, '1%': bool})
    """
    if fit.cov_delta is None:
        raise ValidationError('尚未计算系数协方差', field='cov_delta')
    a = np.asarray(a, dtype=float)
    delta = fit.delta_hat if delta is None else np.asarray(delta)
    if a.shape != delta.shape:
        raise ValidationError(f'长度应为 {delta.shape[0]}', field='a')
    t_stat = _ratio(float(a @ delta), null_value, float(a @ fit.cov_delta @ a))
    flags = {level: abs(t_stat) > stats.norm.ppf(1 - alpha / 2)
             for level, alpha in (('10%', 0.10), ('5%', 0.05), ('1%', 0.01))}
    return t_stat, flags


def p_value(t_stat):
    """双侧正态p值"""
    return float(2.0 * stats.norm.sf(abs(t_stat)))

"""
数据生成模块 - 按蒙特卡洛设计生成弱因子面板及增广回归数据，并保留真值供检验使用
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields, replace
from typing import Optional

import numpy as np
import scipy.linalg as la

from errors import RankError, ValidationError
from factor_extraction import sign_by_largest_entry

logger = logging.getLogger(__name__)

DEFAULT_H = ((1.0, 0.5), (0.5, 2.0))


@dataclass
class DgpConfig:
    """
    模拟参数

    Attributes:
        N, T: 截面单位数与时间长度
        r: 潜在因子个数
        p: 可观测回归元个数（最后一列为截距）
        alpha, d: 信号指数α_k与尺度d_k，λ_k = d_k·N^{α_k}
        H: r×r 可逆旋转矩阵，F* = F⁰H⁻¹
        rho_e, sigma_e, theta, s_order: 误差的序列相关、尺度与空间相关参数
        rho_fw, sigma_w: 可观测回归元与因子的相关系数及尺度
        sigma_eps: 回归误差标准差
        gamma0, beta: 回归系数
        seed: 随机种子
        e1_stationary: True时e₁取平稳分布Σ_e^{1/2}ξ₁，否则e₁~N(0, I_N)
        factor_order: 第k个因子位置对应用户输入中的因子编号（从0开始），按信号重新标记后不再是恒等排列
    """

    N: int
    T: int
    r: int
    p: int
    alpha: list
    d: list
    H: list
    rho_e: float = 0.2
    sigma_e: float = 0.5
    theta: float = 0.5
    s_order: int = 2
    rho_fw: float = 0.0
    sigma_w: float = 1.0
    sigma_eps: float = float(np.sqrt(0.5))
    gamma0: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    seed: int = 0
    e1_stationary: bool = False
    factor_order: list = field(default_factory=list)

    def __post_init__(self):
        if not self.factor_order:
            self.factor_order = list(range(int(self.r)))
        self.factor_order = [int(k) for k in self.factor_order]
        self.alpha = [float(a) for a in self.alpha]
        self.d = [float(v) for v in self.d]
        self.H = [[float(v) for v in row] for row in self.H]
        if not self.gamma0:
            self.gamma0 = [1.0] * int(self.r)
        if not self.beta:
            self.beta = [1.0] * int(self.p)
        self.gamma0 = [float(v) for v in self.gamma0]
        self.beta = [float(v) for v in self.beta]

    @classmethod
    def default_design(cls, N=50, T=None, alpha=(1.0, 1.0), d=(0.05, 0.2), rho_fw=0.0, seed=0, **kwargs):
        """
        蒙特卡洛设计的默认参数：r=p=2，H=[[1,.5],[.5,2]]，ρ_e=0.2，σ_e=0.5，θ=0.5，s=2

        Args:
            N: 截面单位数
            T: 时间长度，缺省与N相同
            alpha, d: 信号指数与尺度
            rho_fw: 因子与回归元相关系数
            seed: 随机种子
            kwargs: 其余字段覆盖

        Returns:
            DgpConfig
        """
        values = dict(
            N=N, T=N if T is None else T, r=2, p=2,
            alpha=list(alpha), d=list(d), H=[list(row) for row in DEFAULT_H],
            rho_e=0.2, sigma_e=0.5, theta=0.5, s_order=2,
            rho_fw=rho_fw, sigma_w=1.0, sigma_eps=float(np.sqrt(0.5)),
            gamma0=[1.0, 1.0], beta=[1.0, 1.0], seed=seed,
        )
        values.update(kwargs)
        return cls(**values).sorted_by_signal()

    @classmethod
    def from_dict(cls, data):
        """
        由字典（JSON）构造配置，未知字段视为错误

        Args:
            data: 字段字典

        Returns:
            DgpConfig
        """
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ValidationError('未知的配置字段', field=key)
        for key in ('N', 'T', 'r', 'p', 'alpha', 'd', 'H'):
            if key not in data:
                raise ValidationError('缺少必需字段', field=key)
        try:
            return cls(**data)
        except (TypeError, ValueError) as e:
            raise ValidationError(f'字段类型错误: {e}') from e

    def to_dict(self):
        """转换为可JSON序列化的字典"""
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def signal_eigenvalues(self):
        """λ_k = d_k·N^{α_k}"""
        return np.asarray(self.d) * float(self.N) ** np.asarray(self.alpha)

    def sorted_by_signal(self):
        """
        按λ_k降序重新标记因子：α、d、γ⁰ 同步重排，H 的行与列同步重排，
        模型本身不变；factor_order 记录每个位置对应的原因子编号

        Returns:
            新的DgpConfig
        """
        lam = self.signal_eigenvalues()
        order = np.argsort(-lam, kind='stable')
        if np.array_equal(order, np.arange(self.r)):
            return self
        logger.warning(f"信号特征值未降序 {lam.tolist()}，按λ重新标记因子顺序 {order.tolist()}")
        H = np.asarray(self.H, dtype=float)[np.ix_(order, order)]
        return replace(
            self,
            alpha=[self.alpha[k] for k in order],
            d=[self.d[k] for k in order],
            gamma0=[self.gamma0[k] for k in order],
            H=H.tolist(),
            factor_order=[self.factor_order[k] for k in order],
        )

    def factor_labels(self):
        """各因子位置在用户输入中的名称，如重新标记后为 ['gamma2', 'gamma1']"""
        return [f'gamma{k + 1}' for k in self.factor_order]

    def to_user_order(self, gamma):
        """
        将按因子位置排列的 r 维向量还原为用户输入的因子顺序

        Args:
            gamma: 长度为r的向量

        Returns:
            np.ndarray
        """
        gamma = np.asarray(gamma, dtype=float)
        out = np.empty_like(gamma)
        out[self.factor_order] = gamma
        return out

    def validate(self):
        """
        校验配置，失败时抛出ValidationError并指明字段

        Returns:
            self
        """
        for name in ('N', 'T', 'r', 'p', 's_order'):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ValidationError(f'必须为正整数，当前为 {value}', field=name)
        if self.r > min(self.N, self.T):
            raise ValidationError(f'因子个数 {self.r} 超过 min(N, T)', field='r')
        if len(self.alpha) != self.r:
            raise ValidationError(f'长度应为 r={self.r}', field='alpha')
        if len(self.d) != self.r:
            raise ValidationError(f'长度应为 r={self.r}', field='d')
        if sorted(self.factor_order) != list(range(self.r)):
            raise ValidationError(f'须为 0..{self.r - 1} 的排列', field='factor_order')
        if any(a <= 0 or a > 1 for a in self.alpha):
            raise ValidationError('每个元素须在 (0, 1] 内', field='alpha')
        if any(b > a for a, b in zip(self.alpha, self.alpha[1:])):
            raise ValidationError('必须非增排列', field='alpha')
        if any(v <= 0 for v in self.d):
            raise ValidationError('每个元素须为正', field='d')
        lam = self.signal_eigenvalues()
        if np.any(np.diff(lam) >= 0):
            raise ValidationError(f'信号特征值 λ={lam.tolist()} 未严格降序', field='d')
        H = np.asarray(self.H)
        if H.shape != (self.r, self.r):
            raise ValidationError(f'形状应为 ({self.r}, {self.r})', field='H')
        if not np.isfinite(np.linalg.cond(H)) or np.linalg.cond(H) > 1e12:
            raise ValidationError('矩阵不可逆或条件数过大', field='H')
        if not 0 <= self.rho_e < 1:
            raise ValidationError('须在 [0, 1) 内', field='rho_e')
        if self.sigma_e < 0:
            raise ValidationError('须非负', field='sigma_e')
        if not -1 <= self.rho_fw <= 1:
            raise ValidationError('须在 [-1, 1] 内', field='rho_fw')
        if self.sigma_w <= 0:
            raise ValidationError('须为正', field='sigma_w')
        if self.sigma_eps < 0:
            raise ValidationError('须非负', field='sigma_eps')
        if len(self.gamma0) != self.r:
            raise ValidationError(f'长度应为 r={self.r}', field='gamma0')
        if len(self.beta) != self.p:
            raise ValidationError(f'长度应为 p={self.p}', field='beta')
        if self.N < 2:
            raise ValidationError('空间相关矩阵要求 N ≥ 2', field='N')
        if int(self.seed) != self.seed or self.seed < 0:
            raise ValidationError('须为非负整数', field='seed')
        return self


@dataclass
class GroundTruth:
    """模拟数据的真值"""

    F0: np.ndarray
    B0: np.ndarray
    Fstar: np.ndarray
    Bstar: np.ndarray
    Hmat: np.ndarray
    gamma0: np.ndarray
    gamma_star: np.ndarray
    beta: np.ndarray
    E: np.ndarray
    eps: np.ndarray
    Lambda: np.ndarray


@dataclass
class Dataset:
    """
    观测数据 (X, y, W)，第t行回归元对应响应y[t]（即y_{t+h}已对齐）
    """

    X: np.ndarray
    y: np.ndarray
    W: np.ndarray
    truth: Optional[GroundTruth] = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).ravel()
        self.W = np.asarray(self.W, dtype=float)
        if self.W.ndim == 1:
            self.W = self.W[:, None]
        T = self.X.shape[0]
        if self.X.ndim != 2:
            raise ValidationError('X 必须是二维矩阵', field='X')
        if self.y.shape[0] != T:
            raise ValidationError(f'长度 {self.y.shape[0]} 与 X 的行数 {T} 不一致', field='y')
        if self.W.shape[0] != T:
            raise ValidationError(f'行数 {self.W.shape[0]} 与 X 的行数 {T} 不一致', field='W')
        if not (np.all(np.isfinite(self.X)) and np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.W))):
            raise ValidationError('数据包含非有限值', field='X/y/W')

    @property
    def T(self):
        return self.X.shape[0]

    @property
    def N(self):
        return self.X.shape[1]

    @property
    def p(self):
        return self.W.shape[1]


def build_spatial_corr(N, s_order, theta):
    """
    构造行标准化的s阶rook邻接矩阵导出的空间相关矩阵 R_s

    Args:
        N: 截面单位数
        s_order: 邻接阶数，|i-j| ≤ s 视为邻居
        theta: 空间系数θ

    Returns:
        N×N 相关矩阵
    """
    if N < 2 or s_order < 1:
        raise ValidationError(f'要求 N ≥ 2 且 s ≥ 1，当前 N={N}, s={s_order}', field='s_order')
    if N < s_order + 1:
        logger.warning(f"N={N} < s+1={s_order + 1}，所有单位互为邻居")

    idx = np.arange(N)
    gap = np.abs(idx[:, None] - idx[None, :])
    S = ((gap >= 1) & (gap <= s_order)).astype(float)
    S /= S.sum(axis=1, keepdims=True)

    A = np.eye(N) - theta * S
    M = A @ A.T
    diag = np.diag(M)
    assert np.all(diag > 0), 'Diag(M) 奇异'
    scale = 1.0 / np.sqrt(diag)
    R = M * scale[:, None] * scale[None, :]
    # 对称化并固定单位对角线
    R = 0.5 * (R + R.T)
    np.fill_diagonal(R, 1.0)
    return R


def symmetric_sqrt(S):
    """对称半正定矩阵的对称平方根（特征分解）"""
    w, Q = la.eigh(S)
    w = np.clip(w, 0.0, None)
    root = (Q * np.sqrt(w)) @ Q.T
    return 0.5 * (root + root.T)


def gen_factor_structure(cfg, rng):
    """
    由标准正态矩阵A的奇异值分解生成 F⁰、B⁰ 及旋转后的 F*、B*

    Args:
        cfg: DgpConfig
        rng: numpy Generator

    Returns:
        (F0, B0, Fstar, Bstar, Lambda)
    """
    T, N, r = cfg.T, cfg.N, cfg.r
    U = V = None
    for attempt in range(2):
        A = rng.standard_normal((T, N))
        U, s, Vt = la.svd(A, full_matrices=False)
        if s[r - 1] > 1e-12 * s[0]:
            break
        logger.warning(f"A 的秩不足 (第 {attempt + 1} 次抽样)，重新抽样")
    else:
        raise RankError(f'A 连续两次秩不足 r={r}')

    U, signs = sign_by_largest_entry(U[:, :r])
    V = Vt[:r].T * signs
    Lambda = cfg.signal_eigenvalues()
    F0 = np.sqrt(T) * U
    B0 = V * np.sqrt(Lambda)

    H = np.asarray(cfg.H, dtype=float)
    Fstar = F0 @ np.linalg.inv(H)
    Bstar = B0 @ H.T
    return F0, B0, Fstar, Bstar, Lambda


def gen_errors(cfg, Sigma_e_half, rng):
    """
    生成序列与截面相关的误差 e_t = ρ_e e_{t-1} + (1-ρ_e²)^{1/2} Σ_e^{1/2} ξ_t

    Args:
        cfg: DgpConfig
        Sigma_e_half: Σ_e 的对称平方根
        rng: numpy Generator

    Returns:
        E: T×N，第t行为e_t'
    """
    T, N = cfg.T, cfg.N
    if Sigma_e_half.shape != (N, N):
        raise ValidationError(f'形状应为 ({N}, {N})', field='Sigma_e_half')
    rho = cfg.rho_e
    xi = rng.standard_normal((T, N))
    E = np.empty((T, N))
    if cfg.e1_stationary:
        E[0] = Sigma_e_half @ xi[0]
    else:
        E[0] = xi[0]
    innov = np.sqrt(1.0 - rho ** 2) * (xi[1:] @ Sigma_e_half)
    for t in range(1, T):
        E[t] = rho * E[t - 1] + innov[t - 1]
    return E


def gen_regression(cfg, F0, rng):
    """
    生成可观测回归元W与响应y（y_{t+1}存于第t行）

    Args:
        cfg: DgpConfig
        F0: T×r 因子
        rng: numpy Generator

    Returns:
        (y, W, eps)
    """
    if abs(cfg.rho_fw) > 1:
        raise ValidationError('须在 [-1, 1] 内', field='rho_fw')
    T, r, p = cfg.T, cfg.r, cfg.p
    W = np.ones((T, p))
    if p > 1:
        common = F0.sum(axis=1) / np.sqrt(r)
        zeta = rng.standard_normal((T, p - 1))
        W[:, :p - 1] = cfg.sigma_w * (
            cfg.rho_fw * common[:, None] + np.sqrt(1.0 - cfg.rho_fw ** 2) * zeta
        )
    eps = cfg.sigma_eps * rng.standard_normal(T)
    y = F0 @ np.asarray(cfg.gamma0) + W @ np.asarray(cfg.beta) + eps
    return y, W, eps


def simulate(cfg, rng=None):
    """
    生成一组完整数据

    Args:
        cfg: DgpConfig
        rng: numpy Generator，缺省由cfg.seed构造

    Returns:
        Dataset（含真值）
    """
    cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    F0, B0, Fstar, Bstar, Lambda = gen_factor_structure(cfg, rng)
    R_s = build_spatial_corr(cfg.N, cfg.s_order, cfg.theta)
    Sigma_e_half = symmetric_sqrt(cfg.sigma_e ** 2 * R_s)
    E = gen_errors(cfg, Sigma_e_half, rng)
    y, W, eps = gen_regression(cfg, F0, rng)

    X = F0 @ B0.T + E
    H = np.asarray(cfg.H, dtype=float)
    gamma0 = np.asarray(cfg.gamma0, dtype=float)
    truth = GroundTruth(
        F0=F0, B0=B0, Fstar=Fstar, Bstar=Bstar, Hmat=H,
        gamma0=gamma0, gamma_star=H @ gamma0, beta=np.asarray(cfg.beta, dtype=float),
        E=E, eps=eps, Lambda=Lambda,
    )
    logger.debug(f"模拟数据生成完成: T={cfg.T}, N={cfg.N}, r={cfg.r}, seed={cfg.seed}")
    return Dataset(X=X, y=y, W=W, truth=truth)

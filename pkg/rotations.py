"""
旋转矩阵模块 - 计算 H、Ĥ、Ĥ_q 及对应的伪真参数，附录中的 H̃ 诊断量，以及子样本因子的对齐
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as la

from errors import ConditioningError, DegeneracyError, SingularityError, ValidationError

logger = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass
class RotationSet:
    """
    三种旋转矩阵及其伪真参数 γ_R = R⁻¹γ*

    Attributes:
        H: 总体旋转（依赖真值）
        Hhat: Ĥ
        Hhat_q: Ĥ_q
        gamma0, gamma_Hhat, gamma_Hhat_q: 对应的伪真参数
        gamma_star: γ*
        tildes: H̃ 诊断量（可选）
    """

    H: np.ndarray
    Hhat: np.ndarray
    Hhat_q: np.ndarray
    gamma0: np.ndarray
    gamma_Hhat: np.ndarray
    gamma_Hhat_q: np.ndarray
    gamma_star: np.ndarray
    tildes: Optional['TildeRotations'] = None


@dataclass
class TildeRotations:
    """H̃、H̃_q、H̃_b 及其与单位阵的Frobenius距离"""

    H_tilde: np.ndarray
    H_tilde_q: np.ndarray
    H_tilde_b: np.ndarray

    @property
    def distances(self):
        I = np.eye(self.H_tilde.shape[0])
        return {
            'H_tilde': float(np.linalg.norm(self.H_tilde - I)),
            'H_tilde_q': float(np.linalg.norm(self.H_tilde_q - I)),
            'H_tilde_b': float(np.linalg.norm(self.H_tilde_b - I)),
        }


def _checked_inverse(M, what, cond_limit=COND_LIMIT):
    """求逆，条件数超限时抛出ConditioningError"""
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > cond_limit:
        raise ConditioningError(f'{what} 接近奇异', cond=float(cond))
    return la.inv(M)


def rotation_H(Fstar, Bstar, tol=1e-10):
    """
    唯一（符号固定后）的总体旋转 H = P·V^{-1/2}·Π

    P 为 B*'B*(F*'F*/T) 按特征值降序排列的特征向量，V = P'(F*'F*/T)P。
    这里通过广义对称特征问题 (S A S) x = λ S x 求解（S = F*'F*/T，A = B*'B*），
    归一化 x'Sx = I 即等价于右乘 V^{-1/2}。Π 使 diag(H) 为正。

    Args:
        Fstar: T×r
        Bstar: N×r
        tol: 相邻特征值相对间隔下限

    Returns:
        H: r×r，满足 (F*H)'(F*H)/T = I_r 且 (B*H'⁻¹)'(B*H'⁻¹) 为对角阵
    """
    Fstar = np.asarray(Fstar, dtype=float)
    Bstar = np.asarray(Bstar, dtype=float)
    T = Fstar.shape[0]
    S = Fstar.T @ Fstar / T
    A = Bstar.T @ Bstar
    try:
        la.cholesky(S)
        la.cholesky(A)
    except la.LinAlgError as e:
        raise SingularityError("F*'F*/T 或 B*'B* 非正定") from e

    M = S @ A @ S
    M = 0.5 * (M + M.T)
    evals, vecs = la.eigh(M, S)
    evals = evals[::-1]
    H = vecs[:, ::-1]

    gaps = -np.diff(evals)
    if gaps.size and np.min(gaps) <= tol * abs(evals[0]):
        raise DegeneracyError(f"B*'B*(F*'F*/T) 存在重特征值 {evals.tolist()}，H 不唯一")

    signs = np.sign(np.diag(H))
    signs[signs == 0] = 1.0
    return H * signs


def rotation_Hhat(Fstar, Bstar, pc):
    """
    Ĥ = B*'B*(F*'F̂/T)Λ̂⁻¹

    Args:
        Fstar: T×r
        Bstar: N×r
        pc: PcEstimate

    Returns:
        Ĥ: r×r
    """
    T = Fstar.shape[0]
    if np.any(pc.LambdaHat <= 0):
        raise SingularityError('Λ̂ 奇异')
    return (Bstar.T @ Bstar) @ (Fstar.T @ pc.Fhat / T) / pc.LambdaHat[None, :]


def rotation_Hhat_q(Fstar, pc, cond_limit=COND_LIMIT):
    """
    Ĥ_q = (F̂'F*/T)⁻¹

    Args:
        Fstar: T×r
        pc: PcEstimate
        cond_limit: 条件数上限

    Returns:
        Ĥ_q: r×r
    """
    T = Fstar.shape[0]
    return _checked_inverse(pc.Fhat.T @ Fstar / T, "F̂'F*/T", cond_limit)


def pseudo_true(gamma_star, R, cond_limit=COND_LIMIT):
    """
    伪真参数 γ_R = R⁻¹γ*

    Args:
        gamma_star: 长度r
        R: r×r 可逆矩阵

    Returns:
        长度r向量
    """
    R = np.asarray(R, dtype=float)
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > cond_limit:
        raise SingularityError(f'旋转矩阵奇异 (条件数 {cond:.3e})')
    return la.solve(R, np.asarray(gamma_star, dtype=float))


def tilde_rotations(truth, pc, cond_limit=COND_LIMIT):
    """
    诊断用的 H̃ = B⁰'B⁰(F⁰'F̂/T)Λ̂⁻¹，H̃_q = (F̂'F⁰/T)⁻¹，H̃_b = B⁰'B̂(B̂'B̂)⁻¹

    Args:
        truth: GroundTruth
        pc: PcEstimate

    Returns:
        TildeRotations
    """
    F0, B0 = truth.F0, truth.B0
    T = F0.shape[0]
    H_tilde = (B0.T @ B0) @ (F0.T @ pc.Fhat / T) / pc.LambdaHat[None, :]
    H_tilde_q = _checked_inverse(pc.Fhat.T @ F0 / T, "F̂'F⁰/T", cond_limit)
    BtB = pc.Bhat.T @ pc.Bhat
    H_tilde_b = B0.T @ pc.Bhat @ _checked_inverse(BtB, "B̂'B̂", cond_limit)
    tildes = TildeRotations(H_tilde, H_tilde_q, H_tilde_b)
    logger.debug(f"H̃ 距离: {tildes.distances}")
    return tildes


def _column_correlations(F_ref, F_sub):
    """两组列之间的样本相关系数矩阵 (ref × sub)"""
    a = F_ref - F_ref.mean(axis=0)
    b = F_sub - F_sub.mean(axis=0)
    na = np.linalg.norm(a, axis=0)
    nb = np.linalg.norm(b, axis=0)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValidationError('存在常数列，无法计算相关系数', field='F')
    return (a.T @ b) / np.outer(na, nb)


def align_factors(F_ref, F_sub):
    """
    按相关系数贪心匹配子样本因子的顺序与符号

    每次在未分配的 (ref列, sub列) 中选择 |相关系数| 最大的一对，
    并列时取较小的ref下标。

    Args:
        F_ref: T×r 参照因子
        F_sub: T×r 待对齐因子

    Returns:
        (perm, signs)：对齐后的第k列为 signs[k]·F_sub[:, perm[k]]
    """
    F_ref = np.asarray(F_ref, dtype=float)
    F_sub = np.asarray(F_sub, dtype=float)
    if F_ref.shape != F_sub.shape:
        raise ValidationError(f'形状不一致 {F_ref.shape} vs {F_sub.shape}', field='F_sub')
    r = F_ref.shape[1]
    C = _column_correlations(F_ref, F_sub)
    score = np.abs(C)
    perm = np.full(r, -1, dtype=int)
    signs = np.ones(r)
    for _ in range(r):
        # 行优先展开，argmax 在并列时返回最小的ref下标
        i, j = np.unravel_index(np.argmax(score), score.shape)
        perm[i] = j
        signs[i] = 1.0 if C[i, j] >= 0 else -1.0
        score[i, :] = -1.0
        score[:, j] = -1.0
    return perm, signs


def apply_alignment(F_sub, perm, signs):
    """按 align_factors 的结果重排并调整符号"""
    return F_sub[:, perm] * signs


def compute_rotation_set(Fstar, Bstar, gamma_star, pc, cond_limit=COND_LIMIT):
    """
    计算 RotationSet

    Args:
        Fstar, Bstar: 真实因子与载荷（M_w 变换时传入 M_wF*）
        gamma_star: γ*
        pc: PcEstimate

    Returns:
        RotationSet
    """
    H = rotation_H(Fstar, Bstar)
    Hhat = rotation_Hhat(Fstar, Bstar, pc)
    Hhat_q = rotation_Hhat_q(Fstar, pc, cond_limit)
    gamma_star = np.asarray(gamma_star, dtype=float)
    return RotationSet(
        H=H, Hhat=Hhat, Hhat_q=Hhat_q,
        gamma0=pseudo_true(gamma_star, H, cond_limit),
        gamma_Hhat=pseudo_true(gamma_star, Hhat, cond_limit),
        gamma_Hhat_q=pseudo_true(gamma_star, Hhat_q, cond_limit),
        gamma_star=gamma_star,
    )

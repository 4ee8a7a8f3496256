"""
估计结果报表 - 系数、标准误、t值、显著性标记、R²与 γ₁ = γ₂ 检验
"""
import logging

import numpy as np
import pandas as pd

from errors import NumericalError, ValidationError
from regression import p_value, t_test, wald_linear

logger = logging.getLogger(__name__)

ESTIMATOR_LABELS = {
    'ls': 'LS',
    'bcHhat': 'bc(Ĥ)',
    'bcHhatq': 'bc(Ĥq)',
    'bcjk': 'bcjk',
}


def significance_stars(pval):
    """10% / 5% / 1% 显著性标记"""
    if pval < 0.01:
        return '***'
    if pval < 0.05:
        return '**'
    if pval < 0.10:
        return '*'
    return ''


class EstimateReport:
    """估计结果报表"""

    @staticmethod
    def coefficient_names(r, p, intercept=False):
        names = [f'f{k + 1}' for k in range(r)] + [f'w{j + 1}' for j in range(p)]
        if intercept and p:
            names[-1] = 'const'
        return names

    @staticmethod
    def factor_correlations(W, Fhat):
        """
        W 的非常数列与 F̂ 各列的相关系数

        Returns:
            DataFrame（行为W列，列为因子），W无非常数列时为空
        """
        W = np.asarray(W, dtype=float)
        keep = [j for j in range(W.shape[1]) if np.std(W[:, j]) > 0]
        if not keep:
            return pd.DataFrame()
        corr = np.corrcoef(np.hstack([W[:, keep], Fhat]), rowvar=False)
        block = corr[:len(keep), len(keep):]
        return pd.DataFrame(block, index=[f'w{j + 1}' for j in keep],
                            columns=[f'f{k + 1}' for k in range(Fhat.shape[1])])

    @classmethod
    def build(cls, fit, pc, bcset, W, estimators=('ls', 'bcHhat', 'bcHhatq', 'bcjk'),
              intercept=False, test_equal=False):
        """
        生成报表

        各估计量的t值均使用LS拟合的协方差。

        Args:
            fit: 含协方差的AugmentedFit
            pc: PcEstimate
            bcset: BiasCorrectedSet
            W: T×p
            estimators: 需要列出的估计量（未计算的跳过）
            intercept: W最后一列是否为截距
            test_equal: 是否检验 γ₁ = γ₂

        Returns:
            结果字典：table、r_squared、cov_kind、equal_test、correlations
        """
        names = cls.coefficient_names(fit.r, fit.p, intercept)
        se = fit.std_errors()
        rows = []
        for est in estimators:
            delta = bcset.estimator(est)
            if delta is None:
                continue
            for k, name in enumerate(names):
                try:
                    t_stat, _ = t_test(fit, k, delta=delta)
                    pval = p_value(t_stat)
                except NumericalError:
                    # 残差为零时方差退化
                    t_stat = pval = float('nan')
                rows.append({
                    'estimator': est, 'coefficient': name, 'estimate': float(delta[k]),
                    'std_error': float(se[k]), 't_stat': t_stat, 'p_value': pval,
                    'stars': significance_stars(pval),
                })

        equal_test = None
        if test_equal:
            if fit.r < 2:
                raise ValidationError('γ₁ = γ₂ 检验要求 r ≥ 2', field='test_equal')
            a = np.zeros(fit.r + fit.p)
            a[0], a[1] = 1.0, -1.0
            equal_test = []
            for est in estimators:
                delta = bcset.estimator(est)
                if delta is None:
                    continue
                try:
                    t_stat, flags = wald_linear(fit, a, delta=delta)
                except NumericalError:
                    t_stat = float('nan')
                    flags = {'10%': False, '5%': False, '1%': False}
                equal_test.append({'estimator': est, 't_stat': t_stat, **flags})

        return {
            'table': pd.DataFrame(rows),
            'r_squared': fit.r_squared,
            'cov_kind': fit.cov_kind,
            'bandwidth': fit.bandwidth,
            'T': fit.T,
            'equal_test': pd.DataFrame(equal_test) if equal_test is not None else None,
            'correlations': cls.factor_correlations(W, pc.Fhat),
            'eigenvalues': pc.LambdaHat.tolist(),
        }

    @staticmethod
    def wide_table(table):
        """系数为行、估计量为列的宽表：估计值（含标记）与括号内t值"""
        if table.empty:
            return table
        cells = table.assign(
            cell=lambda d: d['estimate'].map(lambda v: f'{v:.3f}') + d['stars']
            + ' (' + d['t_stat'].map(lambda v: f'{v:.2f}') + ')')
        wide = cells.pivot(index='coefficient', columns='estimator', values='cell')
        order = list(dict.fromkeys(table['coefficient']))
        columns = [c for c in ESTIMATOR_LABELS if c in wide.columns]
        return wide.loc[order, columns].rename(columns=ESTIMATOR_LABELS)

    @classmethod
    def format_text(cls, result):
        """
        文本格式的报表

        Args:
            result: build 返回的结果

        Returns:
            文本
        """
        lines = []
        cov = result['cov_kind'] + (f" (bandwidth={result['bandwidth']})" if result['bandwidth'] is not None else '')
        lines.append(f"T = {result['T']}, R² = {result['r_squared']:.4f}, 协方差: {cov}")
        lines.append(f"特征值 Λ̂: {', '.join(f'{v:.4g}' for v in result['eigenvalues'])}")
        lines.append('')
        lines.append(cls.wide_table(result['table']).to_string())
        lines.append('*** p<0.01, ** p<0.05, * p<0.10；括号内为t值')

        equal = result['equal_test']
        if equal is not None and not equal.empty:
            lines.append('')
            lines.append('H0: γ1 = γ2')
            for _, row in equal.iterrows():
                marks = ''.join('*' for level in ('10%', '5%', '1%') if row[level])
                lines.append(f"  {ESTIMATOR_LABELS[row['estimator']]:8s} t = {row['t_stat']:7.3f}{marks}")

        corr = result['correlations']
        if corr is not None and not corr.empty:
            lines.append('')
            lines.append('W 与 F̂ 的相关系数')
            lines.append(corr.round(3).to_string())
        return '\n'.join(lines)

    @staticmethod
    def get_summary(result):
        """一行摘要"""
        table = result['table']
        n_sig = int((table['stars'] != '').sum()) if not table.empty else 0
        return f"{len(table)} 个系数估计，{n_sig} 个在10%水平显著，R²={result['r_squared']:.3f}"

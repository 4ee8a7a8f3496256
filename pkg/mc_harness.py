"""
蒙特卡洛实验模块 - 按设计网格重复模拟与估计，汇总偏差、标准差、检验水平、参数均值与势函数
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from datetime import datetime
from typing import Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from bias_correction import ESTIMATORS, TARGETS, estimate_all
from covariance import PoetConfig
from dgp import DgpConfig, simulate
from errors import NumericalError, ReplicationDropError, ValidationError
from manifest import RunManifest, config_digest
from regression import CRITICAL_5PCT

logger = logging.getLogger(__name__)

MC_TARGETS = TARGETS + ('beta',)
DEFAULT_DESIGNS = ({'alpha': [1.0, 1.0], 'd': [0.05, 0.2]},)


def coefficient_names(r, p, factor_order=None):
    """δ各位置的系数名；给定factor_order时γ按用户输入的因子编号命名"""
    order = range(r) if factor_order is None else factor_order
    return [f'gamma{k + 1}' for k in order] + [f'beta{k + 1}' for k in range(p)]


def coefficient_index(name, r, p, factor_order=None):
    """'gamma2' / 'beta1' 或整数下标 -> δ中的下标"""
    if isinstance(name, (int, np.integer)):
        index = int(name)
    else:
        names = coefficient_names(r, p, factor_order)
        if name not in names:
            raise ValidationError(f'未知的系数 {name}，可选 {names}', field='coefficient')
        index = names.index(name)
    if not 0 <= index < r + p:
        raise ValidationError(f'下标越界 {index}', field='coefficient')
    return index


@dataclass
class ExperimentSpec:
    """
    实验设计

    Attributes:
        seed: 主随机种子
        nrep: 每个设计单元的重复次数
        designs: [{alpha, d}, ...]
        NT: 样本量列表，元素为整数（N=T）或 [N, T]
        rho_fw: 因子与回归元相关系数列表
        base: 传给 DgpConfig.default_design 的其余字段
        estimators: ls / bcHhat / bcHhatq / bcjk 的子集
        targets: delta0 / delta_Hhat / delta_Hhatq / beta 的子集
        use_mw: 是否使用M_w变换
        power: {'coefficient': 'gamma2', 'grid': [...]}，势函数实验使用
        options: 估计选项覆盖（EstimationOptions字段）
    """

    seed: int = 0
    nrep: int = 1000
    designs: list = field(default_factory=lambda: [dict(d) for d in DEFAULT_DESIGNS])
    NT: list = field(default_factory=lambda: [50])
    rho_fw: list = field(default_factory=lambda: [0.0])
    base: dict = field(default_factory=dict)
    estimators: list = field(default_factory=lambda: list(ESTIMATORS))
    targets: list = field(default_factory=lambda: list(MC_TARGETS))
    use_mw: bool = False
    power: Optional[dict] = None
    options: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data):
        known = set(cls.__dataclass_fields__)
        for key in data:
            if key not in known:
                raise ValidationError('未知的实验字段', field=key)
        spec = cls(**data)
        spec.validate()
        return spec

    @classmethod
    def from_json(cls, path):
        with open(path, 'r', encoding='utf-8') as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ValidationError(f'JSON解析失败 (第 {e.lineno} 行, 第 {e.colno} 列): {e.msg}', field=path) from e
        return cls.from_dict(data)

    def to_dict(self):
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    def validate(self):
        if int(self.nrep) < 1:
            raise ValidationError(f'须 ≥ 1，当前 {self.nrep}', field='nrep')
        for name in ('designs', 'NT', 'rho_fw', 'estimators', 'targets'):
            if not getattr(self, name):
                raise ValidationError('不能为空', field=name)
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise ValidationError(f'未知的估计量 {bad}', field='estimators')
        bad = [t for t in self.targets if t not in MC_TARGETS]
        if bad:
            raise ValidationError(f'未知的目标参数 {bad}', field='targets')
        for design in self.designs:
            if set(design) - {'alpha', 'd'} or 'alpha' not in design:
                raise ValidationError(f'设计须含 alpha 及可选的 d: {design}', field='designs')
        if self.power is not None:
            if 'coefficient' not in self.power or not self.power.get('grid'):
                raise ValidationError('须含 coefficient 与非空 grid', field='power')
        return self

    def cells(self):
        """
        设计单元列表，顺序为 designs × NT × rho_fw

        Returns:
            [(cell_index, DgpConfig), ...]
        """
        out = []
        for design in self.designs:
            for nt in self.NT:
                N, T = (nt, nt) if isinstance(nt, (int, np.integer)) else (nt[0], nt[1])
                for rho in self.rho_fw:
                    kwargs = dict(self.base)
                    kwargs.setdefault('d', design.get('d', [0.05, 0.2]))
                    cfg = DgpConfig.default_design(
                        N=int(N), T=int(T), alpha=design['alpha'], rho_fw=float(rho),
                        seed=int(self.seed), **kwargs)
                    cfg.validate()
                    out.append((len(out), cfg))
        return out


@dataclass
class McSummary:
    """
    实验汇总

    Attributes:
        cells: 每行一个 (单元, 估计量, 目标, 系数)：bias, sd, mcse, size_5pct, quantile95_abs_t, nrep_effective
        parameters: 每个单元伪真参数与 H̃ 距离的均值与标准差
        power: 势函数（原始与水平调整后的拒绝率）
        power_stats: 每个估计量的原假设下95%分位数与不对称统计量
        dropped: 剔除的重复次数
        total: 总重复次数
    """

    cells: pd.DataFrame
    parameters: pd.DataFrame
    power: Optional[pd.DataFrame] = None
    power_stats: Optional[pd.DataFrame] = None
    dropped: int = 0
    total: int = 0
    manifest: Optional[RunManifest] = None

    def lookup(self, estimator, target, coefficient, cell=0):
        """取单个汇总行"""
        rows = self.cells[(self.cells['cell'] == cell) & (self.cells['estimator'] == estimator)
                          & (self.cells['target'] == target) & (self.cells['coefficient'] == coefficient)]
        if rows.empty:
            raise ValidationError(f'无此汇总行 ({cell}, {estimator}, {target}, {coefficient})')
        return rows.iloc[0]

    def write(self, output_dir, float_format='%.6g'):
        """
        写出CSV与运行清单

        Returns:
            写出的文件路径列表
        """
        if not os.path.exists(output_dir):
            os.makedirs(output_dir)
            logger.info(f"创建输出目录: {output_dir}")
        written = []
        tables = (('summary.csv', self.cells), ('parameters.csv', self.parameters),
                  ('power.csv', self.power), ('power_stats.csv', self.power_stats))
        for name, frame in tables:
            if frame is None:
                continue
            path = os.path.join(output_dir, name)
            frame.to_csv(path, index=False, float_format=float_format, lineterminator='\n')
            written.append(path)
            logger.info(f"已写出 {path} ({len(frame)} 行)")
        if self.manifest is not None:
            written.append(self.manifest.write(os.path.join(output_dir, 'manifest.json')))
        return written


def replication_rng(master_seed, cell, rep):
    """
    每次重复的独立随机流：(DGP流, 刀切法流)，由 (主种子, 单元, 重复序号) 唯一确定
    """
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(cell), int(rep)))
    dgp_ss, jk_ss = ss.spawn(2)
    return np.random.default_rng(dgp_ss), np.random.default_rng(jk_ss)


def run_replication(cfg, cell, rep, master_seed, options, estimators):
    """
    单次重复：模拟、估计并记录各估计量、目标参数、标准误与诊断量

    Returns:
        记录字典；数值失败时返回None
    """
    dgp_rng, jk_rng = replication_rng(master_seed, cell, rep)
    try:
        dataset = simulate(cfg, dgp_rng)
        fit, pc, rotations, bcset = estimate_all(dataset, cfg.r, options, rng=jk_rng)
        se = fit.std_errors()
    except NumericalError as e:
        logger.warning(f"[cell {cell} rep {rep}] 估计失败，剔除本次重复: {e}")
        return None
    return {
        'rep': rep,
        'estimates': {name: bcset.estimator(name) for name in estimators},
        'targets': dict(bcset.targets),
        'se': se,
        'params': {
            'gamma0': rotations.gamma0,
            'gamma_Hhat': rotations.gamma_Hhat,
            'gamma_Hhatq': rotations.gamma_Hhat_q,
        },
        'tildes': rotations.tildes.distances if rotations.tildes is not None else {},
    }


def _summarize_errors(errors, tstats):
    errors = np.asarray(errors, dtype=float)
    abs_t = np.abs(np.asarray(tstats, dtype=float))
    n = errors.size
    sd = float(errors.std(ddof=1)) if n > 1 else 0.0
    return {
        'bias': float(errors.mean()),
        'sd': sd,
        'mcse': sd / np.sqrt(n),
        'size_5pct': float(np.mean(abs_t > CRITICAL_5PCT)),
        'quantile95_abs_t': float(np.quantile(abs_t, 0.95)),
        'nrep_effective': int(n),
    }


def _cell_columns(cell, cfg):
    row = {'cell': cell, 'N': cfg.N, 'T': cfg.T, 'rho_fw': cfg.rho_fw}
    for k, (a, d) in enumerate(zip(cfg.to_user_order(cfg.alpha), cfg.to_user_order(cfg.d))):
        row[f'alpha{k + 1}'] = a
        row[f'd{k + 1}'] = d
    return row


def summarize_cell(cell, cfg, records, estimators, targets):
    """
    聚合单元内的重复记录，系数与参数均按用户输入的因子编号报告

    Returns:
        (汇总行列表, 参数行)
    """
    r, p = cfg.r, cfg.p
    names = coefficient_names(r, p, cfg.factor_order)
    base = _cell_columns(cell, cfg)
    rows = []
    for est in estimators:
        values = np.vstack([rec['estimates'][est] for rec in records])
        se = np.vstack([rec['se'] for rec in records])
        for target in targets:
            key = 'delta0' if target == 'beta' else target
            truth = np.vstack([rec['targets'][key] for rec in records])
            coefs = range(r, r + p) if target == 'beta' else range(r + p)
            err = values - truth
            with np.errstate(divide='ignore', invalid='ignore'):
                tstat = err / se
            for k in coefs:
                row = dict(base, estimator=est, target=target, coefficient=names[k])
                row.update(_summarize_errors(err[:, k], tstat[:, k]))
                rows.append(row)

    params = dict(base, nrep_effective=len(records))
    for label in ('gamma0', 'gamma_Hhat', 'gamma_Hhatq'):
        stack = np.vstack([cfg.to_user_order(rec['params'][label]) for rec in records])
        for k in range(r):
            params[f'{label}_{k + 1}_mean'] = float(stack[:, k].mean())
            params[f'{label}_{k + 1}_sd'] = float(stack[:, k].std(ddof=1)) if len(records) > 1 else 0.0
    for label in ('H_tilde', 'H_tilde_q', 'H_tilde_b'):
        dist = np.array([rec['tildes'].get(label, np.nan) for rec in records])
        params[f'dist_{label}_mean'] = float(np.nanmean(dist)) if np.any(np.isfinite(dist)) else float('nan')
    return rows, params


def asymmetry_statistic(grid, rates):
    """max_g |P(g) - P(-g)|，只取网格中正负成对的点"""
    lookup = {round(float(g), 12): float(v) for g, v in zip(grid, rates)}
    diffs = [abs(v - lookup[round(-g, 12)]) for g, v in lookup.items() if g > 0 and round(-g, 12) in lookup]
    return max(diffs) if diffs else float('nan')


class McHarness:
    """蒙特卡洛实验执行器"""

    def __init__(self, config):
        """
        初始化实验执行器

        Args:
            config: Config对象
        """
        self.config = config
        exp = config.get_experiment_config()
        self.n_jobs = exp['n_jobs']
        self.drop_tolerance = exp['drop_tolerance']
        self.output_dir = exp['output_dir']
        self.progress = exp['progress']
        self.float_format = config.get_output_config()['float_format']

    def estimation_options(self, spec):
        """由配置文件与实验中的 options 字段构造估计选项"""
        overrides = dict(spec.options)
        if isinstance(overrides.get('poet'), dict):
            overrides['poet'] = PoetConfig(**overrides['poet'])
        overrides['use_mw'] = spec.use_mw
        overrides['corrections'] = tuple(e for e in spec.estimators if e != 'ls')
        if self.n_jobs != 1:
            # 外层按重复并行时刀切法内部串行
            overrides['jk_n_jobs'] = 1
        return self.config.estimation_options(**overrides)

    def _run_cell(self, cell, cfg, spec, options, desc):
        """对一个设计单元执行全部重复"""
        reps = range(int(spec.nrep))
        bar = tqdm(reps, desc=desc, disable=not self.progress, leave=False)
        if self.n_jobs != 1:
            records = Parallel(n_jobs=self.n_jobs)(
                delayed(run_replication)(cfg, cell, rep, spec.seed, options, spec.estimators)
                for rep in bar)
        else:
            records = [run_replication(cfg, cell, rep, spec.seed, options, spec.estimators)
                       for rep in bar]
        kept = [rec for rec in records if rec is not None]
        return kept, len(records) - len(kept)

    def _check_drops(self, dropped, total):
        logger.info(f"重复完成: 成功 {total - dropped} 次, 剔除 {dropped} 次")
        if total and dropped > self.drop_tolerance * total:
            raise ReplicationDropError(
                f'剔除比例 {dropped}/{total} 超过上限 {self.drop_tolerance:.2%}',
                dropped=dropped, total=total)

    def _manifest(self, command, spec, options, dropped, total):
        manifest = RunManifest(command=command, config_digest=config_digest(spec.to_dict()), seed=spec.seed)
        return manifest.finish(
            spec=spec.to_dict(), cov_kind=options.cov_kind,
            cov_kind_note='t统计量的协方差类型未在设计中指定，缺省使用异方差稳健形式',
            dropped=dropped, total=total,
        )

    def run_experiment(self, spec):
        """
        执行实验并汇总偏差、标准差、5%检验水平与|t|的95%分位数

        Args:
            spec: ExperimentSpec

        Returns:
            McSummary
        """
        spec.validate()
        options = self.estimation_options(spec)
        cells = spec.cells()

        logger.info("=" * 60)
        logger.info("开始执行蒙特卡洛实验")
        logger.info(f"当前时间: {datetime.now().strftime('%Y-%m-%d %H:%M:%S')}")
        logger.info(f"设计单元数量: {len(cells)}, 每单元重复 {spec.nrep} 次, use_mw={spec.use_mw}")

        rows, params = [], []
        dropped = total = 0
        for cell, cfg in cells:
            logger.info(f"[cell {cell}] N={cfg.N}, T={cfg.T}, alpha={cfg.alpha}, rho_fw={cfg.rho_fw}")
            records, n_drop = self._run_cell(cell, cfg, spec, options, desc=f'cell {cell}')
            dropped += n_drop
            total += int(spec.nrep)
            if not records:
                logger.error(f"[cell {cell}] 全部重复失败")
                continue
            cell_rows, cell_params = summarize_cell(cell, cfg, records, spec.estimators, spec.targets)
            rows.extend(cell_rows)
            params.append(cell_params)

        self._check_drops(dropped, total)
        logger.info("=" * 60)
        return McSummary(
            cells=pd.DataFrame(rows), parameters=pd.DataFrame(params),
            dropped=dropped, total=total,
            manifest=self._manifest('mc', spec, options, dropped, total),
        )

    def run_power_curve(self, spec):
        """
        势函数实验：网格值替换δ⁰中被检验的元素，检验该系数为0

        各网格点使用相同的随机流。先由原假设（网格值0）下|t|的95%分位数得到临界值，
        再计算各网格点的原始拒绝率（对1.96）与水平调整后的拒绝率。

        Args:
            spec: 含 power 字段的 ExperimentSpec

        Returns:
            McSummary（power 与 power_stats 非空，cells 为原假设下的汇总）
        """
        spec.validate()
        if spec.power is None:
            raise ValidationError('势函数实验须提供 power 字段', field='power')
        options = self.estimation_options(spec)
        grid = [float(g) for g in spec.power['grid']]
        run_grid = grid if 0.0 in grid else [0.0] + grid

        logger.info("=" * 60)
        logger.info("开始执行势函数实验")
        logger.info(f"检验系数: {spec.power['coefficient']}, 网格点 {len(grid)} 个, 每点重复 {spec.nrep} 次")

        power_rows, stat_rows, rows, params = [], [], [], []
        dropped = total = 0
        for cell, cfg in spec.cells():
            index = coefficient_index(spec.power['coefficient'], cfg.r, cfg.p, cfg.factor_order)
            abs_t = {}
            for g in run_grid:
                point = _with_coefficient(cfg, index, g)
                records, n_drop = self._run_cell(cell, point, spec, options, desc=f'cell {cell} g={g:+.3f}')
                dropped += n_drop
                total += int(spec.nrep)
                if not records:
                    raise ReplicationDropError(f'[cell {cell}] 网格点 {g} 全部重复失败',
                                               dropped=n_drop, total=int(spec.nrep))
                with np.errstate(divide='ignore', invalid='ignore'):
                    for est in spec.estimators:
                        abs_t[(est, g)] = np.array(
                            [abs(rec['estimates'][est][index] / rec['se'][index]) for rec in records])
                if g == 0.0:
                    cell_rows, cell_params = summarize_cell(cell, point, records, spec.estimators, spec.targets)
                    rows.extend(cell_rows)
                    params.append(cell_params)

            base = _cell_columns(cell, cfg)
            for est in spec.estimators:
                critical = float(np.quantile(abs_t[(est, 0.0)], 0.95))
                adjusted = []
                for g in grid:
                    t = abs_t[(est, g)]
                    rate = float(np.mean(t > critical))
                    adjusted.append(rate)
                    power_rows.append(dict(
                        base, estimator=est, coefficient=spec.power['coefficient'], grid=g,
                        reject_raw=float(np.mean(t > CRITICAL_5PCT)), reject_adjusted=rate,
                        nrep_effective=int(t.size)))
                stat_rows.append(dict(
                    base, estimator=est, coefficient=spec.power['coefficient'],
                    critical_value=critical,
                    size_null=float(np.mean(abs_t[(est, 0.0)] > CRITICAL_5PCT)),
                    asymmetry=asymmetry_statistic(grid, adjusted)))
                logger.info(f"[cell {cell}] {est}: 原假设下95%分位数 {critical:.4f}")

        self._check_drops(dropped, total)
        logger.info("=" * 60)
        return McSummary(
            cells=pd.DataFrame(rows), parameters=pd.DataFrame(params),
            power=pd.DataFrame(power_rows), power_stats=pd.DataFrame(stat_rows),
            dropped=dropped, total=total,
            manifest=self._manifest('mc-power', spec, options, dropped, total),
        )


def _with_coefficient(cfg, index, value):
    """返回δ⁰第index个元素替换为value的配置"""
    gamma0 = list(cfg.gamma0)
    beta = list(cfg.beta)
    if index < cfg.r:
        gamma0[index] = value
    else:
        beta[index - cfg.r] = value
    return replace(cfg, gamma0=gamma0, beta=beta)

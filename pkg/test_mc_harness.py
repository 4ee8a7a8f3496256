"""
测试蒙特卡洛实验模块
"""
import json
import os

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

import mc_harness
from config import Config
from errors import ReplicationDropError, ValidationError
from mc_harness import (ExperimentSpec, McHarness, _with_coefficient, asymmetry_statistic, coefficient_index,
                        coefficient_names, replication_rng)

NOISELESS = {'sigma_e': 0.0, 'sigma_eps': 0.0, 'e1_stationary': True}


@pytest.fixture
def config(tmp_path):
    cfg = Config(str(tmp_path / 'config.ini'))
    cfg.config.set('experiment', 'progress', 'false')
    return cfg


def small_spec(**changes):
    values = dict(seed=7, nrep=4, NT=[20], rho_fw=[0.3], options={'jk_replications': 3})
    values.update(changes)
    return ExperimentSpec.from_dict(values)


def test_spec_validation():
    with pytest.raises(ValidationError) as exc:
        ExperimentSpec.from_dict({'nrep': 10, 'replications': 5})
    assert exc.value.field == 'replications'
    with pytest.raises(ValidationError) as exc:
        ExperimentSpec.from_dict({'nrep': 0})
    assert exc.value.field == 'nrep'
    with pytest.raises(ValidationError) as exc:
        ExperimentSpec.from_dict({'estimators': ['ls', 'ols']})
    assert exc.value.field == 'estimators'
    with pytest.raises(ValidationError) as exc:
        ExperimentSpec.from_dict({'power': {'coefficient': 'gamma2', 'grid': []}})
    assert exc.value.field == 'power'


def test_spec_from_json_reports_position(tmp_path):
    path = tmp_path / 'bad.json'
    path.write_text('{"nrep": 10,\n "seed": }', encoding='utf-8')
    with pytest.raises(ValidationError) as exc:
        ExperimentSpec.from_json(str(path))
    assert '第 2 行' in str(exc.value)


def test_shipped_experiments_are_valid():
    root = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'experiments')
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
        if 'nrep' in data:
            ExperimentSpec.from_json(path).cells()


def test_cells_cross_product():
    spec = ExperimentSpec.from_dict({
        'designs': [{'alpha': [1.0, 1.0], 'd': [0.05, 0.2]}, {'alpha': [1.0, 0.8], 'd': [0.2, 0.2]}],
        'NT': [20, [30, 25]], 'rho_fw': [0.0, 0.6],
    })
    cells = spec.cells()
    assert len(cells) == 8
    assert [c for c, _ in cells] == list(range(8))
    _, cfg = cells[3]
    assert (cfg.N, cfg.T, cfg.rho_fw) == (30, 25, 0.6)
    assert cells[0][1].d == [0.2, 0.05]


def test_coefficient_names_and_index():
    assert coefficient_names(2, 2) == ['gamma1', 'gamma2', 'beta1', 'beta2']
    assert coefficient_index('beta1', 2, 2) == 2
    assert coefficient_index(1, 2, 2) == 1
    with pytest.raises(ValidationError):
        coefficient_index('gamma3', 2, 2)
    with pytest.raises(ValidationError):
        coefficient_index(4, 2, 2)


def test_coefficient_names_follow_factor_order():
    assert coefficient_names(2, 1, [1, 0]) == ['gamma2', 'gamma1', 'beta1']
    assert coefficient_index('gamma1', 2, 1, [1, 0]) == 1


def test_relabelled_design_reports_user_order(config):
    # d=(0.05, 0.2) 时第二个输入因子信号更强，内部排在第一位
    spec = small_spec(estimators=['ls'], targets=['delta0'], base={'gamma0': [1.0, 3.0]})
    _, cfg = spec.cells()[0]
    assert cfg.factor_order == [1, 0] and cfg.gamma0 == [3.0, 1.0]
    summary = McHarness(config).run_experiment(spec)
    params = summary.parameters.iloc[0]
    assert params['gamma0_1_mean'] == pytest.approx(1.0)
    assert params['gamma0_2_mean'] == pytest.approx(3.0)
    assert list(params[['alpha1', 'alpha2', 'd1', 'd2']]) == [1.0, 1.0, 0.05, 0.2]
    names = set(summary.cells['coefficient'])
    assert names == {'gamma1', 'gamma2', 'beta1', 'beta2'}


def test_with_coefficient():
    spec = small_spec()
    _, cfg = spec.cells()[0]
    changed = _with_coefficient(cfg, 3, -0.25)
    assert changed.beta == [1.0, -0.25]
    assert changed.gamma0 == cfg.gamma0
    assert _with_coefficient(cfg, 1, 0.0).gamma0 == [1.0, 0.0]


def test_replication_rng_streams():
    a_dgp, a_jk = replication_rng(1, 0, 3)
    b_dgp, b_jk = replication_rng(1, 0, 3)
    assert_array_equal(a_dgp.standard_normal(5), b_dgp.standard_normal(5))
    assert_array_equal(a_jk.standard_normal(5), b_jk.standard_normal(5))
    c_dgp, _ = replication_rng(1, 0, 4)
    d_dgp, _ = replication_rng(1, 1, 3)
    x = replication_rng(1, 0, 3)[0].standard_normal(5)
    assert not np.array_equal(x, c_dgp.standard_normal(5))
    assert not np.array_equal(x, d_dgp.standard_normal(5))


def test_asymmetry_statistic():
    assert asymmetry_statistic([-0.1, 0.0, 0.1, 0.2], [0.3, 0.05, 0.5, 0.9]) == pytest.approx(0.2)
    assert np.isnan(asymmetry_statistic([0.0, 0.1], [0.05, 0.4]))


def test_run_experiment_summary_shape(config):
    summary = McHarness(config).run_experiment(small_spec())
    # 4个估计量 × (3个目标×4个系数 + beta目标×2个系数)
    assert len(summary.cells) == 4 * (3 * 4 + 2)
    assert summary.dropped == 0 and summary.total == 4
    assert set(summary.cells['nrep_effective']) == {4}
    row = summary.lookup('bcjk', 'beta', 'beta1')
    assert np.isfinite(row['bias']) and row['sd'] >= 0
    assert row['mcse'] == pytest.approx(row['sd'] / 2.0)
    assert 0.0 <= row['size_5pct'] <= 1.0
    assert len(summary.parameters) == 1
    assert 'gamma_Hhatq_2_mean' in summary.parameters.columns
    with pytest.raises(ValidationError):
        summary.lookup('ls', 'beta', 'gamma1')


def test_run_experiment_is_deterministic(config):
    spec = small_spec(estimators=['ls', 'bcjk'])
    a = McHarness(config).run_experiment(spec)
    b = McHarness(config).run_experiment(spec)
    pd.testing.assert_frame_equal(a.cells, b.cells)
    pd.testing.assert_frame_equal(a.parameters, b.parameters)


def test_parallel_matches_serial(config):
    spec = small_spec(estimators=['ls', 'bcHhat'])
    serial = McHarness(config).run_experiment(spec)
    config.config.set('experiment', 'n_jobs', '2')
    parallel = McHarness(config).run_experiment(spec)
    pd.testing.assert_frame_equal(serial.cells, parallel.cells, check_exact=False, rtol=1e-10)


def test_noiseless_experiment_has_no_bias(config):
    spec = small_spec(estimators=['ls'], targets=['delta0', 'beta'], base=NOISELESS, rho_fw=[0.0])
    summary = McHarness(config).run_experiment(spec)
    assert np.all(np.abs(summary.cells['bias']) < 1e-8)
    assert np.all(summary.cells['sd'] < 1e-8)


def test_drop_tolerance(config, monkeypatch):
    original = mc_harness.run_replication

    def drop_first(cfg, cell, rep, *args):
        if rep == 0:
            return None
        return original(cfg, cell, rep, *args)

    monkeypatch.setattr(mc_harness, 'run_replication', drop_first)
    spec = small_spec(estimators=['ls'])
    with pytest.raises(ReplicationDropError) as exc:
        McHarness(config).run_experiment(spec)
    assert (exc.value.dropped, exc.value.total) == (1, 4)

    harness = McHarness(config)
    harness.drop_tolerance = 0.5
    summary = harness.run_experiment(spec)
    assert summary.dropped == 1
    assert set(summary.cells['nrep_effective']) == {3}


def test_power_curve(config):
    spec = small_spec(nrep=20, estimators=['ls', 'bcjk'], targets=['delta0'],
                      power={'coefficient': 'gamma2', 'grid': [-0.5, 0.0, 0.5]})
    summary = McHarness(config).run_power_curve(spec)
    assert len(summary.power) == 2 * 3
    assert len(summary.power_stats) == 2
    null = summary.power[summary.power['grid'] == 0.0]
    assert np.all(np.abs(null['reject_adjusted'] - 0.05) <= 1.0 / 20)
    assert np.all((summary.power_stats['asymmetry'] >= 0) & (summary.power_stats['asymmetry'] <= 1))
    assert summary.total == 3 * 20
    assert summary.manifest.command == 'mc-power'


def test_power_curve_adds_null_point(config):
    spec = small_spec(nrep=5, estimators=['ls'], targets=['delta0'],
                      power={'coefficient': 'beta1', 'grid': [0.4]})
    summary = McHarness(config).run_power_curve(spec)
    assert list(summary.power['grid']) == [0.4]
    assert summary.total == 2 * 5
    assert np.isfinite(summary.power_stats['critical_value'].iloc[0])


def test_power_curve_requires_grid(config):
    with pytest.raises(ValidationError):
        McHarness(config).run_power_curve(small_spec())


def test_write_outputs(config, tmp_path):
    summary = McHarness(config).run_experiment(small_spec(estimators=['ls']))
    out = tmp_path / 'results'
    written = summary.write(str(out))
    assert {os.path.basename(p) for p in written} == {'summary.csv', 'parameters.csv', 'manifest.json'}
    frame = pd.read_csv(out / 'summary.csv')
    assert list(frame.columns[:4]) == ['cell', 'N', 'T', 'rho_fw']
    with open(out / 'manifest.json', encoding='utf-8') as f:
        manifest = json.load(f)
    assert manifest['command'] == 'mc'
    assert manifest['seed'] == 7
    assert manifest['config_digest'].startswith('sha256:')


def load_shipped(name, **changes):
    path = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'experiments', name)
    with open(path, encoding='utf-8') as f:
        data = json.load(f)
    data.update(changes)
    return ExperimentSpec.from_dict(data)


def size_band(nrep):
    """名义5%水平下拒绝率的 2 倍蒙特卡洛标准误"""
    return 2.0 * np.sqrt(0.05 * 0.95 / nrep)


# (α₁, α₂) = (0.8, 0.6)，N = T = 100，ρ_fw = 0.6 时原假设下的拒绝率与 |t| 的95%分位数
NULL_SIZES = {
    'gamma2': {'ls': (0.061, 2.06), 'bcjk': (0.079, 2.15), 'bcHhatq': (0.064, 2.04), 'bcHhat': (0.100, 2.28)},
    'beta1': {'ls': (0.073, 2.14), 'bcjk': (0.051, 1.97), 'bcHhatq': (0.052, 1.97), 'bcHhat': (0.052, 1.97)},
}


@pytest.mark.slow
def test_pseudo_true_parameter_means(config):
    summary = McHarness(config).run_experiment(load_shipped('parameter_means.json'))
    params = summary.parameters.iloc[0]
    expected = {'gamma0': (1.0, 1.0), 'gamma_Hhat': (1.27, 1.07), 'gamma_Hhatq': (0.94, 0.99)}
    for label, values in expected.items():
        for k, value in enumerate(values):
            assert params[f'{label}_{k + 1}_mean'] == pytest.approx(value, abs=0.05), label


@pytest.mark.slow
@pytest.mark.parametrize('name, coefficient', [('size_power_gamma2.json', 'gamma2'),
                                               ('size_power_beta1.json', 'beta1')])
def test_null_sizes_and_quantiles(config, name, coefficient):
    spec = load_shipped(name, power={'coefficient': coefficient, 'grid': [0.0]})
    stats = McHarness(config).run_power_curve(spec).power_stats.set_index('estimator')
    for est, (size, quantile) in NULL_SIZES[coefficient].items():
        assert stats.loc[est, 'size_null'] == pytest.approx(size, abs=0.015), est
        assert stats.loc[est, 'critical_value'] == pytest.approx(quantile, abs=0.10), est
    if coefficient == 'beta1':
        for est in ('bcjk', 'bcHhatq', 'bcHhat'):
            assert abs(stats.loc[est, 'size_null'] - 0.05) <= size_band(spec.nrep), est


@pytest.mark.slow
def test_default_design_beta_size(config):
    nrep = 500
    spec = ExperimentSpec.from_dict({'seed': 1, 'nrep': nrep, 'NT': [50], 'rho_fw': [0.0],
                                     'estimators': ['ls', 'bcjk'], 'targets': ['beta'],
                                     'options': {'jk_replications': 20}})
    summary = McHarness(config).run_experiment(spec)
    for est in ('ls', 'bcjk'):
        for coef in ('beta1', 'beta2'):
            size = summary.lookup(est, 'beta', coef)['size_5pct']
            assert abs(size - 0.05) <= size_band(nrep), (est, coef)


@pytest.mark.slow
def test_hq_target_bias_not_larger_than_hhat(config):
    spec = load_shipped('design_grid.json', NT=[50], estimators=['ls'], targets=['delta_Hhat', 'delta_Hhatq'])
    summary = McHarness(config).run_experiment(spec)
    cells = summary.cells[summary.cells['coefficient'] == 'gamma2']
    assert cells['cell'].nunique() == 6
    for cell, group in cells.groupby('cell'):
        rows = group.set_index('target')
        q, h = rows.loc['delta_Hhatq'], rows.loc['delta_Hhat']
        assert abs(q['bias']) <= abs(h['bias']) + 2 * max(q['mcse'], h['mcse']), cell


@pytest.mark.slow
def test_mw_beta_bias_vanishes(config):
    spec = ExperimentSpec.from_dict({'seed': 5, 'nrep': 1000, 'designs': [{'alpha': [0.8, 0.6], 'd': [0.2, 0.2]}],
                                     'NT': [50], 'rho_fw': [0.6], 'estimators': ['ls'],
                                     'targets': ['delta_Hhatq'], 'use_mw': True})
    summary = McHarness(config).run_experiment(spec)
    for coef in ('beta1', 'beta2'):
        row = summary.lookup('ls', 'delta_Hhatq', coef)
        assert abs(row['bias']) <= 3 * row['mcse'], coef


@pytest.mark.slow
def test_bias_correction_reduces_bias(config):
    spec = ExperimentSpec.from_dict({'seed': 2, 'nrep': 500, 'designs': [{'alpha': [0.8, 0.6], 'd': [0.2, 0.2]}],
                                     'NT': [50, 100], 'rho_fw': [0.6],
                                     'estimators': ['ls', 'bcjk', 'bcHhatq'], 'targets': ['delta0', 'beta'],
                                     'options': {'jk_replications': 20}})
    summary = McHarness(config).run_experiment(spec)
    for cell in (0, 1):
        for target, coef in (('delta0', 'gamma2'), ('beta', 'beta1')):
            ls = abs(summary.lookup('ls', target, coef, cell=cell)['bias'])
            jk = summary.lookup('bcjk', target, coef, cell=cell)
            assert abs(jk['bias']) < ls - 2 * jk['mcse'], (cell, coef)
    # 解析校正只对β有参照值 β⁰
    ls = abs(summary.lookup('ls', 'beta', 'beta1', cell=1)['bias'])
    bc = summary.lookup('bcHhatq', 'beta', 'beta1', cell=1)
    assert abs(bc['bias']) < ls - 2 * bc['mcse']

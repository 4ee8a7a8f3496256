"""
pytest 公共配置：slow 标记与共用的小数据集
"""
import numpy as np
import pytest

from dgp import Dataset, DgpConfig, simulate


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='运行耗时的蒙特卡洛验收测试')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: 耗时的蒙特卡洛验收测试，需 --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='需要 --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)


def noiseless_config(N=20, T=30, r=2, seed=3, **kwargs):
    """无噪声配置：平稳初值、σ_e = 0、σ_ε = 0"""
    values = dict(alpha=[1.0] * r, d=[0.5 * (r - k) for k in range(r)],
                  H=np.eye(r).tolist() if r != 2 else [[1.0, 0.5], [0.5, 2.0]],
                  sigma_e=0.0, sigma_eps=0.0, e1_stationary=True)
    values.update(kwargs)
    return DgpConfig(N=N, T=T, r=r, p=2, seed=seed, **values)


@pytest.fixture
def design_dataset():
    """N=T=50 的标准设计，ρ_fw = 0.6"""
    cfg = DgpConfig.default_design(N=50, rho_fw=0.6, seed=5)
    return simulate(cfg)


@pytest.fixture
def small_dataset():
    """小规模含噪声数据，r=2"""
    cfg = DgpConfig.default_design(N=24, T=40, rho_fw=0.3, seed=9)
    return simulate(cfg)


@pytest.fixture
def noiseless_dataset():
    return simulate(noiseless_config())


@pytest.fixture
def noiseless_dataset_r1():
    return simulate(noiseless_config(r=1, seed=4))


def make_dataset(X, y, W):
    return Dataset(X=X, y=y, W=W)

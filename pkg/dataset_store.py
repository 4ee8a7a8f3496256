"""
数据存储模块 - 负责数据集（X、y、W及真值）的CSV导出与读取
"""
import json
import logging
import os

import numpy as np
import pandas as pd

from dgp import Dataset, DgpConfig, GroundTruth
from errors import ValidationError

logger = logging.getLogger(__name__)

DATA_FLOAT_FORMAT = '%.17g'
TRUTH_FIELDS = ('F0', 'B0', 'Fstar', 'Bstar', 'Hmat', 'gamma0', 'gamma_star', 'beta', 'E', 'eps', 'Lambda')


def _write_csv(frame, path):
    frame.to_csv(path, index=False, float_format=DATA_FLOAT_FORMAT, lineterminator='\n', encoding='utf-8')


def _read_csv(path):
    return pd.read_csv(path, float_precision='round_trip', encoding='utf-8')


def truth_to_frame(truth):
    """
    真值转为长表 (object, row, col, value)，向量的 col 为0
    """
    parts = []
    for name in TRUTH_FIELDS:
        arr = np.asarray(getattr(truth, name), dtype=float)
        mat = arr.reshape(-1, 1) if arr.ndim == 1 else arr
        rows, cols = np.indices(mat.shape)
        parts.append(pd.DataFrame({
            'object': name, 'row': rows.ravel(), 'col': cols.ravel(), 'value': mat.ravel(),
        }))
    return pd.concat(parts, ignore_index=True)


def truth_from_frame(frame):
    """长表还原为GroundTruth"""
    values = {}
    for name in TRUTH_FIELDS:
        part = frame[frame['object'] == name]
        if part.empty:
            raise ValidationError('真值文件缺少对象', field=name)
        shape = (int(part['row'].max()) + 1, int(part['col'].max()) + 1)
        mat = np.zeros(shape)
        mat[part['row'].to_numpy(int), part['col'].to_numpy(int)] = part['value'].to_numpy(float)
        is_vector = name in ('gamma0', 'gamma_star', 'beta', 'eps', 'Lambda')
        values[name] = mat[:, 0] if is_vector else mat
    return GroundTruth(**values)


def split_columns(frame):
    """
    单个CSV按列名拆分：y 为响应，w* 为可观测回归元，x* 为面板

    Returns:
        (X, y, W)，W可能为 T×0
    """
    columns = [str(c) for c in frame.columns]
    if 'y' not in columns:
        raise ValidationError('缺少 y 列', field='y')
    w_cols = [c for c in columns if c.lower().startswith('w')]
    x_cols = [c for c in columns if c.lower().startswith('x')]
    other = [c for c in columns if c not in w_cols + x_cols + ['y']]
    if other:
        raise ValidationError(f'无法识别的列 {other}（应为 y / w* / x*）', field='columns')
    if not x_cols:
        raise ValidationError('缺少 x* 列', field='X')
    if frame.isna().any().any():
        raise ValidationError('包含缺失值', field='columns')
    X = frame[x_cols].to_numpy(float)
    y = frame['y'].to_numpy(float)
    W = frame[w_cols].to_numpy(float) if w_cols else np.empty((len(frame), 0))
    return X, y, W


def apply_horizon(X, y, W, h):
    """
    预测步长：第t期回归元对应 y_{t+h}

    Returns:
        (X, y, W) 截去后的样本
    """
    h = int(h)
    T = X.shape[0]
    if h < 0:
        raise ValidationError(f'须非负，当前 {h}', field='horizon')
    if h >= T:
        raise ValidationError(f'步长 {h} 不小于样本长度 T={T}', field='horizon')
    if h == 0:
        return X, y, W
    return X[:T - h], y[h:], W[:T - h]


class DatasetStore:
    """数据集存储类"""

    def __init__(self, config):
        """
        初始化数据存储

        Args:
            config: Config对象
        """
        self.config = config
        self.data_dir = config.get_output_config()['data_dir']

    def resolve(self, target):
        """相对名称放在 data_dir 下，路径原样使用"""
        if os.path.isabs(target) or os.path.dirname(target):
            return target
        return os.path.join(self.data_dir, target)

    def save(self, dataset, target, dgp_config=None):
        """
        保存数据集：X.csv、yW.csv，含真值时写 truth.csv，给出配置时写 dgp.json

        Args:
            dataset: Dataset
            target: 目录名或路径
            dgp_config: DgpConfig

        Returns:
            写出的文件路径列表
        """
        directory = self.resolve(target)
        if not os.path.exists(directory):
            os.makedirs(directory)
            logger.info(f"创建数据目录: {directory}")

        T, N, p = dataset.T, dataset.N, dataset.p
        files = []
        X = pd.DataFrame(dataset.X, columns=[f'x{i + 1}' for i in range(N)])
        path = os.path.join(directory, 'X.csv')
        _write_csv(X, path)
        files.append(path)

        yW = pd.DataFrame(dataset.W, columns=[f'w{j + 1}' for j in range(p)])
        yW.insert(0, 'y', dataset.y)
        path = os.path.join(directory, 'yW.csv')
        _write_csv(yW, path)
        files.append(path)

        if dataset.truth is not None:
            path = os.path.join(directory, 'truth.csv')
            _write_csv(truth_to_frame(dataset.truth), path)
            files.append(path)

        if dgp_config is not None:
            path = os.path.join(directory, 'dgp.json')
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(dgp_config.to_dict(), f, indent=2, sort_keys=True)
                f.write('\n')
            files.append(path)

        logger.info(f"数据集已保存: {directory} (T={T}, N={N}, p={p}, 文件 {len(files)} 个)")
        return files

    def load(self, source):
        """
        读取数据集：目录（X.csv + yW.csv [+ truth.csv]）或单个CSV（y, w*, x* 列）

        Args:
            source: 目录或CSV路径

        Returns:
            Dataset
        """
        path = self.resolve(source) if not os.path.exists(source) else source
        if os.path.isfile(path):
            X, y, W = split_columns(_read_csv(path))
            logger.info(f"读取数据文件: {path} (T={X.shape[0]}, N={X.shape[1]}, p={W.shape[1]})")
            return Dataset(X=X, y=y, W=W)

        if not os.path.isdir(path):
            raise ValidationError(f'数据路径不存在: {path}', field='data')
        x_path = os.path.join(path, 'X.csv')
        yw_path = os.path.join(path, 'yW.csv')
        for required in (x_path, yw_path):
            if not os.path.exists(required):
                raise ValidationError(f'缺少文件 {required}', field='data')

        X = _read_csv(x_path)
        yW = _read_csv(yw_path)
        if len(X) != len(yW):
            raise ValidationError(f'X.csv 与 yW.csv 行数不一致 ({len(X)} vs {len(yW)})', field='data')
        frame = pd.concat([yW, X], axis=1)
        X_arr, y, W = split_columns(frame)

        truth = None
        truth_path = os.path.join(path, 'truth.csv')
        if os.path.exists(truth_path):
            truth = truth_from_frame(_read_csv(truth_path))
        logger.info(f"读取数据集: {path} (T={X_arr.shape[0]}, N={X_arr.shape[1]}, 真值: {truth is not None})")
        return Dataset(X=X_arr, y=y, W=W, truth=truth)

    def load_dgp_config(self, source):
        """读取目录中的 dgp.json，不存在时返回None"""
        path = os.path.join(self.resolve(source) if not os.path.exists(source) else source, 'dgp.json')
        if not os.path.exists(path):
            return None
        with open(path, 'r', encoding='utf-8') as f:
            return DgpConfig.from_dict(json.load(f))

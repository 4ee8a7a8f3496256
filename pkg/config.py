"""
配置文件读取模块
"""
import configparser
import logging
import os

from errors import ValidationError

logger = logging.getLogger(__name__)


class Config:
    """配置管理类"""

    def __init__(self, config_file='config.ini'):
        self.config_file = config_file
        self.config = configparser.ConfigParser()
        self.load_config()

    def load_config(self):
        """加载配置文件"""
        if os.path.exists(self.config_file):
            self.config.read(self.config_file, encoding='utf-8')
        else:
            # 创建默认配置
            self.create_default_config()

    def create_default_config(self):
        """创建默认配置文件"""
        self.config['logging'] = {
            'log_dir': 'logs',
            'log_file': 'factor_bc.log',
            'level': 'INFO',
            'backup_count': '30'
        }
        self.config['estimation'] = {
            'r': '2',
            'cov_kind': 'hetero',
            'hac_bandwidth': '-1',
            'eigen_gap_tol': '1e-10',
            'rank_tol': '1e-10',
            'cond_limit': '1e12'
        }
        self.config['poet'] = {
            'threshold_const': '0.5',
            'kind': 'hard',
            'enforce_psd': 'true',
            'signal_rate': 'true'
        }
        self.config['jackknife'] = {
            'replications': '100',
            'redraw_factor': '10',
            'n_jobs': '1'
        }
        self.config['experiment'] = {
            'n_jobs': '1',
            'drop_tolerance': '0.01',
            'output_dir': 'results',
            'progress': 'true'
        }
        self.config['output'] = {
            # ConfigParser插值语法要求转义%
            'float_format': '%%.6g',
            'data_dir': 'data'
        }
        self.save_config()

    def save_config(self):
        """保存配置文件"""
        with open(self.config_file, 'w', encoding='utf-8') as f:
            self.config.write(f)

    def get_logging_config(self):
        """获取日志配置"""
        return {
            'log_dir': self.config.get('logging', 'log_dir', fallback='logs'),
            'log_file': self.config.get('logging', 'log_file', fallback='factor_bc.log'),
            'level': self.config.get('logging', 'level', fallback='INFO').upper(),
            'backup_count': self.config.getint('logging', 'backup_count', fallback=30)
        }

    def get_estimation_config(self):
        """获取估计配置"""
        return {
            'r': self.config.getint('estimation', 'r', fallback=2),
            'cov_kind': self.config.get('estimation', 'cov_kind', fallback='hetero'),
            'hac_bandwidth': self.config.getint('estimation', 'hac_bandwidth', fallback=-1),
            'eigen_gap_tol': self.config.getfloat('estimation', 'eigen_gap_tol', fallback=1e-10),
            'rank_tol': self.config.getfloat('estimation', 'rank_tol', fallback=1e-10),
            'cond_limit': self.config.getfloat('estimation', 'cond_limit', fallback=1e12)
        }

    def get_poet_config(self):
        """获取POET协方差配置"""
        return {
            'threshold_const': self.config.getfloat('poet', 'threshold_const', fallback=0.5),
            'kind': self.config.get('poet', 'kind', fallback='hard'),
            'enforce_psd': self.config.getboolean('poet', 'enforce_psd', fallback=True),
            'signal_rate': self.config.getboolean('poet', 'signal_rate', fallback=True)
        }

    def get_jackknife_config(self):
        """获取刀切法配置"""
        return {
            'replications': self.config.getint('jackknife', 'replications', fallback=100),
            'redraw_factor': self.config.getint('jackknife', 'redraw_factor', fallback=10),
            'n_jobs': self.config.getint('jackknife', 'n_jobs', fallback=1)
        }

    def get_experiment_config(self):
        """获取蒙特卡洛实验配置"""
        return {
            'n_jobs': self.config.getint('experiment', 'n_jobs', fallback=1),
            'drop_tolerance': self.config.getfloat('experiment', 'drop_tolerance', fallback=0.01),
            'output_dir': self.config.get('experiment', 'output_dir', fallback='results'),
            'progress': self.config.getboolean('experiment', 'progress', fallback=True)
        }

    def get_output_config(self):
        """获取输出配置"""
        return {
            'float_format': self.config.get('output', 'float_format', fallback='%.6g'),
            'data_dir': self.config.get('output', 'data_dir', fallback='data')
        }

    def poet_config(self):
        """
        由配置文件构造PoetConfig

        Returns:
            PoetConfig对象
        """
        from covariance import PoetConfig

        return PoetConfig(**self.get_poet_config())

    def estimation_options(self, **overrides):
        """
        由配置文件构造估计选项，命令行参数可逐项覆盖

        Args:
            overrides: 需要覆盖的字段（值为None的项忽略）

        Returns:
            EstimationOptions对象
        """
        from bias_correction import EstimationOptions

        est = self.get_estimation_config()
        jk = self.get_jackknife_config()
        values = {
            'r': est['r'],
            'poet': self.poet_config(),
            'jk_replications': jk['replications'],
            'jk_redraw_factor': jk['redraw_factor'],
            'jk_n_jobs': jk['n_jobs'],
            'use_mw': False,
            'cov_kind': est['cov_kind'],
            'hac_bandwidth': None if est['hac_bandwidth'] < 0 else est['hac_bandwidth'],
            'eigen_gap_tol': est['eigen_gap_tol'],
            'rank_tol': est['rank_tol'],
            'cond_limit': est['cond_limit'],
            'corrections': ('bcHhat', 'bcHhatq', 'bcjk'),
            'seed': 0,
        }
        for key, value in overrides.items():
            if key not in values:
                raise ValidationError('未知的估计选项', field=key)
            if value is not None:
                values[key] = value
        logger.debug(f"估计选项: {values}")
        return EstimationOptions(**values)

"""
命令行入口 - simulate / estimate / mc 三个子命令
"""
import argparse
import json
import logging
import logging.handlers
import os
import sys

import numpy as np

from bias_correction import CORRECTIONS, estimate_all
from config import Config
from covariance import PoetConfig
from dataset_store import DatasetStore, apply_horizon
from dgp import Dataset, DgpConfig, simulate
from errors import FactorBcError, ValidationError
from factor_extraction import standardize
from manifest import VERSION, RunManifest, config_digest
from mc_harness import ExperimentSpec, McHarness
from regression import normalize_cov_kind
from report import EstimateReport

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DATE_FORMAT = '%Y-%m-%d %H:%M:%S'


def setup_logging(config, level=None):
    """
    配置根日志记录器：按日期轮转的文件处理器加控制台处理器

    Args:
        config: Config对象
        level: 覆盖配置文件中的日志级别

    Returns:
        日志文件路径
    """
    log_config = config.get_logging_config()
    log_dir = log_config['log_dir']
    # 确保日志目录存在
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    level = getattr(logging, (level or log_config['level']).upper(), logging.INFO)
    root_logger = logging.getLogger()
    root_logger.setLevel(level)
    # 清除已有的处理器
    for handler in list(root_logger.handlers):
        root_logger.removeHandler(handler)
        handler.close()

    log_file = os.path.join(log_dir, log_config['log_file'])
    file_handler = logging.handlers.TimedRotatingFileHandler(
        log_file,
        when='midnight',
        interval=1,
        backupCount=log_config['backup_count'],
        encoding='utf-8'
    )
    file_handler.setLevel(level)
    file_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))

    console_handler = logging.StreamHandler()
    console_handler.setLevel(level)
    console_handler.setFormatter(logging.Formatter(LOG_FORMAT, DATE_FORMAT))

    root_logger.addHandler(file_handler)
    root_logger.addHandler(console_handler)
    return log_file


def _read_json(path):
    """读取JSON，解析错误带行列号"""
    if not os.path.exists(path):
        raise ValidationError(f'文件不存在: {path}', field='config')
    with open(path, 'rb') as f:
        raw = f.read()
    try:
        return json.loads(raw.decode('utf-8')), raw
    except json.JSONDecodeError as e:
        raise ValidationError(f'JSON解析失败 (第 {e.lineno} 行, 第 {e.colno} 列): {e.msg}', field=path) from e


def parse_corrections(text):
    """'bcHhat,bcjk' / 'all' / 'none' -> tuple"""
    if text is None:
        return None
    text = text.strip()
    if text.lower() == 'all':
        return CORRECTIONS
    if text.lower() == 'none':
        return ()
    items = tuple(item.strip() for item in text.split(',') if item.strip())
    bad = [item for item in items if item not in CORRECTIONS]
    if bad:
        raise ValidationError(f'未知的校正方法 {bad}，可选 {CORRECTIONS}', field='corrections')
    return items


def has_constant_column(W):
    W = np.asarray(W, dtype=float)
    return any(np.ptp(W[:, j]) == 0 and W[0, j] != 0 for j in range(W.shape[1]))


def prepare_dataset(dataset, horizon=0, intercept=True, standardize_x=False):
    """
    按命令行选项整理数据：步长对齐、标准化、追加截距列

    只有在数据未被改动时保留真值。

    Returns:
        (Dataset, 是否含截距)
    """
    X, y, W = apply_horizon(dataset.X, dataset.y, dataset.W, horizon)
    changed = horizon > 0
    if standardize_x:
        X = standardize(X)
        changed = True
    has_const = W.shape[1] > 0 and has_constant_column(W)
    if intercept and not has_const:
        W = np.hstack([W, np.ones((W.shape[0], 1))])
        has_const = True
        changed = True
        logger.info("W 中追加截距列")
    truth = None if changed else dataset.truth
    return Dataset(X=X, y=y, W=W, truth=truth), has_const


def cmd_simulate(args, config):
    """生成模拟数据并写出CSV与运行清单"""
    data, raw = _read_json(args.config_path)
    cfg = DgpConfig.from_dict(data)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    cfg = cfg.sorted_by_signal()
    manifest = RunManifest(command='simulate', config_digest=config_digest(raw), seed=cfg.seed)

    logger.info(f"开始生成模拟数据: N={cfg.N}, T={cfg.T}, r={cfg.r}, seed={cfg.seed}")
    dataset = simulate(cfg)
    store = DatasetStore(config)
    out = args.out or os.path.splitext(os.path.basename(args.config_path))[0]
    files = store.save(dataset, out, cfg)
    manifest.finish(files=[os.path.basename(f) for f in files])
    manifest.write(os.path.join(store.resolve(out), 'manifest.json'))
    print(f"已生成数据集: {store.resolve(out)}")
    return 0


def estimation_overrides(args, config):
    """命令行参数 -> 估计选项覆盖"""
    poet = None
    if args.poet_c is not None:
        base = config.get_poet_config()
        base['threshold_const'] = args.poet_c
        poet = PoetConfig(**base)
    return {
        'r': args.r,
        'cov_kind': normalize_cov_kind(args.cov),
        'hac_bandwidth': args.bandwidth,
        'poet': poet,
        'jk_replications': args.jk_R,
        'jk_n_jobs': args.threads,
        'use_mw': args.use_mw,
        'corrections': parse_corrections(args.corrections),
        'seed': args.seed,
    }


def run_estimate(dataset, options, intercept=False, test_equal=False):
    """
    在内存数据上执行估计并生成报表

    Returns:
        (报表结果, BiasCorrectedSet)
    """
    fit, pc, rotations, bcset = estimate_all(dataset, options.r, options)
    result = EstimateReport.build(fit, pc, bcset, dataset.W, intercept=intercept, test_equal=test_equal)
    return result, bcset


def cmd_estimate(args, config):
    """对CSV数据估计增广回归并输出报表"""
    store = DatasetStore(config)
    raw_dataset = store.load(args.data_path)
    dataset, intercept = prepare_dataset(raw_dataset, args.horizon, not args.no_intercept, args.standardize)
    options = config.estimation_options(**estimation_overrides(args, config))
    if options.use_mw:
        logger.info("使用 M_w 变换提取因子")

    result, bcset = run_estimate(dataset, options, intercept=intercept, test_equal=args.test_equal)
    print(EstimateReport.format_text(result))
    logger.info(EstimateReport.get_summary(result))

    if args.out:
        if not os.path.exists(args.out):
            os.makedirs(args.out)
        float_format = config.get_output_config()['float_format']
        result['table'].to_csv(os.path.join(args.out, 'estimates.csv'), index=False,
                               float_format=float_format, lineterminator='\n')
        if result['equal_test'] is not None:
            result['equal_test'].to_csv(os.path.join(args.out, 'equal_test.csv'), index=False,
                                        float_format=float_format, lineterminator='\n')
        settings = {key: str(value) for key, value in vars(args).items() if key != 'func'}
        manifest = RunManifest(command='estimate', config_digest=config_digest(settings), seed=options.seed)
        manifest.finish(options={k: str(v) for k, v in vars(options).items()},
                        jk_redraws=bcset.jk_meta.redraws if bcset.jk_meta else None)
        manifest.write(os.path.join(args.out, 'manifest.json'))
    return 0


def cmd_mc(args, config):
    """执行蒙特卡洛实验并写出汇总CSV"""
    data, raw = _read_json(args.spec_path)
    spec = ExperimentSpec.from_dict(data)
    if args.seed is not None:
        spec.seed = int(args.seed)
    if args.nrep is not None:
        spec.nrep = int(args.nrep)

    harness = McHarness(config)
    if args.threads is not None:
        harness.n_jobs = int(args.threads)
    if args.quiet:
        harness.progress = False

    if spec.power is not None and not args.no_power:
        summary = harness.run_power_curve(spec)
    else:
        summary = harness.run_experiment(spec)

    summary.manifest.config_digest = config_digest(raw)
    out = args.out or os.path.join(harness.output_dir, os.path.splitext(os.path.basename(args.spec_path))[0])
    summary.write(out, harness.float_format)
    print(f"实验完成: 有效重复 {summary.total - summary.dropped}/{summary.total}，结果目录 {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='factor-bc', description='弱因子增广回归的估计与偏差校正')
    parser.add_argument('--version', action='version', version=f'factor-bc {VERSION}')
    parser.add_argument('--config', default='config.ini', help='INI配置文件')
    parser.add_argument('--log-level', default=None, help='DEBUG / INFO / WARNING')
    parser.add_argument('--quiet', action='store_true', help='只输出警告及以上日志，关闭进度条')
    sub = parser.add_subparsers(dest='command', required=True)

    p_sim = sub.add_parser('simulate', help='按JSON配置生成模拟数据')
    p_sim.add_argument('config_path')
    p_sim.add_argument('--out', help='输出目录（相对名称放在 data_dir 下）')
    p_sim.add_argument('--seed', type=int)
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser('estimate', help='估计增广回归')
    p_est.add_argument('data_path', help='数据目录或单个CSV（y, w*, x* 列）')
    p_est.add_argument('--r', type=int)
    p_est.add_argument('--horizon', type=int, default=0, help='以 y_{t+h} 对第t期回归元回归')
    p_est.add_argument('--corrections', help="逗号分隔的 bcHhat,bcHhatq,bcjk，或 all / none")
    p_est.add_argument('--use-mw', action='store_true')
    p_est.add_argument('--cov', default='hac', help='homoskedastic / hetero / hac')
    p_est.add_argument('--bandwidth', type=int, help='HAC截断参数，缺省 floor(T^{1/4})')
    p_est.add_argument('--poet-c', type=float)
    p_est.add_argument('--jk-R', type=int, dest='jk_R')
    p_est.add_argument('--seed', type=int)
    p_est.add_argument('--threads', type=int)
    p_est.add_argument('--no-intercept', action='store_true')
    p_est.add_argument('--standardize', action='store_true', help='提取因子前按列标准化X')
    p_est.add_argument('--test-equal', action='store_true', help='检验 γ1 = γ2')
    p_est.add_argument('--out', help='写出 estimates.csv 的目录')
    p_est.set_defaults(func=cmd_estimate)

    p_mc = sub.add_parser('mc', help='执行蒙特卡洛实验')
    p_mc.add_argument('spec_path')
    p_mc.add_argument('--out')
    p_mc.add_argument('--seed', type=int)
    p_mc.add_argument('--nrep', type=int)
    p_mc.add_argument('--threads', type=int)
    p_mc.add_argument('--no-power', action='store_true', help='忽略 power 字段，只做水平实验')
    p_mc.set_defaults(func=cmd_mc)
    return parser


def main(argv=None):
    """
    命令行主函数

    Returns:
        退出码：0 成功，2 输入校验失败，3 数值失败，4 剔除过多，1 其他错误
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    config = Config(args.config)
    level = 'WARNING' if args.quiet else args.log_level
    log_file = setup_logging(config, level)

    logger.info("=" * 60)
    logger.info(f"factor-bc {VERSION} 启动: {args.command}")
    logger.info(f"日志文件: {log_file}")
    logger.info("=" * 60)
    try:
        return args.func(args, config)
    except FactorBcError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"发生未预期的错误: {str(e)}", exc_info=True)
        return 1


if __name__ == '__main__':
    sys.exit(main())

"""
hilma 命令行

    python run.py fit data.csv --model normal_reg
    python run.py impute data.csv --model censored_exp --c 3
    python run.py simulate --config sim.env --reps 500
    python run.py check-bartlett --model exp_mean --params 2
    python run.py reproduce figure3 --reps 2000 --docx

退出码：0 成功，2 数据错误，3 不收敛，1 其他错误。
"""
import argparse
import logging
import os

from dotenv import dotenv_values

from hilma import create_app
from hilma.config import Config
from hilma.models import MODEL_TAGS, build_model, fixed_pattern, logistic_mar, threshold_censor
from hilma.models.base import identity_b_scale
from hilma.services import report_service
from hilma.services.em_service import em_fit
from hilma.services.laplace_service import approx_mle, bartlett_check
from hilma.services.simulation_service import ESTIMATORS, SimConfig, run_simulation
from hilma.services.solver_service import SolveOptions, joint_maximize
from hilma.utils.errors import HilmaError, UsageError
from hilma.utils.file_utils import load_dataset_csv

logger = logging.getLogger(__name__)

# reproduce 目标：模型、真值、构造参数、样本量面板与估计量
REPRODUCE_TARGETS = {
    'figure2': {'model': 'censored_exp', 'params': (2.0,), 'kwargs': {'c': 3.0},
                'ns': (100, 500), 'estimators': ('y_com', 'y_obs', 'y_ML')},
    'figure3': {'model': 'normal_reg', 'params': (1.0, 2.0, 1.0), 'kwargs': {'rho': (1.0, 2.0, 0.3)},
                'ns': (100, 500), 'estimators': ('y_com', 'y_obs', 'y_ML')},
    'figure4': {'model': 'exp_reg', 'params': (1.0, 2.0), 'kwargs': {'rho': (1.0, 2.0, 0.3)},
                'ns': (100, 500), 'estimators': ('y_com', 'y_obs', 'y_ML')},
    'figure5': {'model': 'tobit', 'params': (1.0, 3.0, 1.0), 'kwargs': {'c': 3.0},
                'ns': (100, 500), 'estimators': ('y_com', 'y_obs', 'y_ML', 'y_ML_lap')},
    'example51': {'model': 'censored_exp', 'params': (2.0,), 'kwargs': {'c': 3.0},
                  'ns': (200,), 'estimators': ('y_com', 'y_obs', 'y_ML', 'em')},
}

# 按设置命名的别名，输出文件一律用正式目标名
REPRODUCE_ALIASES = {
    'censored': 'figure2',
    'normal_mar': 'figure3',
    'exp_mar': 'figure4',
    'tobit': 'figure5',
    'censored_em': 'example51',
}


def resolve_target(name):
    return REPRODUCE_ALIASES.get(name, name)


def _floats(text, name):
    if text is None:
        return None
    if isinstance(text, (tuple, list)):
        return tuple(float(v) for v in text)
    try:
        return tuple(float(v) for v in str(text).replace(' ', '').split(',') if v)
    except ValueError:
        raise UsageError(f"{name} 必须是逗号分隔的数值: {text}")


def _model_kwargs(tag, c=None, q=None, n_per_group=None, rho=None):
    kwargs = {}
    if tag in ('censored_exp', 'tobit') and c is not None:
        kwargs['c'] = float(c)
    if tag == 'mixed_oneway':
        if q is not None:
            kwargs['q'] = int(q)
        if n_per_group is not None:
            kwargs['n_per_group'] = int(n_per_group)
    if tag in ('normal_reg', 'exp_reg') and rho is not None:
        kwargs['rho'] = _floats(rho, 'rho')
    return kwargs


def _names(text):
    if not text:
        return None
    return [c.strip() for c in text.split(',') if c.strip()]


def _stem(path):
    return os.path.splitext(os.path.basename(path))[0]


def _out_dir(args):
    return args.out_dir or Config.OUTPUT_FOLDER


# ---------------------------------------------------------------------------
# 子命令
# ---------------------------------------------------------------------------

def _load_and_fit(args):
    model = build_model(args.model, **_model_kwargs(args.model, args.c, args.q, args.n_per_group, args.rho))
    covariates = _names(args.covariates)
    data, frame = load_dataset_csv(args.input, response=args.response, covariates=covariates)
    if args.method == 'em':
        em = em_fit(model, data)
        return model, data, frame, None, report_service.em_report(model, em, data)
    opts = SolveOptions(multistart=args.multistart, seed=args.seed or 0, threads=args.threads or 1)
    if args.method == 'laplace':
        fit = approx_mle(model, data, opts=opts)
    else:
        fit = joint_maximize(model, data, opts)
    return model, data, frame, fit, report_service.fit_report(model, fit, args.method)


def cmd_fit(args):
    model, data, frame, fit, report = _load_and_fit(args)
    path = os.path.join(_out_dir(args), f"{_stem(args.input)}_fit.json")
    report_service.save_json(report, path)
    logger.info(f"拟合完成: 模型={model.tag} 方法={args.method} ψ̂={report['psi_hat']} → {path}")
    return 0


def cmd_impute(args):
    if args.method == 'em':
        raise UsageError("EM 不给出预测方差，impute 仅支持 --method hlik|laplace")
    model, data, frame, fit, report = _load_and_fit(args)
    out_dir = _out_dir(args)
    stem = _stem(args.input)
    report_service.save_imputed_csv(frame, data, fit, os.path.join(out_dir, f"{stem}_imputed.csv"),
                                    level=args.level)
    report_service.save_json(report, os.path.join(out_dir, f"{stem}_fit.json"))
    logger.info(f"插补完成: 模型={model.tag} 插补 {data.n_mis} 个缺失值")
    return 0


def _mechanism(kind, rho=None, c=None):
    if kind in (None, '', 'default'):
        return None
    if kind == 'logistic':
        return logistic_mar(_floats(rho, 'rho') or (1.0, 2.0, 0.3))
    if kind == 'threshold':
        if c is None:
            raise UsageError("threshold 机制需要 c")
        return threshold_censor(float(c))
    if kind == 'fixed':
        return fixed_pattern()
    raise UsageError(f"未知缺失机制: {kind}，可选 default, logistic, threshold, fixed")


def simulation_config(args) -> SimConfig:
    """合并配置文件与命令行参数，命令行优先"""
    values = dict(dotenv_values(args.config)) if args.config else {}
    if args.config and not values:
        raise UsageError(f"配置文件为空或不存在: {args.config}")

    def pick(key, flag):
        return flag if flag is not None else values.get(key)

    tag = pick('model', args.model)
    if tag is None:
        raise UsageError(f"必须指定模型，可选 {', '.join(MODEL_TAGS)}")
    params = _floats(pick('params', args.params), 'params')
    if not params:
        raise UsageError("必须指定真实参数 params")
    c = pick('c', args.c)
    rho = pick('rho', args.rho)
    q = pick('q', args.q)
    n_per_group = pick('n_per_group', args.n_per_group)
    estimators = pick('estimators', args.estimators)
    estimators = tuple(e.strip() for e in estimators.split(',') if e.strip()) if estimators \
        else ('y_com', 'y_obs', 'y_ML')
    try:
        return SimConfig(
            model_tag=tag,
            true_params=params,
            mechanism=_mechanism(pick('mechanism', args.mechanism), rho, c),
            n=int(pick('n', args.n) or 100),
            reps=int(pick('reps', args.reps) or 100),
            seed=int(pick('seed', args.seed) or 0),
            estimators=estimators,
            interval_level=float(pick('level', args.level) or 0.95),
            model_kwargs=_model_kwargs(tag, c, q, n_per_group, rho),
            threads=args.threads,
        )
    except ValueError as e:
        raise UsageError(f"配置值格式错误: {e}")


def _write_tables(tables, name, out_dir, docx):
    for panel, table in tables.items():
        report_service.save_summary(table, os.path.join(out_dir, f"{panel}_summary.json"))
        report_service.export_boxplot_data(table, os.path.join(out_dir, panel))
    if docx:
        report_service.ReportGenerator().generate_word_report(
            tables, os.path.join(out_dir, f"{name}_report.docx"))


def cmd_simulate(args):
    config = simulation_config(args)
    table = run_simulation(config)
    name = args.name or f"{config.model_tag}_n{config.n}"
    _write_tables({name: table}, name, _out_dir(args), args.docx)
    return 0


def cmd_check_bartlett(args):
    model = build_model(args.model, **_model_kwargs(args.model, args.c, args.q, args.n_per_group, args.rho))
    params = _floats(args.params, 'params')
    if not params:
        raise UsageError("必须指定真实参数 params")
    b_scale = None
    if args.b_scale == 'identity':
        b_scale = identity_b_scale()
    result = bartlett_check(model, params, b_scale=b_scale, n_draws=args.n_draws, seed=args.seed or 0,
                            threads=args.threads or 1)
    path = os.path.join(_out_dir(args), f"bartlett_{model.tag}.json")
    report_service.save_json(result.to_dict(), path)
    return 0


def cmd_reproduce(args):
    name = resolve_target(args.target)
    target = REPRODUCE_TARGETS[name]
    reps = args.reps or Config.REPRODUCE_REPS
    seed = args.seed or 0
    tables = {}
    for n in target['ns']:
        config = SimConfig(model_tag=target['model'], true_params=target['params'], n=n, reps=reps,
                           seed=seed, estimators=target['estimators'], model_kwargs=dict(target['kwargs']),
                           threads=args.threads)
        tables[f"{name}_n{n}"] = run_simulation(config)
    _write_tables(tables, name, _out_dir(args), args.docx)
    logger.info(f"{name} 复现完成，输出目录 {_out_dir(args)}")
    return 0


# ---------------------------------------------------------------------------
# 参数解析
# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--seed', type=int, default=None, help='随机种子')
    common.add_argument('--reps', type=int, default=None, help='蒙特卡洛重复次数')
    common.add_argument('--out-dir', default=None, help='输出目录，缺省为 HILMA_OUT_DIR')
    common.add_argument('--threads', type=int, default=None, help='并行线程数，缺省为 HILMA_THREADS')
    common.add_argument('--docx', action='store_true', help='同时生成 Word 汇总报告')
    common.add_argument('--verbose', action='store_true', help='控制台输出逐次重复的进度')

    model_args = argparse.ArgumentParser(add_help=False)
    model_args.add_argument('--model', choices=MODEL_TAGS, default=None)
    model_args.add_argument('--c', type=float, default=None, help='删失阈值')
    model_args.add_argument('--q', type=int, default=None, help='随机效应模型的组数')
    model_args.add_argument('--n-per-group', type=int, default=None)
    model_args.add_argument('--rho', default=None, help='缺失机制参数 ρ0,ρ1,ρ2')

    parser = argparse.ArgumentParser(prog='hilma', description='基于 h-似然的缺失数据 ML 插补')
    sub = parser.add_subparsers(dest='command', required=True)

    for name, helptext in (('fit', '拟合模型并输出 JSON 报告'), ('impute', '插补缺失响应并输出 CSV')):
        p = sub.add_parser(name, parents=[common, model_args], help=helptext)
        p.add_argument('input', help='CSV 数据文件')
        p.add_argument('--method', choices=('hlik', 'laplace', 'em'), default='hlik')
        p.add_argument('--response', default='y', help='响应列名')
        p.add_argument('--covariates', default=None, help='协变量列名，逗号分隔；缺省为除响应外的全部列')
        p.add_argument('--level', type=float, default=0.95, help='预测区间水平')
        p.add_argument('--multistart', type=int, default=0)

    p = sub.add_parser('simulate', parents=[common, model_args], help='运行蒙特卡洛模拟')
    p.add_argument('--config', default=None, help='key=value 配置文件')
    p.add_argument('--params', default=None, help='真实参数，逗号分隔')
    p.add_argument('--n', type=int, default=None)
    p.add_argument('--estimators', default=None, help=f"逗号分隔，可选 {','.join(ESTIMATORS)}")
    p.add_argument('--mechanism', default=None, help='default, logistic, threshold, fixed')
    p.add_argument('--level', type=float, default=None)
    p.add_argument('--name', default=None, help='输出文件名前缀')

    p = sub.add_parser('check-bartlett', parents=[common, model_args], help='Monte Carlo 检验 Bartlett 恒等式')
    p.add_argument('--params', required=True)
    p.add_argument('--n-draws', type=int, default=5000)
    p.add_argument('--b-scale', choices=('default', 'identity'), default='default')

    p = sub.add_parser('reproduce', parents=[common], help='复现模拟研究')
    p.add_argument('target', choices=tuple(REPRODUCE_TARGETS) + tuple(REPRODUCE_ALIASES),
                   help='figure2 | figure3 | figure4 | figure5 | example51，或对应的别名')

    return parser


COMMANDS = {
    'fit': cmd_fit,
    'impute': cmd_impute,
    'simulate': cmd_simulate,
    'check-bartlett': cmd_check_bartlett,
    'reproduce': cmd_reproduce,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command in ('fit', 'impute', 'check-bartlett') and getattr(args, 'model', None) is None:
        parser.error('--model 为必填参数')
    create_app(out_dir=args.out_dir, verbose=args.verbose)
    try:
        return COMMANDS[args.command](args)
    except HilmaError as e:
        logger.error(f"{args.command} 失败: {type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} 发生未预期错误: {e}", exc_info=True)
        return 1

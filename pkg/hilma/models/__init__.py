"""
模型注册表与数据生成

模型标签即 CLI/配置文件约定：exp_mean, mixed_oneway, censored_exp, normal_reg, exp_reg, tobit
"""
import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from hilma.models.censored_exp import build_censored_exponential, raw_joint_modes
from hilma.models.exp_mean import build_exponential_mean
from hilma.models.exp_reg import build_exponential_regression
from hilma.models.mechanisms import (MechanismKind, MissingnessMechanism, fit_mechanism, fixed_pattern,
                                     include_mechanism, logistic_mar, threshold_censor)
from hilma.models.mixed_oneway import build_one_way_mixed
from hilma.models.normal_reg import build_normal_regression
from hilma.models.tobit import build_tobit
from hilma.services.hlik_service import Dataset, ModelSpec, check_psi
from hilma.utils.errors import DataError, UnsupportedError, UsageError

logger = logging.getLogger(__name__)

BUILDERS = {
    'exp_mean': build_exponential_mean,
    'mixed_oneway': build_one_way_mixed,
    'censored_exp': build_censored_exponential,
    'normal_reg': build_normal_regression,
    'exp_reg': build_exponential_regression,
    'tobit': build_tobit,
}

MODEL_TAGS = tuple(BUILDERS)

# 各模型生成数据时协变量列的名字
COVARIATE_NAMES = {
    'exp_mean': (),
    'censored_exp': (),
    'mixed_oneway': ('group',),
    'normal_reg': ('x',),
    'exp_reg': ('x',),
    'tobit': ('x',),
}

MAX_RESAMPLE = 100


def build_model(tag, **kwargs) -> ModelSpec:
    """
    按标签构造模型

    Args:
        tag: 模型标签
        kwargs: 构造参数，如 c（删失阈值）、q / n_per_group（随机效应模型）、rho
    """
    if tag not in BUILDERS:
        raise UsageError(f"未知模型: {tag}，可选 {', '.join(MODEL_TAGS)}")
    try:
        return BUILDERS[tag](**kwargs)
    except TypeError as e:
        raise UsageError(f"模型 {tag} 的构造参数错误: {e}")


@dataclass
class SimulatedData:
    """生成的数据集及对估计量不可见的真值"""
    dataset: Dataset
    y_mis_true: NDArray
    y_com: NDArray
    psi_true: Optional[NDArray] = None


def sample_units(model: ModelSpec, psi, n, rng):
    """
    生成 n 个完全单元并施加模型缺省机制

    Returns:
        (x, y_com, δ, 隐藏真值)
    """
    if model.generate is None or model.mechanism is None:
        raise UnsupportedError(f"模型 {model.tag} 不支持数据生成")
    x, y, hidden = model.generate(psi, n, rng)
    column = x[:, 0] if x.shape[1] else np.zeros(n)
    delta = model.mechanism.apply(column, y, rng)
    return x, y, delta, hidden


def simulate(model, params, mechanism: MissingnessMechanism = None, n=100, seed=0) -> SimulatedData:
    """
    生成一份带缺失的数据集

    Args:
        model: 模型标签或 ModelSpec
        params: 真实参数 ψ
        mechanism: 缺失机制，None 时用模型缺省机制
        n: 样本量
        seed: 整数种子或 SeedSequence

    Returns:
        SimulatedData；数据集按观测在前排列，y_mis_true 与之对齐
    """
    if isinstance(model, str):
        model = build_model(model)
    if mechanism is not None:
        model = replace(model, mechanism=mechanism)
    psi = check_psi(model, params)
    if n < 1:
        raise UsageError(f"样本量必须 ≥ 1: {n}")
    rng = np.random.default_rng(seed)

    for attempt in range(MAX_RESAMPLE):
        x, y, delta, hidden = sample_units(model, psi, n, rng)
        if delta.sum() > 0:
            break
        logger.debug(f"第 {attempt + 1} 次生成没有任何观测，重新抽样")
    else:
        raise DataError(f"连续 {MAX_RESAMPLE} 次生成的数据均无观测响应")

    response = np.where(delta == 1, y, np.nan)
    dataset = Dataset.from_arrays(x, response, COVARIATE_NAMES.get(model.tag, ()))
    y_com = y[dataset.row_order]
    y_mis_true = np.asarray(hidden, dtype=float) if hidden is not None else y_com[dataset.n_obs:]
    return SimulatedData(dataset, y_mis_true, y_com, psi)


__all__ = [
    'BUILDERS', 'MODEL_TAGS', 'build_model', 'simulate', 'sample_units', 'SimulatedData',
    'build_exponential_mean', 'build_one_way_mixed', 'build_censored_exponential',
    'build_normal_regression', 'build_exponential_regression', 'build_tobit', 'raw_joint_modes',
    'MissingnessMechanism', 'MechanismKind', 'logistic_mar', 'threshold_censor', 'fixed_pattern',
    'fit_mechanism', 'include_mechanism',
]

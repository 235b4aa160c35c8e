"""
模型构造的公共部件
"""
import numpy as np
from sklearn.linear_model import LinearRegression

from hilma.services.hlik_service import (IDENTITY_NORMALIZER, IdentityMap, ScaleKind, ScaleTransform,
                                         ShiftedLogMap)
from hilma.utils.errors import DataError, RankError

LOG_2PI = float(np.log(2.0 * np.pi))


def log_scale(shift=0.0, kind=ScaleKind.CANONICAL) -> ScaleTransform:
    """v = log(y − shift)"""
    name = 'log(y)' if shift == 0 else f'log(y-{shift:g})'
    return ScaleTransform(ShiftedLogMap(shift), kind, name=name)


def identity_b_scale() -> ScaleTransform:
    """b = y_mis，高斯模型的 Bartlett 尺度"""
    return ScaleTransform(IdentityMap(), ScaleKind.TRANSFORMED, name='y')


def design(data):
    """x̃ = (1, x)，x 取第一列协变量"""
    return np.column_stack([np.ones(data.n), data.covariates[:, 0]])


def linear_predictor(beta, data):
    return beta[0] + beta[1] * data.covariates[:, 0]


def require_covariate(data):
    if data.covariates.shape[1] < 1:
        raise DataError("回归模型需要至少一列协变量")


def require_positive_response(data):
    if np.any(data.y_obs <= 0):
        i = int(np.argmax(data.y_obs <= 0))
        raise DataError(f"观测响应必须为正: y[{i}]={data.y_obs[i]!r}")


def complete_y(y_mis, data):
    """按观测在前的顺序拼接 (y_obs, y_mis)"""
    return np.concatenate([data.y_obs, np.asarray(y_mis, dtype=float)])


def ols_observed(data, log_response=False):
    """
    观测行上的最小二乘

    Returns:
        (β̂, σ̂²)，σ̂² 以 n_obs 为除数
    """
    if data.n_obs < 2 or np.ptp(data.x_obs[:, 0]) == 0:
        raise RankError("观测行不足以识别回归系数")
    x = data.x_obs[:, :1]
    y = np.log(data.y_obs) if log_response else data.y_obs
    reg = LinearRegression().fit(x, y)
    beta = np.array([reg.intercept_, reg.coef_[0]], dtype=float)
    resid = y - reg.predict(x)
    return beta, float(np.mean(resid ** 2))


def uniform_covariate(n, rng):
    return rng.uniform(-1.0, 1.0, size=n).reshape(-1, 1)


__all__ = ['LOG_2PI', 'IDENTITY_NORMALIZER', 'log_scale', 'identity_b_scale', 'design', 'linear_predictor',
           'require_covariate', 'require_positive_response', 'complete_y', 'ols_observed',
           'uniform_covariate']

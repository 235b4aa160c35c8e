"""
右删失指数模型：y ~ Exp(θ)，δ = I(y ≤ c)，c 已知

缺失机制不可忽略，但 y_mis 的支撑 (c, ∞) 已编码了 δ 的信息。
    v_i = log(y_mis,i − c) 为典则尺度，ỹ = θ + c
    ℓ_m(θ) = −n_obs log θ − (Σ y_obs + n_mis c)/θ
    θ̂ = ȳ_obs + n_mis c / n_obs
"""
import logging

import numpy as np

from hilma.models.base import complete_y, log_scale, require_positive_response
from hilma.models.mechanisms import threshold_censor
from hilma.services.hlik_service import ModelSpec, NormalizingTransform, ScaleKind
from hilma.services.solver_service import newton_maximize
from hilma.utils.errors import DataError, RankError

logger = logging.getLogger(__name__)

TAG = 'censored_exp'


def build_censored_exponential(c=3.0) -> ModelSpec:
    c = float(c)
    if not np.isfinite(c) or c <= 0:
        raise DataError(f"删失阈值必须为正的有限数: {c}")

    def extended(psi, y_mis, data):
        theta = psi[0]
        return -data.n * np.log(theta) - np.sum(complete_y(y_mis, data)) / theta

    def marginal(psi, data):
        theta = psi[0]
        return -data.n_obs * np.log(theta) - (np.sum(data.y_obs) + data.n_mis * c) / theta

    def grad_y(psi, y_mis, data):
        return np.full(np.size(y_mis), -1.0 / psi[0])

    def hess_y(psi, y_mis, data):
        return np.zeros(np.size(y_mis))

    def grad_psi(psi, y_mis, data):
        theta = psi[0]
        return np.array([-data.n / theta + np.sum(complete_y(y_mis, data)) / theta ** 2])

    def canonical(psi, data):
        return np.full(data.n_mis, psi[0] + c)

    def oracle(data):
        if data.n_obs == 0:
            raise RankError("没有观测响应")
        return np.array([np.mean(data.y_obs) + data.n_mis * c / data.n_obs])

    def validate(data):
        require_positive_response(data)
        if np.any(data.y_obs > c):
            i = int(np.argmax(data.y_obs > c))
            raise DataError(f"观测响应 y[{i}]={data.y_obs[i]!r} 超过删失阈值 c={c}")

    def b_mode(psi, data):
        return np.full(data.n_mis, np.log(psi[0]))

    def generate(psi, n, rng):
        return np.zeros((n, 0)), rng.exponential(psi[0], size=n), None

    return ModelSpec(
        tag=TAG,
        param_names=('theta',),
        positive=(True,),
        extended_loglik=extended,
        scale=log_scale(c),
        support_lower=c,
        closed_marginal_loglik=marginal,
        canonical_function=canonical,
        mle_oracle=oracle,
        grad_y=grad_y,
        hess_y=hess_y,
        grad_psi=grad_psi,
        complete_case_init=lambda data: np.array([max(np.mean(data.y_obs), 1e-3)]),
        validate_data=validate,
        normalizing_transform=NormalizingTransform('identity', approximate=True),
        b_scale=log_scale(c, ScaleKind.TRANSFORMED),
        b_mode=b_mode,
        generate=generate,
        mechanism=threshold_censor(c),
        population_mean=lambda psi, n: float(psi[0]),
        constants={'c': c},
    )


def raw_joint_modes(model: ModelSpec, data):
    """
    原始 y_mis 尺度上联合极大化 ℓ_e 得到的众数

    ∂ℓ_e/∂y_mis = −1/θ < 0，y 的上确界落在支撑边界 c；
    再对 θ 极大化边界极限 −n log θ − (Σ y_obs + n_mis c)/θ。

    Returns:
        (θ 众数, y_mis 众数)
    """
    c = model.constants['c']
    total = float(np.sum(data.y_obs) + data.n_mis * c)
    n = data.n

    def edge(eta):
        return -n * eta[0] - total * np.exp(-eta[0])

    def edge_grad(eta):
        return np.array([-n + total * np.exp(-eta[0])])

    eta0 = np.array([np.log(max(np.mean(data.y_obs), 1e-3))])
    eta, _, iterations = newton_maximize(edge, eta0, grad=edge_grad, tol=1e-9)
    theta = float(np.exp(eta[0]))
    logger.debug(f"原始尺度众数: θ={theta:.10f} y_mis={c} (迭代 {iterations} 次)")
    return theta, np.full(data.n_mis, c)

"""
指数均值模型 y_i ~ Exp(θ)，E(y) = θ

    ℓ_e(θ, y_mis) = −n log θ − (Σ y_obs + Σ y_mis)/θ
    v = log y_mis 为典则尺度，ỹ_mis = θ，θ̂ = ȳ_obs
"""
import numpy as np

from hilma.models.base import complete_y, log_scale, require_positive_response
from hilma.models.mechanisms import fixed_pattern
from hilma.services.hlik_service import (ModelSpec, NormalizingTransform, ScaleKind)
from hilma.utils.errors import RankError

TAG = 'exp_mean'


def _extended(psi, y_mis, data):
    theta = psi[0]
    return -data.n * np.log(theta) - np.sum(complete_y(y_mis, data)) / theta


def _marginal(psi, data):
    theta = psi[0]
    return -data.n_obs * np.log(theta) - np.sum(data.y_obs) / theta


def _grad_y(psi, y_mis, data):
    return np.full(np.size(y_mis), -1.0 / psi[0])


def _hess_y(psi, y_mis, data):
    return np.zeros(np.size(y_mis))


def _grad_psi(psi, y_mis, data):
    theta = psi[0]
    return np.array([-data.n / theta + np.sum(complete_y(y_mis, data)) / theta ** 2])


def _canonical(psi, data):
    return np.full(data.n_mis, psi[0])


def _oracle(data):
    if data.n_obs == 0:
        raise RankError("没有观测响应")
    return np.array([np.mean(data.y_obs)])


def _b_mode(psi, data):
    return np.full(data.n_mis, np.log(psi[0]))


def _generate(psi, n, rng):
    return np.zeros((n, 0)), rng.exponential(psi[0], size=n), None


def build_exponential_mean() -> ModelSpec:
    return ModelSpec(
        tag=TAG,
        param_names=('theta',),
        positive=(True,),
        extended_loglik=_extended,
        scale=log_scale(0.0),
        support_lower=0.0,
        closed_marginal_loglik=_marginal,
        canonical_function=_canonical,
        mle_oracle=_oracle,
        grad_y=_grad_y,
        hess_y=_hess_y,
        grad_psi=_grad_psi,
        complete_case_init=_oracle,
        validate_data=require_positive_response,
        # 指数分布的 y_mis 并非正态，按恒等变换使用时只是近似
        normalizing_transform=NormalizingTransform('identity', approximate=True),
        b_scale=log_scale(0.0, ScaleKind.TRANSFORMED),
        b_mode=_b_mode,
        generate=_generate,
        mechanism=fixed_pattern(),
        population_mean=lambda psi, n: float(psi[0]),
    )

"""
指数回归 y ~ Exp(均值 exp(β0 + β1·x))，响应按 logistic MAR 缺失

    ℓ_e(β, y_mis) = Σ [−η_i − y_i·exp(−η_i)]
    v = log y_mis 为典则尺度，ỹ_mis,i = exp(β0 + β1·x_i)，Î_yy,i⁻¹ = ŷ²_mis,i
"""
import numpy as np

from hilma.models.base import (complete_y, design, linear_predictor, log_scale, ols_observed,
                               require_covariate, require_positive_response, uniform_covariate)
from hilma.models.mechanisms import logistic_mar
from hilma.services.hlik_service import ModelSpec, ScaleKind

TAG = 'exp_reg'
EULER_GAMMA = 0.5772156649015329


def _loglik(y, eta):
    return float(np.sum(-eta - y * np.exp(-eta)))


def _extended(psi, y_mis, data):
    return _loglik(complete_y(y_mis, data), linear_predictor(psi, data))


def _marginal(psi, data):
    return _loglik(data.y_obs, linear_predictor(psi, data)[:data.n_obs])


def _grad_y(psi, y_mis, data):
    return -np.exp(-linear_predictor(psi, data)[data.n_obs:])


def _hess_y(psi, y_mis, data):
    return np.zeros(np.size(y_mis))


def _grad_psi(psi, y_mis, data):
    y = complete_y(y_mis, data)
    weight = -1.0 + y * np.exp(-linear_predictor(psi, data))
    return design(data).T @ weight


def _canonical(psi, data):
    return np.exp(linear_predictor(psi, data)[data.n_obs:])


def _complete_case(data):
    # E(log y) = η − γ
    beta, _ = ols_observed(data, log_response=True)
    beta[0] += EULER_GAMMA
    return beta


def _validate(data):
    require_covariate(data)
    require_positive_response(data)


def _population_mean(psi, n):
    b0, b1 = psi[0], psi[1]
    if abs(b1) < 1e-12:
        return float(np.exp(b0))
    return float(np.exp(b0) * np.sinh(b1) / b1)


def _generate(psi, n, rng):
    x = uniform_covariate(n, rng)
    y = rng.exponential(np.exp(psi[0] + psi[1] * x[:, 0]))
    return x, y, None


def build_exponential_regression(rho=(1.0, 2.0, 0.3)) -> ModelSpec:
    return ModelSpec(
        tag=TAG,
        param_names=('beta0', 'beta1'),
        positive=(False, False),
        extended_loglik=_extended,
        scale=log_scale(0.0),
        support_lower=0.0,
        closed_marginal_loglik=_marginal,
        canonical_function=_canonical,
        grad_y=_grad_y,
        hess_y=_hess_y,
        grad_psi=_grad_psi,
        complete_case_init=_complete_case,
        validate_data=_validate,
        b_scale=log_scale(0.0, ScaleKind.TRANSFORMED),
        b_mode=lambda psi, data: linear_predictor(psi, data)[data.n_obs:],
        generate=_generate,
        mechanism=logistic_mar(rho),
        population_mean=_population_mean,
    )

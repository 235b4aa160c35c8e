"""
正态线性回归 y = β0 + β1·x + ε，ε ~ N(0, σ²)，响应按 logistic MAR 缺失

    v_i = y_mis,i / σ 为典则尺度，ỹ_mis,i = β0 + β1·x_i，Î_yy⁻¹ = σ̂²
    原始 y_mis 尺度上的联合极大化给出偏小的 σ̂²，用作反例
"""
import numpy as np

from hilma.models.base import (IDENTITY_NORMALIZER, LOG_2PI, complete_y, design, identity_b_scale,
                               linear_predictor, ols_observed, require_covariate, uniform_covariate)
from hilma.models.mechanisms import logistic_mar
from hilma.services.hlik_service import IdentityMap, ModelSpec, ScaleKind, ScaleTransform
from hilma.utils.errors import RankError

TAG = 'normal_reg'
PARAM_NAMES = ('beta0', 'beta1', 'sigma2')


def gaussian_loglik(y, mu, sigma2):
    r = y - mu
    return float(-0.5 * r.size * (LOG_2PI + np.log(sigma2)) - np.sum(r ** 2) / (2.0 * sigma2))


def gaussian_grad_psi(y, mu, sigma2, xt):
    """(∂/∂β, ∂/∂σ²) of Σ log N(y; x̃ᵀβ, σ²)"""
    r = y - mu
    g_beta = xt.T @ r / sigma2
    g_s2 = -0.5 * r.size / sigma2 + np.sum(r ** 2) / (2.0 * sigma2 ** 2)
    return np.append(g_beta, g_s2)


def _extended(psi, y_mis, data):
    return gaussian_loglik(complete_y(y_mis, data), linear_predictor(psi, data), psi[2])


def _marginal(psi, data):
    mu = linear_predictor(psi, data)[:data.n_obs]
    return gaussian_loglik(data.y_obs, mu, psi[2])


def _grad_y(psi, y_mis, data):
    mu = linear_predictor(psi, data)[data.n_obs:]
    return -(np.asarray(y_mis, dtype=float) - mu) / psi[2]


def _hess_y(psi, y_mis, data):
    return np.full(np.size(y_mis), -1.0 / psi[2])


def _grad_psi(psi, y_mis, data):
    return gaussian_grad_psi(complete_y(y_mis, data), linear_predictor(psi, data), psi[2], design(data))


def _canonical(psi, data):
    return linear_predictor(psi, data)[data.n_obs:]


def _oracle(data):
    beta, sigma2 = ols_observed(data)
    if sigma2 <= 0:
        raise RankError("观测行残差为零，σ² 不可识别")
    return np.append(beta, sigma2)


def _canonical_factor(psi, data):
    return np.full(data.n_mis, 1.0 / np.sqrt(psi[2]))


def _canonical_log_det_grad(psi, data):
    # log|A| = −(n_mis/2)·log σ²
    return np.array([0.0, 0.0, -0.5 * data.n_mis / psi[2]])


def _generate(psi, n, rng):
    x = uniform_covariate(n, rng)
    y = psi[0] + psi[1] * x[:, 0] + rng.normal(0.0, np.sqrt(psi[2]), size=n)
    return x, y, None


CANONICAL_SCALE = ScaleTransform(IdentityMap(), ScaleKind.CANONICAL, _canonical_factor, name='y/sigma',
                                 log_det_grad=_canonical_log_det_grad)


def build_normal_regression(rho=(1.0, 2.0, 0.3)) -> ModelSpec:
    return ModelSpec(
        tag=TAG,
        param_names=PARAM_NAMES,
        positive=(False, False, True),
        extended_loglik=_extended,
        scale=CANONICAL_SCALE,
        closed_marginal_loglik=_marginal,
        canonical_function=_canonical,
        mle_oracle=_oracle,
        grad_y=_grad_y,
        hess_y=_hess_y,
        grad_psi=_grad_psi,
        complete_case_init=_oracle,
        validate_data=require_covariate,
        normalizing_transform=IDENTITY_NORMALIZER,
        b_scale=identity_b_scale(),
        b_mode=_canonical,
        generate=_generate,
        mechanism=logistic_mar(rho),
        population_mean=lambda psi, n: float(psi[0]),
    )

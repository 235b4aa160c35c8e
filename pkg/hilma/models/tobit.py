"""
Tobit 回归：y ~ N(β0 + β1·x, σ²)，δ = I(y ≤ c)，c 已知

    ℓ_m(θ) = Σ_obs log N(y_i; μ_i, σ²) + Σ_mis log Φ((μ_i − c)/σ)
    b_i = log(y_mis,i − c)，其众数
        b̃_i = log{μ_i − c + √((μ_i − c)² + 4σ²)} − log 2

缺省拟合尺度为典则尺度 v_i = L_p(b̃_i)·b_i，其中 L_p(b̃_i) 为 b_i 的预测密度在众数处的值；
在该尺度上联合极大化即得精确 MLE。弱典则尺度由 laplace_service 基于 b 尺度构造。
"""
import numpy as np
from scipy.stats import norm

from hilma.models.base import (LOG_2PI, complete_y, design, linear_predictor, log_scale, ols_observed,
                               require_covariate)
from hilma.models.mechanisms import threshold_censor
from hilma.models.normal_reg import PARAM_NAMES, gaussian_grad_psi, gaussian_loglik
from hilma.services.hlik_service import ModelSpec, ScaleKind, ScaleTransform, ShiftedLogMap
from hilma.utils.errors import DataError

TAG = 'tobit'


def b_tilde(mu, sigma2, c):
    """b 尺度众数的闭式解"""
    d = np.asarray(mu, dtype=float) - c
    root = np.sqrt(d ** 2 + 4.0 * sigma2)
    # d 很负时 d + root 有相消误差，改写为 4σ²/(root − d)
    with np.errstate(divide='ignore'):
        gap = np.where(d >= 0, d + root, 4.0 * sigma2 / (root - d))
    return np.log(gap) - np.log(2.0)


def inverse_mills(alpha):
    """λ(α) = φ(α)/Φ(α)"""
    return np.exp(norm.logpdf(alpha) - norm.logcdf(alpha))


def grid_covariate(n):
    return (-1.0 + 2.0 * np.arange(1, n + 1) / n).reshape(-1, 1)


def build_tobit(c=3.0) -> ModelSpec:
    c = float(c)
    if not np.isfinite(c):
        raise DataError(f"删失阈值必须有限: {c}")

    def extended(psi, y_mis, data):
        return gaussian_loglik(complete_y(y_mis, data), linear_predictor(psi, data), psi[2])

    def marginal(psi, data):
        mu = linear_predictor(psi, data)
        sigma = np.sqrt(psi[2])
        observed = gaussian_loglik(data.y_obs, mu[:data.n_obs], psi[2])
        return observed + float(np.sum(norm.logcdf((mu[data.n_obs:] - c) / sigma)))

    def grad_y(psi, y_mis, data):
        mu = linear_predictor(psi, data)[data.n_obs:]
        return -(np.asarray(y_mis, dtype=float) - mu) / psi[2]

    def hess_y(psi, y_mis, data):
        return np.full(np.size(y_mis), -1.0 / psi[2])

    def grad_psi(psi, y_mis, data):
        return gaussian_grad_psi(complete_y(y_mis, data), linear_predictor(psi, data), psi[2], design(data))

    def b_mode(psi, data):
        return b_tilde(linear_predictor(psi, data)[data.n_obs:], psi[2], c)

    def unit_terms(psi, data):
        """各缺失单元在 b̃ 处的 (ℓ^b_e,i, log Φ(α_i), r_i, α_i)"""
        mu = linear_predictor(psi, data)[data.n_obs:]
        sigma2 = psi[2]
        b = b_tilde(mu, sigma2, c)
        r = c + np.exp(b) - mu
        ell_b = -0.5 * (LOG_2PI + np.log(sigma2)) - r ** 2 / (2.0 * sigma2) + b
        alpha = (mu - c) / np.sqrt(sigma2)
        return ell_b, norm.logcdf(alpha), r, alpha

    def canonical_factor(psi, data):
        ell_b, log_phi, _, _ = unit_terms(psi, data)
        return np.exp(ell_b - log_phi)

    def canonical_log_det_grad(psi, data):
        # b̃ 是 ℓ^b_e,i 的众数，对 ψ 求导时 b̃ 的变化不贡献
        _, _, r, alpha = unit_terms(psi, data)
        sigma2 = psi[2]
        xt = design(data)[data.n_obs:]
        lam = inverse_mills(alpha)
        g_beta = xt.T @ (r / sigma2 - lam / np.sqrt(sigma2))
        g_s2 = np.sum(-0.5 / sigma2 + r ** 2 / (2.0 * sigma2 ** 2) + lam * alpha / (2.0 * sigma2))
        return np.append(g_beta, g_s2)

    def canonical_function(psi, data):
        return c + np.exp(b_mode(psi, data))

    def validate(data):
        require_covariate(data)
        if np.any(data.y_obs > c):
            i = int(np.argmax(data.y_obs > c))
            raise DataError(f"观测响应 y[{i}]={data.y_obs[i]!r} 超过删失阈值 c={c}")

    def complete_case(data):
        beta, sigma2 = ols_observed(data)
        return np.append(beta, max(sigma2, 1e-3))

    def generate(psi, n, rng):
        x = grid_covariate(n)
        y = psi[0] + psi[1] * x[:, 0] + rng.normal(0.0, np.sqrt(psi[2]), size=n)
        return x, y, None

    canonical_scale = ScaleTransform(ShiftedLogMap(c), ScaleKind.CANONICAL, canonical_factor,
                                     name=f'Lp*log(y-{c:g})', log_det_grad=canonical_log_det_grad)

    return ModelSpec(
        tag=TAG,
        param_names=PARAM_NAMES,
        positive=(False, False, True),
        extended_loglik=extended,
        scale=canonical_scale,
        support_lower=c,
        closed_marginal_loglik=marginal,
        canonical_function=canonical_function,
        grad_y=grad_y,
        hess_y=hess_y,
        grad_psi=grad_psi,
        complete_case_init=complete_case,
        validate_data=validate,
        b_scale=log_scale(c, ScaleKind.TRANSFORMED),
        b_mode=b_mode,
        generate=generate,
        mechanism=threshold_censor(c),
        population_mean=lambda psi, n: float(psi[0] + psi[1] * np.mean(grid_covariate(n))),
        constants={'c': c},
    )

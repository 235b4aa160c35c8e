"""
EM 基线

均值得分方程 E_ψ[∂ℓ_e/∂ψ | D] = 0 的不动点迭代。各模型的 E 步均为闭式：
    exp_mean      E(y_mis) = θ
    censored_exp  E(y_mis | y_mis > c) = θ + c
    normal_reg    E(y_mis | x) = x̃ᵀβ，二阶矩 (x̃ᵀβ)² + σ²
    exp_reg       E(y_mis | x) = exp(x̃ᵀβ)，M 步用 Newton
    tobit         截断正态 E(y | y > c) = μ + σλ(α)，α = (c − μ)/σ
EM 只给出 ψ̂，不给方差估计。
"""
import logging
from dataclasses import dataclass, field
from typing import List

import numpy as np
from numpy.typing import NDArray
from scipy.stats import norm

from hilma.models import build_model
from hilma.models.base import design, linear_predictor
from hilma.services import hlik_service as hs
from hilma.services.solver_service import newton_maximize
from hilma.utils.errors import ConvergenceError, UnsupportedError, UsageError

logger = logging.getLogger(__name__)


@dataclass
class EMOptions:
    tol: float = 1e-10
    max_iters: int = 5000

    def __post_init__(self):
        if not self.tol > 0:
            raise UsageError(f"EM 容差必须为正: {self.tol}")
        if self.max_iters < 1:
            raise UsageError("EM 迭代上限必须 ≥ 1")


@dataclass
class EMResult:
    psi_hat: NDArray
    iterations: int
    loglik_trace: List[float] = field(default_factory=list)


# ---------------------------------------------------------------------------
# E 步：返回缺失响应的条件一阶矩与二阶矩
# ---------------------------------------------------------------------------

def _estep_exp_mean(model, psi, data):
    m1 = np.full(data.n_mis, psi[0])
    return m1, m1 ** 2 + psi[0] ** 2


def _estep_censored(model, psi, data):
    c = model.constants['c']
    m1 = np.full(data.n_mis, psi[0] + c)
    return m1, m1 ** 2 + psi[0] ** 2


def _estep_normal(model, psi, data):
    m1 = linear_predictor(psi, data)[data.n_obs:]
    return m1, m1 ** 2 + psi[2]


def _estep_exp_reg(model, psi, data):
    m1 = np.exp(linear_predictor(psi, data)[data.n_obs:])
    return m1, 2.0 * m1 ** 2


def _estep_tobit(model, psi, data):
    c = model.constants['c']
    mu = linear_predictor(psi, data)[data.n_obs:]
    sigma = np.sqrt(psi[2])
    alpha = (c - mu) / sigma
    lam = np.exp(norm.logpdf(alpha) - norm.logsf(alpha))
    m1 = mu + sigma * lam
    var = psi[2] * (1.0 + alpha * lam - lam ** 2)
    return m1, var + m1 ** 2


# ---------------------------------------------------------------------------
# M 步
# ---------------------------------------------------------------------------

def _mstep_mean(model, data, m1, m2, psi):
    return np.array([(np.sum(data.y_obs) + np.sum(m1)) / data.n])


def _mstep_gaussian(model, data, m1, m2, psi):
    X = design(data)
    y = np.concatenate([data.y_obs, m1])
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    mu = X @ beta
    rss_obs = np.sum((data.y_obs - mu[:data.n_obs]) ** 2)
    mu_mis = mu[data.n_obs:]
    # E[(y − μ)²] = (m1 − μ)² + (m2 − m1²)
    rss_mis = np.sum((m1 - mu_mis) ** 2 + (m2 - m1 ** 2))
    return np.append(beta, (rss_obs + rss_mis) / data.n)


def _mstep_exp_reg(model, data, m1, m2, psi):
    X = design(data)
    y = np.concatenate([data.y_obs, m1])

    def q(beta):
        eta = X @ beta
        return float(np.sum(-eta - y * np.exp(-eta)))

    def grad(beta):
        return X.T @ (-1.0 + y * np.exp(-(X @ beta)))

    def hess(beta):
        w = y * np.exp(-(X @ beta))
        return -(X.T * w) @ X

    beta, _, _ = newton_maximize(q, np.asarray(psi, dtype=float), grad=grad, hess=hess, tol=1e-9)
    return beta


E_STEPS = {
    'exp_mean': (_estep_exp_mean, _mstep_mean),
    'censored_exp': (_estep_censored, _mstep_mean),
    'normal_reg': (_estep_normal, _mstep_gaussian),
    'exp_reg': (_estep_exp_reg, _mstep_exp_reg),
    'tobit': (_estep_tobit, _mstep_gaussian),
}


def _resolve(model):
    if isinstance(model, str):
        model = build_model(model)
    if model.tag not in E_STEPS:
        raise UnsupportedError(f"模型 {model.tag} 没有注册闭式 E 步")
    return model


def conditional_mean(model, psi, data) -> NDArray:
    """E_ψ(y_mis,i | x_i, δ_i = 0)"""
    model = _resolve(model)
    psi = hs.check_psi(model, psi)
    return E_STEPS[model.tag][0](model, psi, data)[0]


def em_fit(model, data, init=None, opts: EMOptions = None) -> EMResult:
    """
    EM 迭代

    Args:
        model: 模型标签或 ModelSpec
        data: Dataset
        init: 初值，None 时用完全个案估计
        opts: EMOptions

    Returns:
        EMResult(psi_hat, iterations, loglik_trace)
    """
    model = _resolve(model)
    opts = opts or EMOptions()
    if model.validate_data is not None:
        model.validate_data(data)
    e_step, m_step = E_STEPS[model.tag]
    psi = hs.check_psi(model, model.complete_case_init(data) if init is None else init)

    def marginal(p):
        if model.closed_marginal_loglik is None:
            return np.nan
        return float(model.closed_marginal_loglik(p, data))

    trace = [marginal(psi)]
    if data.n_mis == 0:
        # 没有缺失时 E 步为空，一次 M 步即为完全数据 MLE
        psi = hs.check_psi(model, m_step(model, data, np.zeros(0), np.zeros(0), psi))
        trace.append(marginal(psi))
        return EMResult(psi, 1, trace)

    for it in range(1, opts.max_iters + 1):
        m1, m2 = e_step(model, psi, data)
        new_psi = hs.check_psi(model, m_step(model, data, m1, m2, psi))
        change = float(np.max(np.abs(new_psi - psi)))
        psi = new_psi
        trace.append(marginal(psi))
        if change <= opts.tol:
            logger.debug(f"EM 收敛: 模型={model.tag} 迭代={it} ψ̂={psi}")
            return EMResult(psi, it, trace)
    raise ConvergenceError(f"EM {opts.max_iters} 次迭代未收敛", last_iterate=psi)

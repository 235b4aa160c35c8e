"""
单因素随机效应模型 y_ij = μ + u_i + e_ij，u_i ~ N(0, λ²)，e_ij ~ N(0, σ²)

随机参数是 u（不是缺失响应），响应全部观测。协变量第一列为组号 0..q−1。
    v_i = {(σ² + nλ²)/(σ²λ²)}^{1/2}·u_i 为典则尺度
    ũ_i = nλ²(ȳ_i· − μ)/(σ² + nλ²)
原始 u 尺度上的联合似然即 Henderson 联合似然，不能给出方差分量的 MLE。
"""
import numpy as np

from hilma.models.base import IDENTITY_NORMALIZER, LOG_2PI
from hilma.models.mechanisms import fixed_pattern
from hilma.services.hlik_service import IdentityMap, ModelSpec, ScaleKind, ScaleTransform
from hilma.utils.errors import DataError, RankError, UsageError

TAG = 'mixed_oneway'


def _groups(data):
    return data.covariates[:, 0].astype(int)


def _group_stats(data, q):
    g = _groups(data)
    counts = np.bincount(g, minlength=q).astype(float)
    sums = np.bincount(g, weights=data.response, minlength=q)
    return g, counts, sums / counts


def build_one_way_mixed(q=10, n_per_group=5) -> ModelSpec:
    q, n_per_group = int(q), int(n_per_group)
    if q < 2 or n_per_group < 2:
        raise RankError(f"方差分量需要 q ≥ 2 且每组 n ≥ 2，实际 q={q}, n={n_per_group}")

    def extended(psi, u, data):
        mu, s2, l2 = psi
        g = _groups(data)
        r = data.response - mu - u[g]
        return float(-0.5 * data.n * (LOG_2PI + np.log(s2)) - np.sum(r ** 2) / (2.0 * s2)
                     - 0.5 * q * (LOG_2PI + np.log(l2)) - np.sum(u ** 2) / (2.0 * l2))

    def marginal(psi, data):
        mu, s2, l2 = psi
        g, counts, means = _group_stats(data, q)
        within = np.bincount(g, weights=(data.response - means[g]) ** 2, minlength=q)
        total = s2 + counts * l2
        return float(-0.5 * np.sum(counts * LOG_2PI + (counts - 1) * np.log(s2) + np.log(total)
                                   + within / s2 + counts * (means - mu) ** 2 / total))

    def grad_y(psi, u, data):
        mu, s2, l2 = psi
        g = _groups(data)
        r = data.response - mu - u[g]
        return np.bincount(g, weights=r, minlength=q) / s2 - u / l2

    def hess_y(psi, u, data):
        _, s2, l2 = psi
        counts = np.bincount(_groups(data), minlength=q)
        return -counts / s2 - 1.0 / l2

    def grad_psi(psi, u, data):
        mu, s2, l2 = psi
        g = _groups(data)
        r = data.response - mu - u[g]
        return np.array([np.sum(r) / s2,
                         -0.5 * data.n / s2 + np.sum(r ** 2) / (2.0 * s2 ** 2),
                         -0.5 * q / l2 + np.sum(u ** 2) / (2.0 * l2 ** 2)])

    def canonical(psi, data):
        mu, s2, l2 = psi
        _, counts, means = _group_stats(data, q)
        return counts * l2 * (means - mu) / (s2 + counts * l2)

    def factor(psi, data):
        _, s2, l2 = psi
        counts = np.bincount(_groups(data), minlength=q)
        return np.sqrt((s2 + counts * l2) / (s2 * l2))

    def log_det_grad(psi, data):
        _, s2, l2 = psi
        counts = np.bincount(_groups(data), minlength=q)
        total = s2 + counts * l2
        return np.array([0.0,
                         0.5 * np.sum(1.0 / total - 1.0 / s2),
                         0.5 * np.sum(counts / total - 1.0 / l2)])

    def validate(data):
        if data.n_mis:
            raise DataError("随机效应模型要求响应全部观测")
        if data.covariates.shape[1] < 1:
            raise DataError("缺少组号列")
        ids = data.covariates[:, 0]
        if np.any(ids != np.round(ids)) or ids.min() < 0 or ids.max() >= q:
            raise DataError(f"组号必须是 0..{q - 1} 的整数")
        counts = np.bincount(ids.astype(int), minlength=q)
        if np.any(counts < 2):
            raise RankError("每组至少需要两个观测")

    def anova_start(data):
        g, counts, means = _group_stats(data, q)
        within = np.sum((data.response - means[g]) ** 2) / (data.n - q)
        between = np.sum(counts * (means - np.mean(data.response)) ** 2) / (q - 1)
        s2 = max(within, 1e-6)
        l2 = max((between - within) / np.mean(counts), 0.1 * s2)
        return np.array([np.mean(data.response), s2, l2])

    def generate(psi, n, rng):
        if n != q * n_per_group:
            raise UsageError(f"随机效应模型的样本量必须为 q·n = {q * n_per_group}，实际 {n}")
        mu, s2, l2 = psi
        g = np.repeat(np.arange(q), n_per_group)
        u = rng.normal(0.0, np.sqrt(l2), size=q)
        y = mu + u[g] + rng.normal(0.0, np.sqrt(s2), size=n)
        return g.reshape(-1, 1).astype(float), y, u

    scale = ScaleTransform(IdentityMap(), ScaleKind.CANONICAL, factor, name='u*sqrt(I_uu)',
                           log_det_grad=log_det_grad)

    return ModelSpec(
        tag=TAG,
        param_names=('mu', 'sigma2', 'lambda2'),
        positive=(False, True, True),
        extended_loglik=extended,
        scale=scale,
        closed_marginal_loglik=marginal,
        canonical_function=canonical,
        grad_y=grad_y,
        hess_y=hess_y,
        grad_psi=grad_psi,
        random_dim=lambda data: q,
        complete_case_init=anova_start,
        validate_data=validate,
        normalizing_transform=IDENTITY_NORMALIZER,
        generate=generate,
        mechanism=fixed_pattern(()),
        population_mean=lambda psi, n: float(psi[0]),
        constants={'q': q, 'n_per_group': n_per_group},
    )

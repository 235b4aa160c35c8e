"""
弱典则尺度与 Laplace 近似边际似然

b 尺度满足 Bartlett 恒等式（支撑为全实轴、均值有限）时，取
    w = Ω̃_bb^{1/2}·b，Ω̃_bb = −∂²ℓ_e/∂b∂bᵀ|_{b=b̃}
则 h(ψ, w̃) 与 Laplace 近似
    ℓ̂_m(ψ) = ℓ_e(ψ, b̃) − ½·log|Ω̃_bb/(2π)|
只差常数 (n_mis/2)·log 2π。w 对 ψ 的依赖通过 −½·log|Ω̃_bb(ψ)| 进入目标函数，这正是 Laplace 修正项。
"""
import concurrent.futures
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from hilma.models import sample_units
from hilma.services import hlik_service as hs
from hilma.services.inference_service import blocks_in_y, schur_complement
from hilma.services.solver_service import (FitResult, SolveOptions, _default_base_start, _inner_mode_base,
                                           newton_maximize)
from hilma.utils.errors import ConvergenceError, CurvatureError, UnsupportedError, UsageError
from hilma.utils.numdiff import fd_jacobian, fd_second_jacobian

logger = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# 弱典则尺度
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WeakCanonicalScale:
    base_scale: hs.ScaleTransform
    omega: Callable
    omega_bb_sqrt: Callable
    scale: hs.ScaleTransform


def _b_model(model, b_scale):
    if b_scale is None:
        b_scale = model.b_scale
    if b_scale is None:
        raise UnsupportedError(f"模型 {model.tag} 未声明 b 尺度")
    if b_scale.depends_on_psi:
        raise UsageError("b 尺度必须是不含线性缩放的逐坐标变换")
    return hs.with_scale(model, b_scale)


def _check_omega(omega):
    if omega.ndim == 1:
        if np.any(~np.isfinite(omega)) or np.any(omega <= 0):
            raise CurvatureError("Ω̃_bb 在 b̃ 处非正定")
        return
    w = np.linalg.eigvalsh(omega)
    if not np.all(np.isfinite(w)) or w.min() <= 0:
        raise CurvatureError(f"Ω̃_bb 在 b̃ 处非正定，最小特征值 {w.min():.3e}")


def sym_sqrt(omega) -> NDArray:
    """对角时逐元素开方，否则取对称（谱）平方根"""
    if omega.ndim == 1:
        return np.sqrt(omega)
    w, vecs = linalg.eigh(omega)
    return (vecs * np.sqrt(w)) @ vecs.T


class _ModeCache:
    """按 (ψ, 数据) 记住最近一次 b̃ 与 Ω̃_bb，避免同一 ψ 上重复求众数"""

    def __init__(self, b_model, opts):
        self.b_model = b_model
        self.opts = opts
        self._last = None

    def __call__(self, psi, data):
        psi = np.asarray(psi, dtype=float)
        key = psi.tobytes()
        last = self._last
        if last is not None and last[0] == key and last[1] is data:
            return last[2], last[3]
        m = self.b_model
        b0 = _default_base_start(m, psi, data)
        b, _ = _inner_mode_base(m, psi, data, b0, self.opts)
        _, hess = hs.base_grad_hess(m, psi, b, data)
        omega = -hess
        if omega.ndim == 2:
            omega = 0.5 * (omega + omega.T)
        _check_omega(omega)
        self._last = (key, data, b, omega)
        return b, omega


def make_weak_canonical(model, b_scale=None, opts: SolveOptions = None) -> WeakCanonicalScale:
    """
    由 b 尺度构造弱典则尺度 w = Ω̃_bb^{1/2}·b

    log|∂y/∂w| = log|∂y/∂b| − ½·log|Ω̃_bb|
    """
    b_model = _b_model(model, b_scale)
    base = b_model.scale.base
    if not np.isneginf(getattr(base, 'lower', -np.inf)) and base.name != 'shifted_log':
        raise UsageError("b 尺度的支撑必须是全实轴")
    mode = _ModeCache(b_model, opts or SolveOptions())

    def omega(psi, data):
        return mode(psi, data)[1]

    def factor(psi, data):
        return sym_sqrt(omega(psi, data))

    def log_det_grad(psi, data):
        # ∂(½ log|Ω̃|)/∂ψ_j = ½ tr(Ω̃⁻¹ ∂Ω̃/∂ψ_j)
        om = omega(psi, data)
        d_om = fd_jacobian(lambda p: omega(p, data).reshape(-1), psi, richardson=True)
        return 0.5 * _trace_inv(om, d_om, psi.size)

    scale = hs.ScaleTransform(base, hs.ScaleKind.WEAK_CANONICAL, factor,
                              name=f'w(sqrt(Omega)*{b_model.scale.name})', log_det_grad=log_det_grad)
    return WeakCanonicalScale(b_model.scale, omega, factor, scale)


# ---------------------------------------------------------------------------
# Laplace 近似
# ---------------------------------------------------------------------------

def _log_det(omega) -> float:
    if omega.ndim == 1:
        return float(np.sum(np.log(omega)))
    return float(np.linalg.slogdet(omega)[1])


def laplace_marginal(model, psi, data, b_scale=None, opts: SolveOptions = None) -> float:
    """ℓ̂_m(ψ) = ℓ_e(ψ, b̃) − ½·log|Ω̃_bb/(2π)|，其中 ℓ_e 为 b 尺度扩展似然"""
    b_model = _b_model(model, b_scale)
    psi = hs.check_psi(model, psi)
    b, omega = _ModeCache(b_model, opts or SolveOptions())(psi, data)
    if b.size == 0:
        return hs.extended_loglik(model, psi, b, data)
    value = hs.base_value(b_model, psi, b, data)
    return value - 0.5 * (_log_det(omega) - b.size * LOG_2PI)


class _LaplacePoint:
    """同一 ψ 上 ℓ̂_m 的值、得分与 Hessian 共用一次众数求解"""

    def __init__(self, model, data, b_scale, opts):
        self.b_model = _b_model(model, b_scale)
        self.data = data
        self.mode = _ModeCache(self.b_model, opts)

    def omega(self, psi):
        return self.mode(psi, self.data)[1]

    def value(self, psi):
        psi = hs.check_psi(self.b_model, psi)
        b, omega = self.mode(psi, self.data)
        if b.size == 0:
            return hs.extended_loglik(self.b_model, psi, b, self.data)
        return hs.base_value(self.b_model, psi, b, self.data) - 0.5 * (_log_det(omega) - b.size * LOG_2PI)

    def score(self, psi):
        m, data = self.b_model, self.data
        b, omega = self.mode(psi, data)
        y = m.scale.base.from_base(b)
        grad = hs.ell_grad_psi(m, psi, y, data)
        if b.size == 0:
            return grad
        d_om = fd_jacobian(lambda p: self.omega(p).reshape(-1), psi, richardson=True)
        return grad - 0.5 * _trace_inv(omega, d_om, psi.size)

    def hessian(self, psi):
        m, data = self.b_model, self.data
        b, omega = self.mode(psi, data)
        # 1. b̃ 处的 ψψ 块与 ψb 交叉块
        y = m.scale.base.from_base(b)
        I_pp = -fd_jacobian(lambda p: hs.ell_grad_psi(m, p, y, data), psi, richardson=True)
        I_pp = 0.5 * (I_pp + I_pp.T)
        if b.size == 0:
            return -I_pp
        I_pb = -fd_jacobian(lambda p: hs.base_grad_hess(m, p, b, data)[0], psi,
                            richardson=True).reshape(b.size, psi.size).T
        # 2. Schur 补
        S = schur_complement(I_pp, I_pb, omega)
        # 3. log|Ω̃| 的二阶导修正，Ω̃ 的一二阶导用差分
        p = psi.size
        d1 = fd_jacobian(lambda q: self.omega(q).reshape(-1), psi, richardson=True)
        d2 = fd_second_jacobian(lambda q: self.omega(q).reshape(-1), psi)
        correction = np.zeros((p, p))
        if omega.ndim == 1:
            for j in range(p):
                for k in range(p):
                    correction[j, k] = (np.sum(d2[:, j, k] / omega)
                                        - np.sum(d1[:, j] * d1[:, k] / omega ** 2))
        else:
            n = omega.shape[0]
            inv = np.linalg.inv(omega)
            for j in range(p):
                dj = inv @ d1[:, j].reshape(n, n)
                for k in range(p):
                    dk = inv @ d1[:, k].reshape(n, n)
                    correction[j, k] = np.trace(inv @ d2[:, j, k].reshape(n, n)) - np.trace(dj @ dk)
        H = -S - 0.5 * correction
        return 0.5 * (H + H.T)


def _trace_inv(omega, d_omega, p) -> NDArray:
    """tr(Ω̃⁻¹ ∂Ω̃/∂ψ_j)"""
    if omega.ndim == 1:
        return (d_omega / omega[:, None]).sum(axis=0)
    n = omega.shape[0]
    inv = np.linalg.inv(omega)
    return np.array([np.sum(inv * d_omega[:, j].reshape(n, n).T) for j in range(p)])


def laplace_score_hessian(model, psi, data, b_scale=None, opts: SolveOptions = None):
    """
    ℓ̂_m 的得分与 Hessian

        score_j = ∂ℓ_e/∂ψ_j|_{b̃} − ½·tr(Ω̃⁻¹ ∂Ω̃/∂ψ_j)
        H       = −(I_ψψ − I_ψb Ω̃⁻¹ I_bψ) − ½·[tr(Ω̃⁻¹ ∂²Ω̃) − tr(Ω̃⁻¹ ∂Ω̃ Ω̃⁻¹ ∂Ω̃)]

    Returns:
        (score, hessian)，自然参数尺度
    """
    point = _LaplacePoint(model, data, b_scale, opts or SolveOptions())
    psi = hs.check_psi(model, psi)
    return point.score(psi), point.hessian(psi)


def approx_mle(model, data, b_scale=None, opts: SolveOptions = None, blocks=True) -> FitResult:
    """
    Laplace 近似 MLE，等价于在弱典则尺度上联合极大化

    Returns:
        FitResult，scale_kind 为 weak_canonical，y_mis_hat = g⁻¹(ŵ)
    """
    # 1. 数据校验与初值
    opts = opts or SolveOptions()
    if model.validate_data is not None:
        model.validate_data(data)
    if isinstance(opts.init_psi, str):
        if model.complete_case_init is None:
            raise UsageError(f"模型 {model.tag} 没有完全个案初值")
        psi0 = np.asarray(model.complete_case_init(data), dtype=float)
    else:
        psi0 = hs.check_psi(model, opts.init_psi)

    # 2. η 尺度上 ℓ̂_m 的值、梯度与 Hessian
    point = _LaplacePoint(model, data, b_scale, opts)
    pos = np.asarray(model.positive, dtype=bool)

    def fn(eta):
        return point.value(hs.to_natural(model, eta))

    def grad(eta):
        psi = hs.to_natural(model, eta)
        return point.score(psi) * hs.natural_jacobian(model, psi)

    def hess(eta):
        psi = hs.to_natural(model, eta)
        J = hs.natural_jacobian(model, psi)
        H = J[:, None] * point.hessian(psi) * J[None, :]
        return H + np.diag(np.where(pos, point.score(psi) * psi, 0.0))

    logger.debug(f"开始 Laplace 近似极大化: 模型={model.tag} n_mis={data.n_mis}")
    try:
        eta, value, iterations = newton_maximize(fn, hs.to_internal(model, psi0), grad=grad, hess=hess,
                                                 tol=opts.grad_tol, max_iters=opts.max_outer_iters,
                                                 contraction=opts.contraction, slope=opts.armijo_slope)
    except ConvergenceError as e:
        if e.last_iterate is not None:
            e.last_iterate = hs.to_natural(model, e.last_iterate)
        raise
    # 3. 由 b̃ 构造 ŵ 与 ŷ_mis，分块在弱典则尺度上计算
    psi = hs.to_natural(model, eta)
    b, omega = point.mode(psi, data)
    weak = make_weak_canonical(model, b_scale, opts)
    w_model = hs.with_scale(model, weak.scale)
    y = point.b_model.scale.base.from_base(b)
    w = sym_sqrt(omega) * b if omega.ndim == 1 else sym_sqrt(omega) @ b
    fit_blocks = blocks_in_y(w_model, psi, y, data) if blocks and y.size else None
    score = point.score(psi)
    logger.debug(f"Laplace 近似 MLE: ψ̂={psi} 迭代={iterations}")
    return FitResult(psi_hat=psi, v_hat=w, y_mis_hat=y, h_value=value, converged=True,
                     iterations=iterations, blocks=fit_blocks, scale_kind=hs.ScaleKind.WEAK_CANONICAL,
                     grad_norm=float(np.max(np.abs(score))) if score.size else 0.0, model_tag=model.tag,
                     param_names=model.param_names, data=data)


# ---------------------------------------------------------------------------
# Bartlett 恒等式
# ---------------------------------------------------------------------------

MIN_BARTLETT_DRAWS = 1000


@dataclass
class BartlettCheckResult:
    score_mean: NDArray
    score_mean_se: NDArray
    second_identity_residual: NDArray
    second_identity_se: NDArray
    n_draws: int
    scale_name: str = ''

    def first_identity_holds(self, k=3.0) -> bool:
        return bool(np.all(np.abs(self.score_mean) <= k * self.score_mean_se))

    def second_identity_holds(self, k=3.0) -> bool:
        se = self.second_identity_se
        return bool(np.all((np.abs(self.second_identity_residual) <= k * se) | (se == 0)))

    def to_dict(self):
        return {
            'score_mean': self.score_mean.tolist(),
            'score_mean_se': self.score_mean_se.tolist(),
            'second_identity_residual': self.second_identity_residual.tolist(),
            'second_identity_se': self.second_identity_se.tolist(),
            'n_draws': self.n_draws,
            'scale': self.scale_name,
            'first_identity_holds': self.first_identity_holds(),
            'second_identity_holds': self.second_identity_holds(),
        }


def _draw_score(model, b_model, psi, seed, r):
    """单次抽样的 ξ = (ψ, b) 得分与 Hessian；单元被观测时 b 分量为 0"""
    rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
    x, y, delta, _ = sample_units(model, psi, 1, rng)
    data = hs.Dataset.from_arrays(x, np.where(delta == 1, y, np.nan))
    p = psi.size
    y_mis = y[delta == 0]
    score = np.zeros(p + 1)
    hess = np.zeros((p + 1, p + 1))
    score[:p] = hs.ell_grad_psi(b_model, psi, y_mis, data)
    hess[:p, :p] = fd_jacobian(lambda q: hs.ell_grad_psi(b_model, q, y_mis, data), psi, richardson=True)
    if y_mis.size:
        b = b_model.scale.base.to_base(y_mis)
        grad_b, hess_b = hs.base_grad_hess(b_model, psi, b, data)
        cross = fd_jacobian(lambda q: hs.base_grad_hess(b_model, q, b, data)[0], psi, richardson=True)
        score[p] = grad_b[0]
        hess[p, p] = np.ravel(hess_b)[0]
        hess[:p, p] = hess[p, :p] = np.ravel(cross)
    hess = 0.5 * (hess + hess.T)
    return score, np.outer(score, score) + hess


def bartlett_check(model, psi_true, b_scale=None, n_draws=5000, seed=0, threads=1) -> BartlettCheckResult:
    """
    Monte Carlo 检验 b 尺度上的 Bartlett 恒等式

        E[∂ℓ_e/∂ξ] = 0,  E[s sᵀ] + E[∂²ℓ_e/∂ξ∂ξᵀ] = 0

    第 r 次抽样使用由 (seed, r) 派生的独立随机流，结果与线程数无关。
    """
    if n_draws < MIN_BARTLETT_DRAWS:
        raise UsageError(f"n_draws 至少为 {MIN_BARTLETT_DRAWS}")
    if model.random_dim is not None or model.generate is None:
        raise UnsupportedError(f"模型 {model.tag} 不支持 Bartlett 检验的数据生成")
    # 1. 每次抽样单独计算得分与二阶恒等式残差
    b_model = _b_model(model, b_scale)
    psi = hs.check_psi(model, psi_true)

    def run(r):
        return _draw_score(model, b_model, psi, seed, r)

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        draws = list(pool.map(run, range(n_draws)))
    # 2. Monte Carlo 均值与标准误
    scores = np.array([d[0] for d in draws])
    second = np.array([d[1] for d in draws])
    root_n = np.sqrt(n_draws)
    result = BartlettCheckResult(
        score_mean=scores.mean(axis=0),
        score_mean_se=scores.std(axis=0, ddof=1) / root_n,
        second_identity_residual=second.mean(axis=0),
        second_identity_se=second.std(axis=0, ddof=1) / root_n,
        n_draws=n_draws,
        scale_name=b_model.scale.name,
    )
    logger.info(f"Bartlett 检验完成: 模型={model.tag} 尺度={result.scale_name} "
                f"第一恒等式={'成立' if result.first_identity_holds() else '不成立'}")
    return result

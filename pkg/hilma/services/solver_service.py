"""
h-似然联合极大化

外层：对 ψ（内部对数重参数化）做带 Armijo 回溯的 Newton 迭代，
使用剖面得分 ∂h/∂ψ|_{v=ṽ}；剖面 Hessian 取 y_mis 坐标下分块的 Schur 补。
内层：固定 ψ 求 ṽ(ψ)，在基坐标 b 上做 Newton，Hessian 非正定时加 Levenberg 平移。
"""
import concurrent.futures
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Union

import numpy as np
from numpy.typing import NDArray
from scipy import linalg

from hilma.services import hlik_service as hs
from hilma.services.inference_service import HessianBlocks, _check_vv, blocks_in_y, schur_complement
from hilma.utils.errors import (BoundaryError, ConvergenceError, CurvatureError, DomainError, RankError,
                                UsageError)
from hilma.utils.numdiff import EPS, fd_jacobian

logger = logging.getLogger(__name__)

# 内层单步在 b 坐标上的最大步长
MAX_INNER_STEP = 10.0
# 对数重参数化坐标的发散界
ETA_BOUND = 30.0
MIN_STEP = 1e-12


@dataclass
class SolveOptions:
    grad_tol: float = 1e-8
    max_outer_iters: int = 200
    max_inner_iters: int = 100
    armijo_slope: float = 1e-4
    contraction: float = 0.5
    init_psi: Union[str, NDArray] = 'complete-case'
    init_v: Union[str, NDArray] = 'model-default'
    multistart: int = 0
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if not self.grad_tol > 0:
            raise UsageError(f"grad_tol 必须为正: {self.grad_tol}")
        if self.max_outer_iters < 1 or self.max_inner_iters < 1:
            raise UsageError("迭代次数上限必须 ≥ 1")
        if not 0 < self.contraction < 1 or not 0 < self.armijo_slope < 1:
            raise UsageError("线搜索参数必须在 (0,1) 内")
        if self.multistart < 0:
            raise UsageError("multistart 不能为负")


@dataclass
class FitResult:
    psi_hat: NDArray
    v_hat: NDArray
    y_mis_hat: NDArray
    h_value: float
    converged: bool
    iterations: int
    blocks: Optional[HessianBlocks]
    scale_kind: hs.ScaleKind
    grad_norm: float = np.nan
    model_tag: str = ''
    param_names: tuple = ()
    history: List[float] = field(default_factory=list)
    data: Optional[hs.Dataset] = None

    def as_dict(self):
        return dict(zip(self.param_names, map(float, self.psi_hat)))


# ---------------------------------------------------------------------------
# 线性代数与通用 Newton
# ---------------------------------------------------------------------------

def newton_direction(neg_hess, grad):
    """
    解 (−H + μI) d = g，−H 非正定时逐步加大 μ

    Returns:
        (d, μ)
    """
    grad = np.asarray(grad, dtype=float)
    neg_hess = np.asarray(neg_hess, dtype=float)
    if neg_hess.ndim == 1:
        lowest = float(np.min(neg_hess)) if neg_hess.size else 1.0
        scale = float(np.max(np.abs(neg_hess))) if neg_hess.size else 1.0
        mu = 0.0
        if not lowest > 1e-12 * (1.0 + scale):
            mu = -lowest + 1e-6 * (1.0 + scale)
        return grad / (neg_hess + mu), mu

    scale = float(np.max(np.abs(neg_hess))) if neg_hess.size else 1.0
    mu = 0.0
    eye = np.eye(neg_hess.shape[0])
    for _ in range(60):
        try:
            factor = linalg.cho_factor(neg_hess + mu * eye, lower=True)
            return linalg.cho_solve(factor, grad), mu
        except linalg.LinAlgError:
            mu = max(2.0 * mu, 1e-8 * (1.0 + scale))
    raise RankError("Levenberg 平移后仍无法分解 Hessian")


def newton_maximize(fn, x0, grad=None, hess=None, tol=1e-8, max_iters=200, contraction=0.5, slope=1e-4):
    """
    无约束极大化的阻尼 Newton 法

    梯度缺省时用 Richardson 中心差分；hess 缺省时取梯度的差分 Jacobian。

    Returns:
        (x, value, iterations)
    """
    if grad is None:
        def grad(z):
            return fd_jacobian(fn, z, richardson=True)
    x = np.asarray(x0, dtype=float).copy()
    value = float(fn(x))
    for it in range(1, max_iters + 1):
        g = np.asarray(grad(x), dtype=float)
        if np.max(np.abs(g)) <= tol:
            return x, value, it - 1
        H = fd_jacobian(grad, x) if hess is None else np.asarray(hess(x), dtype=float)
        H = 0.5 * (H + H.T)
        d, _ = newton_direction(-H, g)
        t = 1.0
        slack = 8.0 * EPS * (1.0 + abs(value))
        while True:
            trial = x + t * d
            try:
                new_value = float(fn(trial))
            except (DomainError, ConvergenceError, CurvatureError):
                new_value = -np.inf
            if np.isfinite(new_value) and new_value >= value + slope * t * float(g @ d) - slack:
                break
            t *= contraction
            if t < MIN_STEP:
                raise ConvergenceError("线搜索失败", last_iterate=x, grad_norm=float(np.max(np.abs(g))))
        x, value = trial, new_value
    g = np.asarray(grad(x), dtype=float)
    raise ConvergenceError(f"Newton 迭代 {max_iters} 次未收敛", last_iterate=x,
                           grad_norm=float(np.max(np.abs(g))))


# ---------------------------------------------------------------------------
# 内层：随机参数众数
# ---------------------------------------------------------------------------

def _default_base_start(model, psi, data):
    m = model.n_random(data)
    if model.b_mode is not None and model.scale.base.name == 'shifted_log':
        return np.asarray(model.b_mode(psi, data), dtype=float)
    return np.zeros(m)


def _inner_mode_base(model, psi, data, b0, opts: SolveOptions):
    """基坐标上的 Newton，返回 (b̃, 迭代次数)"""
    b = np.asarray(b0, dtype=float).copy()
    if b.size == 0:
        return b, 0
    # 1. 初值处的目标值与尺度因子
    value = hs.base_value(model, psi, b, data)
    scale = model.scale
    a = scale.factor_at(psi, data)
    polished = False
    for it in range(opts.max_inner_iters + 1):
        # 2. v 尺度梯度达到容差后再多走一步打磨
        grad_b, hess_b = hs.base_grad_hess(model, psi, b, data)
        gnorm = float(np.max(np.abs(scale.grad_to_v(grad_b, psi, data, a))))
        if gnorm <= opts.grad_tol:
            if polished:
                return b, it
            polished = True
        if it == opts.max_inner_iters:
            if gnorm <= opts.grad_tol:
                return b, it
            raise ConvergenceError(f"内层众数 {opts.max_inner_iters} 次未收敛，梯度范数 {gnorm:.3e}",
                                   last_iterate=scale.from_base_coords(b, psi, data), grad_norm=gnorm)
        # 3. Newton 方向，限制单步长度
        d, mu = newton_direction(-hess_b, grad_b)
        if mu > 0:
            logger.debug(f"内层 Hessian 非正定，Levenberg 平移 μ={mu:.3e}")
        step = float(np.max(np.abs(d)))
        if step > MAX_INNER_STEP:
            d = d * (MAX_INNER_STEP / step)
        # 4. Armijo 回溯
        slope = float(grad_b @ d)
        slack = 8.0 * EPS * (1.0 + abs(value))
        t = 1.0
        while True:
            trial = b + t * d
            try:
                new_value = hs.base_value(model, psi, trial, data)
            except DomainError:
                new_value = -np.inf
            if np.isfinite(new_value) and new_value >= value + opts.armijo_slope * t * slope - slack:
                break
            t *= opts.contraction
            if t < MIN_STEP:
                if gnorm <= opts.grad_tol:
                    return b, it
                raise ConvergenceError(f"内层线搜索失败，梯度范数 {gnorm:.3e}",
                                       last_iterate=scale.from_base_coords(b, psi, data), grad_norm=gnorm)
        # 5. 打磨步未能减小梯度时保留当前点
        if polished:
            new_grad, _ = hs.base_grad_hess(model, psi, trial, data)
            new_norm = float(np.max(np.abs(scale.grad_to_v(new_grad, psi, data, a))))
            if new_norm >= gnorm:
                return b, it
        b, value = trial, new_value
    return b, opts.max_inner_iters


def inner_mode(model, psi, data, init=None, opts: SolveOptions = None) -> NDArray:
    """
    固定 ψ 求 ṽ(ψ)

    Args:
        init: v 尺度上的初值；None 或 'model-default' 使用模型缺省起点
    """
    opts = opts or SolveOptions()
    psi = hs.check_psi(model, psi)
    if init is None or isinstance(init, str):
        b0 = _default_base_start(model, psi, data)
    else:
        b0 = model.scale.to_base_coords(np.asarray(init, dtype=float), psi, data)
    b, _ = _inner_mode_base(model, psi, data, b0, opts)
    return model.scale.from_base_coords(b, psi, data)


def profile_loglik(model, psi, data, init=None, opts: SolveOptions = None) -> float:
    """h(ψ, ṽ(ψ))"""
    v = inner_mode(model, psi, data, init, opts)
    y = model.scale.inverse(v, psi, data)
    return hs.hlik_in_y(model, psi, y, data)


def solve_random_given_psi(model, psi_tilde, data, opts: SolveOptions = None) -> NDArray:
    """
    给定 ψ̃ 的 ML 插补 ŷ_mis = g⁻¹(ṽ(ψ̃))

    对应两步估计结构中"固定参数已知、只解随机参数得分方程"的一步。
    """
    v = inner_mode(model, psi_tilde, data, opts=opts)
    return model.scale.inverse(v, psi_tilde, data)


# ---------------------------------------------------------------------------
# 外层：联合极大化
# ---------------------------------------------------------------------------

class _Profile:
    """外层迭代的剖面求值，记住上一次的 b̃ 作为热启动"""

    def __init__(self, model, data, opts):
        self.model = model
        self.data = data
        self.opts = opts

    def evaluate(self, eta, b_start):
        psi = hs.to_natural(self.model, eta)
        hs.check_psi(self.model, psi)
        b, _ = _inner_mode_base(self.model, psi, self.data, b_start, self.opts)
        y = self.model.scale.base.from_base(b)
        value = hs.hlik_in_y(self.model, psi, y, self.data)
        return value, b

    def score(self, eta, b):
        """返回 (η 尺度剖面得分, 自然尺度得分, v 梯度)"""
        model = self.model
        psi = hs.to_natural(model, eta)
        y = model.scale.base.from_base(b)
        score_nat = hs.grad_psi_H(model, psi, y, self.data)
        if b.size:
            grad_b, _ = hs.base_grad_hess(model, psi, b, self.data)
            gv = model.scale.grad_to_v(grad_b, psi, self.data)
        else:
            gv = np.zeros(0)
        return score_nat * hs.natural_jacobian(model, psi), score_nat, gv

    def hessian(self, eta, b, score_nat):
        """η 尺度剖面 Hessian：链式法则作用在 y_mis 坐标分块的 Schur 补上"""
        model = self.model
        psi = hs.to_natural(model, eta)
        y = model.scale.base.from_base(b)
        I_pp, I_py, I_yy = hs.y_blocks(model, psi, y, self.data)
        S = schur_complement(I_pp, I_py, I_yy)
        J = hs.natural_jacobian(model, psi)
        pos = np.asarray(model.positive, dtype=bool)
        H = -(J[:, None] * S * J[None, :])
        H = H + np.diag(np.where(pos, score_nat * psi, 0.0))
        return 0.5 * (H + H.T)


def _complete_case_start(model, data):
    if model.complete_case_init is None:
        raise UsageError(f"模型 {model.tag} 没有完全个案初值，请显式给出 init_psi")
    return model.complete_case_init(data)


def _solve_from(model, data, opts: SolveOptions, psi0) -> FitResult:
    # 1. 内部参数化 η 与随机参数初值
    profile = _Profile(model, data, opts)
    eta = hs.to_internal(model, psi0)
    psi = hs.to_natural(model, eta)
    if isinstance(opts.init_v, str):
        b = _default_base_start(model, psi, data)
    else:
        b = model.scale.to_base_coords(np.asarray(opts.init_v, dtype=float), psi, data)
    # 2. 初值处的剖面 h
    value, b = profile.evaluate(eta, b)
    history = [value]
    pos = np.asarray(model.positive, dtype=bool)

    gnorm = np.inf
    for it in range(opts.max_outer_iters + 1):
        # 3. 收敛判据：ψ 得分与 v 梯度的上确界范数
        score_eta, score_nat, gv = profile.score(eta, b)
        gnorm = float(max(np.max(np.abs(score_nat)), np.max(np.abs(gv)) if gv.size else 0.0))
        logger.debug(f"[外层 {it}] h={value:.10f} |score|={gnorm:.3e} ψ={hs.to_natural(model, eta)}")
        if gnorm <= opts.grad_tol:
            return _finish(model, data, eta, b, value, it, gnorm, history)
        if it == opts.max_outer_iters:
            break

        # 4. 剖面 Hessian 给出 Newton 方向
        H = profile.hessian(eta, b, score_nat)
        d, mu = newton_direction(-H, score_eta)
        if mu > 0:
            logger.info(f"[外层 {it}] 剖面 Hessian 非负定，Levenberg 平移 μ={mu:.3e}")
        # 5. Armijo 回溯；越界或内层失败视为 −∞
        slope = float(score_eta @ d)
        slack = 8.0 * EPS * (1.0 + abs(value))
        t = 1.0
        while True:
            trial = eta + t * d
            try:
                if np.any(np.abs(trial[pos]) > ETA_BOUND):
                    raise DomainError("参数越界")
                new_value, new_b = profile.evaluate(trial, b)
            except (DomainError, ConvergenceError):
                new_value = -np.inf
            if np.isfinite(new_value) and new_value >= value + opts.armijo_slope * t * slope - slack:
                break
            t *= opts.contraction
            if t < MIN_STEP:
                if np.any(np.abs(eta[pos] + d[pos]) > ETA_BOUND):
                    raise BoundaryError("迭代发散到参数边界", last_iterate=hs.to_natural(model, eta),
                                        grad_norm=gnorm)
                raise ConvergenceError(f"外层线搜索失败，得分范数 {gnorm:.3e}",
                                       last_iterate=hs.to_natural(model, eta), grad_norm=gnorm)
        # 6. 接受步长并检查方差类参数是否趋于边界
        eta, b, value = trial, new_b, new_value
        history.append(value)
        if np.any(np.abs(eta[pos]) > ETA_BOUND - 1.0):
            raise BoundaryError("方差类参数趋于 0 或 ∞", last_iterate=hs.to_natural(model, eta),
                                grad_norm=gnorm)

    raise ConvergenceError(f"外层 {opts.max_outer_iters} 次迭代未收敛，得分范数 {gnorm:.3e}",
                           last_iterate=hs.to_natural(model, eta), grad_norm=gnorm)


def _finish(model, data, eta, b, value, iterations, gnorm, history) -> FitResult:
    psi = hs.to_natural(model, eta)
    y = model.scale.base.from_base(b)
    v = model.scale.from_base_coords(b, psi, data)
    blocks = blocks_in_y(model, psi, y, data)
    if blocks.I_vv.size:
        _check_vv(blocks.I_vv)
    return FitResult(psi_hat=psi, v_hat=v, y_mis_hat=y, h_value=value, converged=True,
                     iterations=iterations, blocks=blocks, scale_kind=model.scale.kind,
                     grad_norm=gnorm, model_tag=model.tag, param_names=model.param_names,
                     history=history, data=data)


def _multistart(model, data, opts: SolveOptions, psi0) -> FitResult:
    rng = np.random.default_rng(opts.seed)
    eta0 = hs.to_internal(model, psi0)
    starts = [psi0] + [hs.to_natural(model, eta0 + rng.normal(0.0, 0.5, size=eta0.size))
                       for _ in range(opts.multistart)]

    def run(start):
        try:
            return _solve_from(model, data, opts, start)
        except ConvergenceError as e:
            logger.warning(f"多起点之一未收敛: {e}")
            return None

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, opts.threads)) as pool:
        results = list(pool.map(run, starts))
    results = [r for r in results if r is not None]
    if not results:
        raise ConvergenceError("所有起点均未收敛")
    return max(results, key=lambda r: r.h_value)


def joint_maximize(model, data, opts: SolveOptions = None) -> FitResult:
    """
    联合极大化 h(ψ, v)

    Args:
        model: ModelSpec
        data: Dataset
        opts: SolveOptions

    Returns:
        FitResult，blocks 为 y_mis 尺度分块
    """
    # 1. 数据校验与可识别性
    opts = opts or SolveOptions()
    if model.validate_data is not None:
        model.validate_data(data)
    if data.n_obs == 0:
        raise RankError("没有任何观测响应，固定参数不可识别")
    # 2. 固定参数初值
    if isinstance(opts.init_psi, str):
        psi0 = _complete_case_start(model, data)
    else:
        psi0 = hs.check_psi(model, opts.init_psi)

    logger.debug(f"开始联合极大化: 模型={model.tag} 尺度={model.scale.kind.value} "
                 f"n_obs={data.n_obs} n_mis={data.n_mis}")
    # 3. 单起点或多起点求解
    if opts.multistart > 0:
        fit = _multistart(model, data, opts, psi0)
    else:
        fit = _solve_from(model, data, opts, psi0)
    logger.debug(f"联合极大化完成: ψ̂={fit.psi_hat} 迭代={fit.iterations} h={fit.h_value:.8f}")
    return fit

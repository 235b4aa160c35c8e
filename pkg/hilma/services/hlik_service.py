"""
h-似然核心：数据集、尺度变换、模型抽象与扩展似然/h-似然求值

约定：
    ℓ_e(ψ, y_mis)      扩展对数似然（完全数据对数似然）
    h(ψ, v)            = ℓ_e(ψ, g⁻¹(v)) + log|∂y_mis/∂v|
    H(ψ, y_mis)        = h(ψ, g(y_mis))，即在 y_mis 坐标下书写的同一函数

尺度变换统一写成两段：逐坐标的基变换 y = G(b)（恒等或平移对数），
再接一个可依赖 ψ 的线性缩放 v = A(ψ, D)·b。A 为 None、正向量（对角）或对称正定矩阵。
"""
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Mapping, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from hilma.utils.errors import DataError, DomainError, UsageError
from hilma.utils.numdiff import fd_jacobian

logger = logging.getLogger(__name__)


class ScaleKind(str, Enum):
    RAW = 'raw'
    CANONICAL = 'canonical'
    WEAK_CANONICAL = 'weak_canonical'
    TRANSFORMED = 'transformed'


# ---------------------------------------------------------------------------
# 数据集
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    """
    观测数据 (x, y, δ)，按观测在前、缺失在后排列

    response 中缺失位置为 NaN；row_order[i] 记录第 i 行在原始文件中的位置。
    """
    covariates: NDArray
    response: NDArray
    delta: NDArray
    covariate_names: Tuple[str, ...] = ()
    response_name: str = 'y'
    row_order: Optional[NDArray] = None

    def __post_init__(self):
        y = np.array(self.response, dtype=float).reshape(-1)
        n = y.shape[0]
        x = np.array(self.covariates, dtype=float)
        if x.size == 0:
            x = x.reshape(n, 0)
        elif x.ndim == 1:
            x = x.reshape(-1, 1)
        d = np.array(self.delta).reshape(-1)

        if x.shape[0] != n or d.shape[0] != n:
            raise DataError(f"协变量/响应/指示变量长度不一致: {x.shape[0]}, {n}, {d.shape[0]}")
        if not np.all(np.isin(d, (0, 1))):
            raise DataError("缺失指示变量只能取 0 或 1")
        d = d.astype(int)
        if np.any(np.diff(d) > 0):
            raise DataError("数据必须按观测在前、缺失在后排列")
        if np.any(np.isnan(y) != (d == 0)):
            raise DataError("响应值缺失位置与指示变量不一致")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0][0])
            raise DataError(f"协变量存在缺失或非有限值 (行 {bad})")
        if not np.all(np.isfinite(y[d == 1])):
            raise DataError("观测响应存在非有限值")

        names = tuple(self.covariate_names) or tuple(f"x{j + 1}" for j in range(x.shape[1]))
        if len(names) != x.shape[1]:
            raise DataError(f"协变量名数量 {len(names)} 与列数 {x.shape[1]} 不符")
        order = np.arange(n) if self.row_order is None else np.array(self.row_order, dtype=int)

        for arr in (x, y, d, order):
            arr.setflags(write=False)
        object.__setattr__(self, 'covariates', x)
        object.__setattr__(self, 'response', y)
        object.__setattr__(self, 'delta', d)
        object.__setattr__(self, 'covariate_names', names)
        object.__setattr__(self, 'row_order', order)

    @classmethod
    def from_arrays(cls, covariates, response, covariate_names=(), response_name='y'):
        """由任意顺序的数组构造数据集，缺失响应用 NaN 表示"""
        y = np.asarray(response, dtype=float).reshape(-1)
        x = np.asarray(covariates, dtype=float)
        if x.size == 0:
            x = x.reshape(y.shape[0], 0)
        elif x.ndim == 1:
            x = x.reshape(-1, 1)
        delta = (~np.isnan(y)).astype(int)
        order = np.argsort(1 - delta, kind='stable')
        return cls(x[order], y[order], delta[order], tuple(covariate_names), response_name, order)

    @property
    def n(self) -> int:
        return int(self.response.shape[0])

    @property
    def n_obs(self) -> int:
        return int(self.delta.sum())

    @property
    def n_mis(self) -> int:
        return self.n - self.n_obs

    @property
    def y_obs(self) -> NDArray:
        return self.response[:self.n_obs]

    @property
    def x_obs(self) -> NDArray:
        return self.covariates[:self.n_obs]

    @property
    def x_mis(self) -> NDArray:
        return self.covariates[self.n_obs:]

    def column(self, name) -> NDArray:
        return self.covariates[:, self.covariate_names.index(name)]


# ---------------------------------------------------------------------------
# 尺度变换
# ---------------------------------------------------------------------------

class IdentityMap:
    """y = b"""

    name = 'identity'
    lower = -np.inf

    def to_base(self, y):
        return np.asarray(y, dtype=float)

    def from_base(self, b):
        return np.asarray(b, dtype=float)

    def derivs(self, b):
        """返回 (G', G'', G''')"""
        one = np.ones_like(b, dtype=float)
        return one, np.zeros_like(one), np.zeros_like(one)

    def log_dg(self, b):
        return np.zeros_like(b, dtype=float)

    def dlog_dy(self, y):
        return np.zeros_like(y, dtype=float)

    def d2log_dy2(self, y):
        return np.zeros_like(y, dtype=float)


class ShiftedLogMap:
    """y = shift + exp(b)，把 (shift, ∞) 映射到整条实轴"""

    name = 'shifted_log'

    def __init__(self, shift=0.0):
        self.shift = float(shift)
        self.lower = self.shift

    def to_base(self, y):
        y = np.asarray(y, dtype=float)
        gap = y - self.shift
        if np.any(gap <= 0):
            i = int(np.argmax(gap <= 0))
            raise DomainError(f"y_mis[{i}]={y[i]!r} 不在支撑集 ({self.shift}, ∞) 内", coordinate=f"y_mis[{i}]")
        return np.log(gap)

    def from_base(self, b):
        with np.errstate(over='ignore'):
            return self.shift + np.exp(np.asarray(b, dtype=float))

    def derivs(self, b):
        with np.errstate(over='ignore'):
            e = np.exp(np.asarray(b, dtype=float))
        return e, e, e

    def log_dg(self, b):
        return np.asarray(b, dtype=float)

    def dlog_dy(self, y):
        return 1.0 / (np.asarray(y, dtype=float) - self.shift)

    def d2log_dy2(self, y):
        return -1.0 / (np.asarray(y, dtype=float) - self.shift) ** 2


@dataclass(frozen=True)
class ScaleTransform:
    """
    v = A(ψ, D)·G⁻¹(y_mis)

    Args:
        base: 逐坐标基变换（IdentityMap / ShiftedLogMap）
        kind: 尺度类别
        factor: (ψ, D) -> A，None 表示 A = I
        name: 便于日志与报告的名称
        log_det_grad: (ψ, D) -> ∂log|A|/∂ψ 的解析形式，缺省时差分
    """
    base: object
    kind: ScaleKind
    factor: Optional[Callable] = None
    name: str = ''
    log_det_grad: Optional[Callable] = None

    @property
    def depends_on_psi(self) -> bool:
        return self.factor is not None

    def factor_at(self, psi, data):
        if self.factor is None:
            return None
        return np.asarray(self.factor(np.asarray(psi, dtype=float), data), dtype=float)

    def to_base_coords(self, v, psi=None, data=None):
        v = np.asarray(v, dtype=float)
        a = self.factor_at(psi, data)
        if a is None:
            return v
        if a.ndim == 1:
            return v / a
        return np.linalg.solve(a, v)

    def from_base_coords(self, b, psi=None, data=None):
        b = np.asarray(b, dtype=float)
        a = self.factor_at(psi, data)
        if a is None:
            return b
        if a.ndim == 1:
            return a * b
        return a @ b

    def forward(self, y, psi=None, data=None):
        return self.from_base_coords(self.base.to_base(y), psi, data)

    def inverse(self, v, psi=None, data=None):
        return self.base.from_base(self.to_base_coords(v, psi, data))

    def log_det_factor(self, psi, data) -> float:
        a = self.factor_at(psi, data)
        if a is None:
            return 0.0
        if a.ndim == 1:
            return float(np.sum(np.log(a)))
        sign, logdet = np.linalg.slogdet(a)
        if sign <= 0:
            raise DomainError("尺度缩放矩阵非正定")
        return float(logdet)

    def log_jacobian(self, y, psi=None, data=None) -> float:
        """log|∂y_mis/∂v|"""
        b = self.base.to_base(y)
        return float(np.sum(self.base.log_dg(b))) - self.log_det_factor(psi, data)

    def grad_to_v(self, grad_b, psi, data, a=None):
        """∂h/∂v = A⁻ᵀ ∂h/∂b；a 可传入已算好的 A"""
        if a is None:
            a = self.factor_at(psi, data)
        if a is None:
            return grad_b
        if a.ndim == 1:
            return grad_b / a
        return np.linalg.solve(a.T, grad_b)

    def hess_to_v(self, hess_b, psi, data):
        a = self.factor_at(psi, data)
        if a is None:
            return hess_b
        if a.ndim == 1:
            if hess_b.ndim == 1:
                return hess_b / a ** 2
            return hess_b / np.outer(a, a)
        a_inv = np.linalg.inv(a)
        dense = np.diag(hess_b) if hess_b.ndim == 1 else hess_b
        return a_inv.T @ dense @ a_inv


RAW_SCALE = ScaleTransform(IdentityMap(), ScaleKind.RAW, name='raw')


def linear_scale(multiplier, kind=ScaleKind.CANONICAL) -> ScaleTransform:
    """v = multiplier·y 的常数线性尺度"""
    def factor(psi, data):
        return np.full(data.n_mis, float(multiplier))
    return ScaleTransform(IdentityMap(), kind, factor, name=f'linear({multiplier})')


# ---------------------------------------------------------------------------
# 模型抽象
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormalizingTransform:
    """z = r(y_mis)，identity 时 z 尺度块即 y 尺度块"""
    name: str
    forward: Callable = None
    inverse: Callable = None
    inverse_derivative: Callable = None
    approximate: bool = False

    @property
    def is_identity(self) -> bool:
        return self.name == 'identity'


IDENTITY_NORMALIZER = NormalizingTransform('identity')


@dataclass(frozen=True)
class ModelSpec:
    """
    统计模型描述

    extended_loglik(ψ, y_mis, D) 为必需项；grad_y / hess_y / grad_psi 若缺省则用中心差分。
    参数 ψ 一律为自然尺度，positive 标记的坐标在内部做对数重参数化。
    generate(ψ, n, rng) 生成完全数据 (x, y, 隐藏真值)，mechanism 为缺省缺失机制，二者供模拟与 Bartlett 检验使用。
    """
    tag: str
    param_names: Tuple[str, ...]
    positive: Tuple[bool, ...]
    extended_loglik: Callable
    scale: ScaleTransform
    support_lower: float = -np.inf
    closed_marginal_loglik: Optional[Callable] = None
    canonical_function: Optional[Callable] = None
    mle_oracle: Optional[Callable] = None
    grad_y: Optional[Callable] = None
    hess_y: Optional[Callable] = None
    grad_psi: Optional[Callable] = None
    random_dim: Optional[Callable] = None
    complete_case_init: Optional[Callable] = None
    validate_data: Optional[Callable] = None
    normalizing_transform: Optional[NormalizingTransform] = None
    b_scale: Optional[ScaleTransform] = None
    b_mode: Optional[Callable] = None
    vv_structure: str = 'diagonal'
    generate: Optional[Callable] = None
    mechanism: object = None
    population_mean: Optional[Callable] = None
    constants: Mapping = field(default_factory=dict)

    @property
    def param_dim(self) -> int:
        return len(self.param_names)

    def n_random(self, data) -> int:
        if self.random_dim is not None:
            return int(self.random_dim(data))
        return data.n_mis


@dataclass
class HLikValue:
    value: float
    grad_psi: Optional[NDArray] = None
    grad_v: Optional[NDArray] = None


def with_scale(model: ModelSpec, scale: ScaleTransform) -> ModelSpec:
    return replace(model, scale=scale)


# ---------------------------------------------------------------------------
# 参数域与支撑集
# ---------------------------------------------------------------------------

def check_psi(model: ModelSpec, psi) -> NDArray:
    psi = np.asarray(psi, dtype=float).reshape(-1)
    if psi.shape[0] != model.param_dim:
        raise DomainError(f"参数维数应为 {model.param_dim}，实际为 {psi.shape[0]}")
    for j, (name, pos) in enumerate(zip(model.param_names, model.positive)):
        if not np.isfinite(psi[j]) or (pos and psi[j] <= 0):
            raise DomainError(f"参数 {name}={psi[j]!r} 超出定义域", coordinate=name)
    return psi


def check_support(model: ModelSpec, y_mis, data) -> NDArray:
    y = np.asarray(y_mis, dtype=float).reshape(-1)
    m = model.n_random(data)
    if y.shape[0] != m:
        raise DomainError(f"y_mis 长度应为 {m}，实际为 {y.shape[0]}")
    bad = ~np.isfinite(y) | (y <= model.support_lower)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DomainError(f"y_mis[{i}]={y[i]!r} 不在支撑集 ({model.support_lower}, ∞) 内",
                          coordinate=f"y_mis[{i}]")
    return y


def to_internal(model: ModelSpec, psi) -> NDArray:
    psi = check_psi(model, psi)
    eta = psi.copy()
    pos = np.asarray(model.positive, dtype=bool)
    eta[pos] = np.log(psi[pos])
    return eta


def to_natural(model: ModelSpec, eta) -> NDArray:
    eta = np.asarray(eta, dtype=float)
    psi = eta.copy()
    pos = np.asarray(model.positive, dtype=bool)
    with np.errstate(over='ignore'):
        psi[pos] = np.exp(eta[pos])
    return psi


def natural_jacobian(model: ModelSpec, psi) -> NDArray:
    """dψ/dη 的对角元"""
    pos = np.asarray(model.positive, dtype=bool)
    return np.where(pos, psi, 1.0)


# ---------------------------------------------------------------------------
# 求值
# ---------------------------------------------------------------------------

def extended_loglik(model: ModelSpec, psi, y_mis, data: Dataset) -> float:
    """ℓ_e(ψ, y_mis)"""
    psi = check_psi(model, psi)
    y = check_support(model, y_mis, data)
    value = float(model.extended_loglik(psi, y, data))
    if not np.isfinite(value):
        raise DomainError(f"扩展似然在 ψ={psi} 处非有限")
    return value


def hlik_in_y(model: ModelSpec, psi, y_mis, data: Dataset) -> float:
    """H(ψ, y_mis) = ℓ_e(ψ, y_mis) + log|∂y_mis/∂v|"""
    value = extended_loglik(model, psi, y_mis, data)
    return value + model.scale.log_jacobian(y_mis, psi, data)


def hlik(model: ModelSpec, psi, v, data: Dataset, gradients=False, accept_extended=False) -> HLikValue:
    """
    h(ψ, v) = ℓ_e(ψ, g⁻¹(v)) + log|∂y_mis/∂v|

    Args:
        gradients: 是否同时返回 ∂h/∂ψ（固定 v）与 ∂h/∂v
        accept_extended: 原始尺度下 h 即扩展似然，需调用方显式接受
    """
    if model.scale.kind == ScaleKind.RAW and not accept_extended:
        raise UsageError("原始尺度上的 h 只是扩展似然，需传入 accept_extended=True")
    psi = check_psi(model, psi)
    y = model.scale.inverse(v, psi, data)
    value = hlik_in_y(model, psi, y, data)
    if not gradients:
        return HLikValue(value)
    return HLikValue(value, grad_psi_at_v(model, psi, v, data), grad_v(model, psi, v, data))


# ---------------------------------------------------------------------------
# 导数
# ---------------------------------------------------------------------------

def ell_grad_y(model, psi, y, data) -> NDArray:
    if model.grad_y is not None:
        return np.asarray(model.grad_y(psi, y, data), dtype=float)
    return fd_jacobian(lambda yy: model.extended_loglik(psi, yy, data), y)


def ell_hess_y(model, psi, y, data) -> NDArray:
    """∂²ℓ_e/∂y²；对角结构返回向量，否则返回矩阵"""
    if model.hess_y is not None:
        return np.asarray(model.hess_y(psi, y, data), dtype=float)
    dense = fd_jacobian(lambda yy: ell_grad_y(model, psi, yy, data), y)
    dense = 0.5 * (dense + dense.T)
    if model.vv_structure == 'diagonal':
        return np.diag(dense).copy()
    return dense


def ell_grad_psi(model, psi, y, data) -> NDArray:
    if model.grad_psi is not None:
        return np.asarray(model.grad_psi(psi, y, data), dtype=float)
    return fd_jacobian(lambda p: model.extended_loglik(p, y, data), psi)


def grad_y_H(model, psi, y, data) -> NDArray:
    """∂H/∂y_mis（ψ 固定）"""
    return ell_grad_y(model, psi, y, data) + model.scale.base.dlog_dy(y)


def hess_y_H(model, psi, y, data) -> NDArray:
    hess = ell_hess_y(model, psi, y, data)
    extra = model.scale.base.d2log_dy2(y)
    if hess.ndim == 1:
        return hess + extra
    return hess + np.diag(extra)


def log_det_factor_grad(scale: ScaleTransform, psi, data) -> NDArray:
    if scale.log_det_grad is not None:
        return np.asarray(scale.log_det_grad(psi, data), dtype=float)
    return fd_jacobian(lambda p: scale.log_det_factor(p, data), psi, richardson=True)


def grad_psi_H(model, psi, y, data) -> NDArray:
    """∂H/∂ψ（y_mis 固定），其中 −log|A(ψ)| 一项对 ψ 求导"""
    grad = ell_grad_psi(model, psi, y, data)
    if model.scale.depends_on_psi:
        grad = grad - log_det_factor_grad(model.scale, psi, data)
    return grad


def base_grad_hess(model, psi, b, data):
    """
    基坐标 b 下 h 的梯度与 Hessian

    h_b(ψ, b) = ℓ_e(ψ, G(b)) + Σ log G'(b)，与 h 只差 −log|A(ψ)|。
    """
    base = model.scale.base
    y = base.from_base(b)
    g1, g2, g3 = base.derivs(b)
    ly = ell_grad_y(model, psi, y, data)
    lyy = ell_hess_y(model, psi, y, data)
    grad = ly * g1 + g2 / g1
    diag_part = ly * g2 + (g3 * g1 - g2 ** 2) / g1 ** 2
    if lyy.ndim == 1:
        hess = lyy * g1 ** 2 + diag_part
    else:
        hess = g1[:, None] * lyy * g1[None, :] + np.diag(diag_part)
    return grad, hess


def base_value(model, psi, b, data) -> float:
    """h_b(ψ, b)，基坐标下的目标函数值；越出支撑集时抛 DomainError"""
    base = model.scale.base
    y = base.from_base(b)
    return extended_loglik(model, psi, y, data) + float(np.sum(base.log_dg(b)))


def y_blocks(model, psi, y, data):
    """
    y_mis 坐标下 H 的负二阶导分块 (I_ψψ, I_ψy, I_yy)

    I_yy 为解析（或模型缺省时差分）结果；交叉块与 ψψ 块对解析梯度做带 Richardson 外推的中心差分。
    """
    psi = np.asarray(psi, dtype=float)
    y = np.asarray(y, dtype=float)
    I_yy = -hess_y_H(model, psi, y, data)
    I_py = -fd_jacobian(lambda p: grad_y_H(model, p, y, data), psi, richardson=True).reshape(y.size, psi.size).T
    I_pp = -fd_jacobian(lambda p: grad_psi_H(model, p, y, data), psi, richardson=True)
    I_pp = 0.5 * (I_pp + I_pp.T)
    return I_pp, I_py, I_yy


def grad_v(model, psi, v, data) -> NDArray:
    b = model.scale.to_base_coords(v, psi, data)
    grad_b, _ = base_grad_hess(model, psi, b, data)
    return model.scale.grad_to_v(grad_b, psi, data)


def hess_v(model, psi, v, data) -> NDArray:
    b = model.scale.to_base_coords(v, psi, data)
    _, hess_b = base_grad_hess(model, psi, b, data)
    return model.scale.hess_to_v(hess_b, psi, data)


def grad_psi_at_v(model, psi, v, data) -> NDArray:
    """∂h/∂ψ（v 固定）= ∂H/∂ψ + ∂H/∂y · ∂y/∂ψ|_v"""
    scale = model.scale
    y = scale.inverse(v, psi, data)
    grad = grad_psi_H(model, psi, y, data)
    if scale.depends_on_psi and y.size:
        b = scale.to_base_coords(v, psi, data)
        g1, _, _ = scale.base.derivs(b)
        db_dpsi = fd_jacobian(lambda p: scale.to_base_coords(v, p, data), psi)
        grad = grad + (grad_y_H(model, psi, y, data) * g1) @ db_dpsi
    return grad

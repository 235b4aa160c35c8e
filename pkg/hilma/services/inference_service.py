"""
基于 Hessian 分块的方差估计

    Î^{ψψ} = (I_ψψ − I_ψv I_vv⁻¹ I_vψ)⁻¹
    ∂ỹᵀ/∂ψ = −I_ψy I_yy⁻¹
    var(ŷ − y₀) = I_yy⁻¹ I_yψ Î^{ψψ} I_ψy I_yy⁻¹
    Î^{yy}      = var(ŷ − y₀) + I_yy⁻¹
"""
import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.typing import NDArray
from scipy import linalg
from scipy.stats import norm

from hilma.services import hlik_service as hs
from hilma.utils.errors import CurvatureError, RankError, UnsupportedError, UsageError
from hilma.utils.numdiff import fd_hessian, fd_jacobian

logger = logging.getLogger(__name__)


@dataclass
class HessianBlocks:
    """
    h 在拟合点处的负二阶导分块

    I_vv 对角结构时存为向量。scale_tag 取 'v'、'y_mis' 或 'z'。
    """
    I_psi_psi: NDArray
    I_psi_v: NDArray
    I_vv: NDArray
    psi_hat: NDArray
    point: NDArray
    scale_tag: str
    param_names: Tuple[str, ...] = ()

    @property
    def evaluated_at(self):
        return self.psi_hat, self.point

    @property
    def is_diagonal(self) -> bool:
        return self.I_vv.ndim == 1

    def I_vv_dense(self) -> NDArray:
        return np.diag(self.I_vv) if self.is_diagonal else self.I_vv


@dataclass
class VarianceReport:
    var_psi: NDArray
    var_y_estimation: NDArray
    var_y_prediction: NDArray
    y_hat: NDArray
    lower: NDArray
    upper: NDArray
    level: float

    @property
    def se_prediction(self) -> NDArray:
        return np.sqrt(np.diag(self.var_y_prediction))

    @property
    def se_estimation(self) -> NDArray:
        return np.sqrt(np.diag(self.var_y_estimation))

    @property
    def intervals(self) -> NDArray:
        return np.column_stack([self.lower, self.upper])


def _check_vv(I_vv):
    if I_vv.ndim == 1:
        if np.any(~np.isfinite(I_vv)) or np.any(I_vv <= 0):
            raise CurvatureError("I_vv 非正定，拒绝用于推断")
        return None
    try:
        return linalg.cho_factor(I_vv, lower=True)
    except linalg.LinAlgError:
        raise CurvatureError("I_vv 非正定，拒绝用于推断")


def vv_solve(I_vv, rhs) -> NDArray:
    """I_vv⁻¹·rhs，对角时逐元素相除，否则 Cholesky"""
    rhs = np.asarray(rhs, dtype=float)
    factor = _check_vv(I_vv)
    if factor is None:
        return rhs / (I_vv if rhs.ndim == 1 else I_vv[:, None])
    return linalg.cho_solve(factor, rhs)


def schur_complement(I_pp, I_pv, I_vv) -> NDArray:
    if I_pv.shape[1] == 0:
        return np.array(I_pp, dtype=float)
    S = I_pp - I_pv @ vv_solve(I_vv, I_pv.T)
    return 0.5 * (S + S.T)


def blocks_in_y(model, psi, y_mis, data) -> HessianBlocks:
    I_pp, I_py, I_yy = hs.y_blocks(model, psi, y_mis, data)
    return HessianBlocks(I_pp, I_py, I_yy, np.asarray(psi, dtype=float),
                         np.asarray(y_mis, dtype=float), 'y_mis', model.param_names)


def blocks_in_v(model, psi, v, data) -> HessianBlocks:
    psi = np.asarray(psi, dtype=float)
    v = np.asarray(v, dtype=float)
    I_vv = -hs.hess_v(model, psi, v, data)
    I_pv = -fd_jacobian(lambda p: hs.grad_v(model, p, v, data), psi, richardson=True).reshape(v.size, psi.size).T
    I_pp = -fd_hessian(lambda p: hs.hlik(model, p, v, data, accept_extended=True).value, psi)
    return HessianBlocks(I_pp, I_pv, I_vv, psi, v, 'v', model.param_names)


def hessian_blocks(model, fit, scale='v') -> HessianBlocks:
    """
    拟合点处的 Hessian 分块

    Args:
        model: 模型
        fit: 已收敛的 FitResult
        scale: 'v' 或 'y_mis'
    """
    if not fit.converged:
        raise UsageError("拟合未收敛，不能计算推断分块")
    if scale == 'y_mis':
        blocks = blocks_in_y(model, fit.psi_hat, fit.y_mis_hat, fit.data)
    elif scale == 'v':
        blocks = blocks_in_v(model, fit.psi_hat, fit.v_hat, fit.data)
    else:
        raise UsageError(f"未知尺度: {scale}")
    try:
        _check_vv(blocks.I_vv)
    except CurvatureError:
        logger.warning("I_vv 在拟合点处非正定")
        raise
    return blocks


def var_fixed(blocks: HessianBlocks) -> NDArray:
    """Î^{ψψ}，Schur 补的逆"""
    S = schur_complement(blocks.I_psi_psi, blocks.I_psi_v, blocks.I_vv)
    try:
        factor = linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        w, vecs = np.linalg.eigh(S)
        direction = vecs[:, int(np.argmin(w))]
        raise RankError(f"固定参数信息矩阵奇异，最小特征值 {w.min():.3e}", direction=direction)
    V = linalg.cho_solve(factor, np.eye(S.shape[0]))
    return 0.5 * (V + V.T)


def dtilde_v_dpsi(blocks: HessianBlocks) -> NDArray:
    """众数对 ψ 的隐函数导数 −I_ψv I_vv⁻¹，形状 (p, n_mis)"""
    if blocks.I_psi_v.shape[1] == 0:
        return np.zeros_like(blocks.I_psi_v)
    try:
        return -vv_solve(blocks.I_vv, blocks.I_psi_v.T).T
    except CurvatureError as e:
        raise RankError(str(e))


def var_random(blocks: HessianBlocks, var_psi, level=0.95) -> VarianceReport:
    """
    随机参数的估计方差、预测方差与预测区间

    Args:
        blocks: y_mis（或 z）尺度下的分块
        var_psi: Î^{ψψ}
        level: 区间水平
    """
    if blocks.scale_tag not in ('y_mis', 'z'):
        raise UsageError(f"var_random 需要 y_mis/z 尺度分块，实际为 {blocks.scale_tag}")
    if not 0 < level < 1:
        raise UsageError(f"区间水平必须在 (0,1) 内: {level}")
    var_psi = np.asarray(var_psi, dtype=float)
    D = dtilde_v_dpsi(blocks).T
    est = D @ var_psi @ D.T
    inv_vv = vv_solve(blocks.I_vv, np.eye(blocks.I_vv.shape[0]))
    pred = est + inv_vv
    z = norm.ppf(0.5 + level / 2.0)
    se = np.sqrt(np.diag(pred))
    y_hat = np.asarray(blocks.point, dtype=float)
    return VarianceReport(var_psi, est, pred, y_hat, y_hat - z * se, y_hat + z * se, level)


def z_scale_report(model, fit, level=0.95) -> VarianceReport:
    """
    在模型声明的正态化变换 z = r(y_mis) 下计算预测区间，再经 r⁻¹ 映回

    恒等变换时 z 尺度分块即 y_mis 尺度分块。
    """
    transform = model.normalizing_transform
    if transform is None:
        raise UnsupportedError(f"模型 {model.tag} 未声明正态化变换")
    if transform.approximate:
        logger.warning(f"模型 {model.tag} 的正态化变换 {transform.name} 仅为近似")

    if transform.is_identity:
        blocks = blocks_in_y(model, fit.psi_hat, fit.y_mis_hat, fit.data)
        blocks.scale_tag = 'z'
        return var_random(blocks, var_fixed(blocks), level)

    psi = np.asarray(fit.psi_hat, dtype=float)
    p = psi.size
    z_hat = np.asarray(transform.forward(fit.y_mis_hat), dtype=float)

    def h_z(theta):
        zz = theta[p:]
        y = transform.inverse(zz)
        jac = np.sum(np.log(np.abs(transform.inverse_derivative(zz))))
        return hs.extended_loglik(model, theta[:p], y, fit.data) + jac

    full = -fd_hessian(h_z, np.concatenate([psi, z_hat]))
    blocks = HessianBlocks(full[:p, :p], full[:p, p:], full[p:, p:], psi, z_hat, 'z', model.param_names)
    report = var_random(blocks, var_fixed(blocks), level)
    report.y_hat = np.asarray(fit.y_mis_hat, dtype=float)
    report.lower = np.asarray(transform.inverse(report.lower), dtype=float)
    report.upper = np.asarray(transform.inverse(report.upper), dtype=float)
    return report

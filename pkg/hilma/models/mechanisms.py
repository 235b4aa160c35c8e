"""
缺失机制

    logistic_mar       logit P(δ=1|x) = ρ0 + ρ1·x + ρ2·x²
    threshold_censor   δ = I(y ≤ c)
    fixed_pattern      指定下标缺失（缺省为最后一个观测）
"""
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Optional, Tuple

import numpy as np
from scipy.special import expit, log_expit
from sklearn.linear_model import LogisticRegression

from hilma.utils.errors import DataError, UsageError

logger = logging.getLogger(__name__)


class MechanismKind(str, Enum):
    LOGISTIC_MAR = 'logistic_mar'
    THRESHOLD_CENSOR = 'threshold_censor'
    FIXED_PATTERN = 'fixed_pattern'


@dataclass(frozen=True)
class MissingnessMechanism:
    kind: MechanismKind
    rho: Optional[Tuple[float, float, float]] = None
    c: Optional[float] = None
    indices: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        kind = MechanismKind(self.kind)
        object.__setattr__(self, 'kind', kind)
        if kind == MechanismKind.LOGISTIC_MAR:
            if self.rho is None or len(self.rho) != 3 or not np.all(np.isfinite(self.rho)):
                raise UsageError(f"logistic_mar 需要三个有限的 ρ 系数: {self.rho}")
            object.__setattr__(self, 'rho', tuple(float(r) for r in self.rho))
        elif kind == MechanismKind.THRESHOLD_CENSOR:
            if self.c is None or not np.isfinite(self.c):
                raise UsageError(f"删失阈值必须有限: {self.c}")
            object.__setattr__(self, 'c', float(self.c))
        elif self.indices is not None:
            object.__setattr__(self, 'indices', tuple(int(i) for i in self.indices))

    def response_prob(self, x) -> np.ndarray:
        """P(δ=1|x)，仅 logistic_mar"""
        if self.kind != MechanismKind.LOGISTIC_MAR:
            raise UsageError(f"{self.kind.value} 机制没有响应概率")
        x = np.asarray(x, dtype=float)
        r0, r1, r2 = self.rho
        return expit(r0 + r1 * x + r2 * x ** 2)

    def apply(self, x, y, rng) -> np.ndarray:
        """
        对完全数据施加缺失机制

        Args:
            x: 第一列协变量（logistic_mar 使用）
            y: 完全响应
            rng: numpy Generator

        Returns:
            δ，1 表示观测
        """
        y = np.asarray(y, dtype=float)
        n = y.shape[0]
        if self.kind == MechanismKind.LOGISTIC_MAR:
            return (rng.random(n) < self.response_prob(x)).astype(int)
        if self.kind == MechanismKind.THRESHOLD_CENSOR:
            return (y <= self.c).astype(int)
        delta = np.ones(n, dtype=int)
        missing = (n - 1,) if self.indices is None else self.indices
        for i in missing:
            if not -n <= i < n:
                raise UsageError(f"缺失下标 {i} 越界 (n={n})")
            delta[i] = 0
        return delta

    def log_prob(self, delta, x) -> float:
        """Σ log f_ρ(δ_i|x_i)；阈值与固定模式下为 0"""
        if self.kind != MechanismKind.LOGISTIC_MAR:
            return 0.0
        x = np.asarray(x, dtype=float)
        r0, r1, r2 = self.rho
        eta = r0 + r1 * x + r2 * x ** 2
        delta = np.asarray(delta)
        return float(np.sum(np.where(delta == 1, log_expit(eta), log_expit(-eta))))


def logistic_mar(rho=(1.0, 2.0, 0.3)) -> MissingnessMechanism:
    return MissingnessMechanism(MechanismKind.LOGISTIC_MAR, rho=tuple(rho))


def threshold_censor(c) -> MissingnessMechanism:
    return MissingnessMechanism(MechanismKind.THRESHOLD_CENSOR, c=c)


def fixed_pattern(indices=None) -> MissingnessMechanism:
    return MissingnessMechanism(MechanismKind.FIXED_PATTERN, indices=indices)


def fit_mechanism(data, column=0) -> MissingnessMechanism:
    """
    在 (x, x²) 上单独拟合 logistic 响应模型，得到 ρ̂

    ρ 与 θ 变差独立，故此拟合与 θ 的估计互不影响。
    """
    delta = np.asarray(data.delta)
    if delta.min() == delta.max():
        raise DataError("所有响应同为观测或同为缺失，无法拟合响应机制")
    x = data.covariates[:, column]
    features = np.column_stack([x, x ** 2])
    clf = LogisticRegression(penalty=None, max_iter=1000)
    try:
        clf.fit(features, delta)
    except ValueError as e:
        raise DataError(f"响应机制拟合失败: {e}")
    rho = (float(clf.intercept_[0]), float(clf.coef_[0, 0]), float(clf.coef_[0, 1]))
    logger.info(f"响应机制拟合完成: ρ̂={rho}")
    return logistic_mar(rho)


def include_mechanism(model, mechanism: MissingnessMechanism, column=0):
    """
    把 log f_ρ(δ|x) 加入扩展似然（ρ 固定）

    该项不含 ψ 与 y_mis，ψ̂ 与 ŷ_mis 都不受影响。
    """
    def extended(psi, y_mis, data):
        return model.extended_loglik(psi, y_mis, data) + mechanism.log_prob(data.delta, data.covariates[:, column])

    closed = None
    if model.closed_marginal_loglik is not None:
        def closed(psi, data):
            return (model.closed_marginal_loglik(psi, data)
                    + mechanism.log_prob(data.delta, data.covariates[:, column]))

    return replace(model, extended_loglik=extended, closed_marginal_loglik=closed)

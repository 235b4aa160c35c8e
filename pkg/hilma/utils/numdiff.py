"""
数值微分工具

中心差分步长 h = cbrt(eps)·max(1,|x|)；二阶差分使用 eps^(1/4) 量级步长。
"""
import numpy as np

EPS = np.finfo(float).eps
FD_STEP = np.cbrt(EPS)
FD_STEP_2 = EPS ** 0.25


def fd_steps(x, base=FD_STEP):
    x = np.asarray(x, dtype=float)
    return base * np.maximum(1.0, np.abs(x))


def _central(f, x, steps):
    columns = []
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = steps[j]
        fp = np.asarray(f(x + e), dtype=float)
        fm = np.asarray(f(x - e), dtype=float)
        columns.append((fp - fm) / (2.0 * steps[j]))
    return np.stack(columns, axis=-1)


def fd_jacobian(f, x, richardson=False, steps=None):
    """
    中心差分 Jacobian

    Args:
        f: 向量或标量函数
        x: 求导点
        richardson: 是否做一次 Richardson 外推 (4·D(h/2) − D(h))/3
        steps: 自定义步长

    Returns:
        f 为标量时返回 (p,) 梯度，否则返回 (m, p) 矩阵
    """
    x = np.asarray(x, dtype=float).copy()
    steps = fd_steps(x) if steps is None else np.asarray(steps, dtype=float)
    jac = _central(f, x, steps)
    if richardson:
        half = _central(f, x, steps / 2.0)
        jac = (4.0 * half - jac) / 3.0
    return jac


def fd_gradient(f, x, richardson=False):
    return fd_jacobian(f, x, richardson=richardson)


def fd_hessian(f, x, steps=None):
    """标量函数的二阶中心差分 Hessian（对称化）"""
    x = np.asarray(x, dtype=float).copy()
    p = x.size
    steps = fd_steps(x, FD_STEP_2) if steps is None else np.asarray(steps, dtype=float)
    f0 = f(x)
    hess = np.zeros((p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = steps[i]
        hess[i, i] = (f(x + ei) - 2.0 * f0 + f(x - ei)) / steps[i] ** 2
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = steps[j]
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej))
            hess[i, j] = hess[j, i] = val / (4.0 * steps[i] * steps[j])
    return hess


def fd_second_jacobian(f, x, steps=None):
    """
    向量函数的二阶中心差分，返回 (m, p, p)

    用于 ∂²I_bb/∂ψ_j∂ψ_k 这类需要对矩阵值函数做二阶差分的场合。
    """
    x = np.asarray(x, dtype=float).copy()
    p = x.size
    steps = fd_steps(x, FD_STEP_2) if steps is None else np.asarray(steps, dtype=float)
    f0 = np.asarray(f(x), dtype=float)
    out = np.zeros(f0.shape + (p, p))
    for i in range(p):
        ei = np.zeros(p)
        ei[i] = steps[i]
        out[..., i, i] = (np.asarray(f(x + ei)) - 2.0 * f0 + np.asarray(f(x - ei))) / steps[i] ** 2
        for j in range(i + 1, p):
            ej = np.zeros(p)
            ej[j] = steps[j]
            val = (np.asarray(f(x + ei + ej)) - np.asarray(f(x + ei - ej))
                   - np.asarray(f(x - ei + ej)) + np.asarray(f(x - ei - ej)))
            out[..., i, j] = out[..., j, i] = val / (4.0 * steps[i] * steps[j])
    return out

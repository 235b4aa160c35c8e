#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Laplace 近似与 Bartlett 检验测试
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from hilma.models import (build_censored_exponential, build_exponential_mean, build_normal_regression,
                          build_one_way_mixed, build_tobit, simulate)
from hilma.models.base import identity_b_scale
from hilma.services import hlik_service as hs
from hilma.services.laplace_service import (LOG_2PI, approx_mle, bartlett_check, laplace_marginal,
                                            laplace_score_hessian, make_weak_canonical)
from hilma.services.simulation_service import SimConfig, run_simulation
from hilma.services.solver_service import joint_maximize, profile_loglik, solve_random_given_psi
from hilma.utils.errors import UnsupportedError, UsageError
from hilma.utils.numdiff import fd_gradient, fd_hessian


@pytest.fixture(scope='module')
def normal_data():
    return simulate(build_normal_regression(), (1.0, 2.0, 1.0), n=100, seed=8).dataset


@pytest.fixture(scope='module')
def tobit_data():
    return simulate(build_tobit(c=3.0), (1.0, 3.0, 1.0), n=100, seed=6).dataset


def test_laplace_exact_for_gaussian(normal_data):
    model = build_normal_regression()
    for psi in ([1.0, 2.0, 1.0], [0.7, 1.5, 2.2]):
        closed = model.closed_marginal_loglik(np.array(psi), normal_data)
        assert laplace_marginal(model, psi, normal_data) == pytest.approx(closed, rel=1e-10)


def test_laplace_close_for_tobit(tobit_data):
    model = build_tobit(c=3.0)
    psi = np.array([1.0, 3.0, 1.0])
    closed = model.closed_marginal_loglik(psi, tobit_data)
    approx = laplace_marginal(model, psi, tobit_data)
    assert abs(approx - closed) / abs(closed) < 0.01


def test_laplace_score_matches_finite_differences(tobit_data):
    model = build_tobit(c=3.0)
    psi = np.array([0.9, 2.8, 1.2])
    score, hessian = laplace_score_hessian(model, psi, tobit_data)
    num = fd_gradient(lambda p: laplace_marginal(model, p, tobit_data), psi, richardson=True)
    np.testing.assert_allclose(score, num, rtol=1e-4, atol=1e-5)
    assert np.all(np.linalg.eigvalsh(hessian) < 0)


def test_approx_mle_matches_joint_fit_for_gaussian(normal_data):
    model = build_normal_regression()
    lap = approx_mle(model, normal_data)
    exact = joint_maximize(model, normal_data)
    np.testing.assert_allclose(lap.psi_hat, exact.psi_hat, atol=1e-6)
    np.testing.assert_allclose(lap.y_mis_hat, exact.y_mis_hat, atol=1e-6)
    assert lap.scale_kind == hs.ScaleKind.WEAK_CANONICAL


def test_approx_mle_tobit_close_to_mle():
    model = build_tobit(c=3.0)
    data = simulate(model, (1.0, 3.0, 1.0), n=500, seed=12).dataset
    lap = approx_mle(model, data)
    exact = joint_maximize(model, data)
    assert np.max(np.abs(lap.psi_hat - exact.psi_hat)) < 0.05
    assert lap.blocks is not None
    assert np.all(lap.y_mis_hat > 3.0)

    # ψ̂^Lap 处得分为 0，且在 w 尺度上 h(ψ̂^Lap, ŵ) 与 ℓ̂_m 只差常数
    score, hessian = laplace_score_hessian(model, lap.psi_hat, data)
    assert np.max(np.abs(score)) <= 1e-6
    assert np.all(np.linalg.eigvalsh(hessian) < 0)
    w_model = hs.with_scale(model, make_weak_canonical(model).scale)
    h_at_fit = hs.hlik(w_model, lap.psi_hat, lap.v_hat, data).value
    assert h_at_fit + 0.5 * data.n_mis * LOG_2PI == pytest.approx(lap.h_value, abs=1e-8)


def test_weak_canonical_scale_kind():
    weak = make_weak_canonical(build_tobit(c=3.0))
    assert weak.scale.kind == hs.ScaleKind.WEAK_CANONICAL


@pytest.mark.parametrize('name', ['tobit', 'censored_exp'])
def test_weak_scale_h_differs_from_laplace_by_constant(name, tobit_data):
    if name == 'tobit':
        model, data = build_tobit(c=3.0), tobit_data
        points = ([1.0, 3.0, 1.0], [0.8, 2.6, 1.4], [1.3, 3.4, 0.7])
    else:
        model = build_censored_exponential(c=3.0)
        data = simulate(model, (2.0,), n=100, seed=15).dataset
        points = ([2.0], [1.4], [2.9])
    w_model = hs.with_scale(model, make_weak_canonical(model).scale)
    assert data.n_mis > 0
    for psi in points:
        h_weak = profile_loglik(w_model, psi, data)
        assert h_weak - laplace_marginal(model, psi, data) == pytest.approx(-0.5 * data.n_mis * LOG_2PI, abs=1e-8)


def test_canonical_and_weak_scales_impute_alike(tobit_data):
    model = build_tobit(c=3.0)
    fit = joint_maximize(model, tobit_data)
    w_model = hs.with_scale(model, make_weak_canonical(model).scale)
    y_canonical = solve_random_given_psi(model, fit.psi_hat, tobit_data)
    y_weak = solve_random_given_psi(w_model, fit.psi_hat, tobit_data)
    np.testing.assert_allclose(y_weak, y_canonical, atol=1e-8)
    np.testing.assert_allclose(y_canonical, fit.y_mis_hat, atol=1e-8)


def test_laplace_imputation_moves_with_parameter_estimate():
    model = build_tobit(c=3.0)
    for k in range(100):
        data = simulate(model, (1.0, 3.0, 1.0), n=100, seed=500 + k).dataset
        lap = approx_mle(model, data, blocks=False)
        exact = joint_maximize(model, data)
        step = float(np.max(np.abs(lap.psi_hat - exact.psi_hat)))
        bound = 10.0 * step * (1.0 + np.abs(data.x_mis[:, 0]))
        assert np.all(np.abs(lap.y_mis_hat - exact.y_mis_hat) <= bound + 1e-10), f"数据集 {k}"


def test_laplace_hessian_matches_finite_differences(tobit_data, normal_data):
    model = build_tobit(c=3.0)
    psi = np.array([0.9, 2.8, 1.2])
    _, hessian = laplace_score_hessian(model, psi, tobit_data)
    num = fd_hessian(lambda p: laplace_marginal(model, p, tobit_data), psi)
    np.testing.assert_allclose(hessian, num, rtol=1e-4, atol=1e-4 * np.max(np.abs(num)))

    # Laplace 对高斯模型精确，Hessian 即闭式边际似然的 Hessian
    gaussian = build_normal_regression()
    psi = np.array([0.7, 1.5, 2.2])
    _, hessian = laplace_score_hessian(gaussian, psi, normal_data)
    num = fd_hessian(lambda p: gaussian.closed_marginal_loglik(p, normal_data), psi)
    np.testing.assert_allclose(hessian, num, rtol=1e-4, atol=1e-4 * np.max(np.abs(num)))


def test_models_without_b_scale_are_unsupported():
    model = build_one_way_mixed(q=3, n_per_group=2)
    data = simulate(model, (0.0, 1.0, 1.0), n=6, seed=2).dataset
    with pytest.raises(UnsupportedError):
        approx_mle(model, data)


def test_bartlett_holds_on_log_scale():
    result = bartlett_check(build_exponential_mean(), (2.0,), n_draws=5000, seed=1)
    assert result.first_identity_holds(k=4.0)
    assert result.second_identity_holds(k=4.0)

    result = bartlett_check(build_censored_exponential(c=3.0), (2.0,), n_draws=5000, seed=2, threads=2)
    assert result.first_identity_holds(k=4.0)
    assert result.second_identity_holds(k=4.0)
    assert result.to_dict()['n_draws'] == 5000


def test_bartlett_fails_on_truncated_identity_scale():
    result = bartlett_check(build_censored_exponential(c=3.0), (2.0,), b_scale=identity_b_scale(),
                            n_draws=2000, seed=3)
    assert not result.first_identity_holds()


def test_bartlett_is_thread_independent():
    model = build_censored_exponential(c=3.0)
    one = bartlett_check(model, (2.0,), n_draws=1000, seed=4, threads=1)
    four = bartlett_check(model, (2.0,), n_draws=1000, seed=4, threads=4)
    np.testing.assert_array_equal(one.score_mean, four.score_mean)


def test_bartlett_argument_checks():
    with pytest.raises(UsageError):
        bartlett_check(build_exponential_mean(), (2.0,), n_draws=999)
    with pytest.raises(UnsupportedError):
        bartlett_check(build_one_way_mixed(), (0.0, 1.0, 1.0), n_draws=1000)


@pytest.mark.slow
def test_tobit_laplace_imputation_tracks_ml():
    config = SimConfig(model_tag='tobit', true_params=(1.0, 3.0, 1.0), n=500, reps=500, seed=2024,
                       estimators=('y_ML', 'y_ML_lap'), model_kwargs={'c': 3.0}, threads=4)
    table = run_simulation(config)
    diff = np.array(table.rows['y_ML'].values) - np.array(table.rows['y_ML_lap'].values)
    assert np.mean(np.abs(diff)) < 0.01


if __name__ == '__main__':
    pytest.main([__file__])

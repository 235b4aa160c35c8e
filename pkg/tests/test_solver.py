#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
联合极大化测试
闭式 MLE、典则尺度常数差、剖面得分与原始尺度反例
"""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from hilma.models import (build_censored_exponential, build_exponential_mean, build_exponential_regression,
                          build_normal_regression, build_one_way_mixed, build_tobit, raw_joint_modes, simulate)
from hilma.services import hlik_service as hs
from hilma.services.inference_service import var_fixed
from hilma.services.solver_service import (SolveOptions, inner_mode, joint_maximize, newton_maximize,
                                           profile_loglik, solve_random_given_psi)
from hilma.utils.errors import ConvergenceError, DomainError, RankError
from hilma.utils.numdiff import fd_gradient, fd_hessian


def censored_small():
    return hs.Dataset.from_arrays(np.zeros((5, 0)), [1.0, 2.0, 1.0, 2.0, np.nan])


def test_censored_closed_form():
    model = build_censored_exponential(c=3.0)
    fit = joint_maximize(model, censored_small())
    assert fit.converged
    assert fit.psi_hat[0] == pytest.approx(2.25, abs=1e-8)
    np.testing.assert_allclose(fit.y_mis_hat, [5.25], atol=1e-8)
    assert fit.grad_norm <= 1e-8


def test_exponential_mean_closed_form():
    model = build_exponential_mean()
    data = hs.Dataset.from_arrays(np.zeros((4, 0)), [1.0, 2.0, 3.0, np.nan])
    fit = joint_maximize(model, data)
    assert fit.psi_hat[0] == pytest.approx(2.0, abs=1e-8)
    np.testing.assert_allclose(fit.y_mis_hat, [2.0], atol=1e-8)
    assert fit.as_dict() == {'theta': pytest.approx(2.0, abs=1e-8)}


def test_censored_oracle_on_seeded_datasets():
    model = build_censored_exponential(c=3.0)
    for seed in range(100):
        n = 50 + (seed * 45) % 451
        data = simulate(model, (2.0,), n=n, seed=seed).dataset
        fit = joint_maximize(model, data)
        assert fit.psi_hat[0] == pytest.approx(model.mle_oracle(data)[0], abs=1e-8)


def test_no_missing_reduces_to_complete_data_mle():
    model = build_exponential_mean()
    data = hs.Dataset.from_arrays(np.zeros((3, 0)), [1.0, 2.0, 4.0])
    fit = joint_maximize(model, data)
    assert fit.psi_hat[0] == pytest.approx(7.0 / 3.0, abs=1e-8)
    assert fit.y_mis_hat.size == 0


def test_all_missing_is_rank_error():
    model = build_exponential_mean()
    data = hs.Dataset.from_arrays(np.zeros((2, 0)), [np.nan, np.nan])
    with pytest.raises(RankError):
        joint_maximize(model, data)


@pytest.mark.parametrize('name', ['exp_mean', 'censored_exp', 'normal_reg', 'tobit', 'mixed_oneway', 'exp_reg'])
def test_canonical_scale_constant_difference(name):
    if name == 'exp_mean':
        model = build_exponential_mean()
        data = simulate(model, (2.0,), n=30, seed=1).dataset
        grid = [np.array([t]) for t in np.linspace(0.5, 5.0, 50)]
    elif name == 'censored_exp':
        model = build_censored_exponential(c=3.0)
        data = simulate(model, (2.0,), n=60, seed=2).dataset
        grid = [np.array([t]) for t in np.linspace(0.5, 5.0, 50)]
    elif name == 'normal_reg':
        model = build_normal_regression()
        data = simulate(model, (1.0, 2.0, 1.0), n=60, seed=3).dataset
        grid = [np.array([1.0 + 0.02 * k, 2.0 - 0.01 * k, 0.5 + 0.04 * k]) for k in range(50)]
    elif name == 'tobit':
        model = build_tobit(c=3.0)
        data = simulate(model, (1.0, 3.0, 1.0), n=60, seed=4).dataset
        grid = [np.array([1.0 + 0.01 * k, 3.0 - 0.02 * k, 0.6 + 0.03 * k]) for k in range(50)]
    elif name == 'exp_reg':
        model = build_exponential_regression()
        data = simulate(model, (1.0, 2.0), n=60, seed=6).dataset
        grid = [np.array([0.5 + 0.02 * k, 2.5 - 0.03 * k]) for k in range(50)]
    else:
        model = build_one_way_mixed(q=6, n_per_group=3)
        data = simulate(model, (0.0, 1.0, 2.0), n=18, seed=5).dataset
        grid = [np.array([0.1 * k - 2.0, 0.5 + 0.03 * k, 0.4 + 0.05 * k]) for k in range(50)]
    diffs = [profile_loglik(model, psi, data) - model.closed_marginal_loglik(psi, data) for psi in grid]
    assert np.ptp(diffs) < 1e-8


def test_canonical_constants():
    censored = build_censored_exponential(c=3.0)
    data = censored_small()
    for theta in (0.7, 2.0, 4.5):
        diff = profile_loglik(censored, [theta], data) - censored.closed_marginal_loglik([theta], data)
        assert diff == pytest.approx(-data.n_mis, abs=1e-9)

    tobit = build_tobit(c=3.0)
    data = simulate(tobit, (1.0, 3.0, 1.0), n=40, seed=7).dataset
    psi = np.array([0.8, 2.5, 1.3])
    assert profile_loglik(tobit, psi, data) == pytest.approx(tobit.closed_marginal_loglik(psi, data), abs=1e-8)


def test_inner_mode_canonical_functions():
    model = build_exponential_mean()
    data = hs.Dataset.from_arrays(np.zeros((5, 0)), [1.0, 2.0, 3.0, np.nan, np.nan])
    np.testing.assert_allclose(inner_mode(model, [1.7], data), np.log([1.7, 1.7]), atol=1e-10)

    censored = build_censored_exponential(c=3.0)
    np.testing.assert_allclose(inner_mode(censored, [2.5], censored_small()), [np.log(2.5)], atol=1e-10)

    normal = build_normal_regression()
    data = hs.Dataset.from_arrays([0.0, 1.0, 0.5, -0.5], [1.0, 3.1, np.nan, np.nan])
    y = solve_random_given_psi(normal, [1.0, 2.0, 0.25], data)
    np.testing.assert_allclose(y, [2.0, 0.0], atol=1e-10)

    exp_reg = build_exponential_regression()
    data = hs.Dataset.from_arrays([0.0, 0.3, 0.5], [1.0, 2.0, np.nan])
    y = solve_random_given_psi(exp_reg, [1.0, 2.0], data)
    np.testing.assert_allclose(y, [np.exp(2.0)], rtol=1e-10)


def test_mixed_model_blup():
    model = build_one_way_mixed(q=2, n_per_group=2)
    data = hs.Dataset.from_arrays([0.0, 0.0, 1.0, 1.0], [0.5, 1.5, -1.0, 1.0])
    u = solve_random_given_psi(model, [0.0, 1.0, 1.0], data)
    np.testing.assert_allclose(u, [2.0 / 3.0, 0.0], atol=1e-10)
    np.testing.assert_allclose(model.canonical_function(np.array([0.0, 1.0, 1.0]), data), [2.0 / 3.0, 0.0])


def test_mixed_model_full_shrinkage():
    model = build_one_way_mixed(q=2, n_per_group=2)
    data = hs.Dataset.from_arrays([0.0, 0.0, 1.0, 1.0], [0.5, 1.5, -1.0, 1.0])
    u = solve_random_given_psi(model, [0.0, 1.0, 1e-10], data)
    assert np.max(np.abs(u)) < 1e-8


@pytest.mark.parametrize('name', ['censored_exp', 'normal_reg', 'tobit', 'mixed_oneway', 'exp_reg'])
def test_score_and_information_match_marginal(name):
    if name == 'censored_exp':
        model = build_censored_exponential(c=3.0)
        data = simulate(model, (2.0,), n=200, seed=11).dataset
    elif name == 'normal_reg':
        model = build_normal_regression()
        data = simulate(model, (1.0, 2.0, 1.0), n=200, seed=12).dataset
    elif name == 'tobit':
        model = build_tobit(c=3.0)
        data = simulate(model, (1.0, 3.0, 1.0), n=200, seed=13).dataset
    elif name == 'exp_reg':
        model = build_exponential_regression()
        data = simulate(model, (1.0, 2.0), n=200, seed=15).dataset
    else:
        model = build_one_way_mixed(q=10, n_per_group=5)
        data = simulate(model, (0.0, 1.0, 2.0), n=50, seed=14).dataset
    fit = joint_maximize(model, data)

    def marginal(p):
        return model.closed_marginal_loglik(p, data)

    score = fd_gradient(marginal, fit.psi_hat, richardson=True)
    assert np.max(np.abs(score)) < 1e-5
    neg_hess = -fd_hessian(marginal, fit.psi_hat)
    info = np.linalg.inv(var_fixed(fit.blocks))
    np.testing.assert_allclose(info, neg_hess, rtol=1e-4, atol=1e-4 * np.max(np.abs(neg_hess)))


CLOSED_MODELS = {
    'exp_mean': (build_exponential_mean, {}, (2.0,), 40),
    'censored_exp': (build_censored_exponential, {'c': 3.0}, (2.0,), 80),
    'normal_reg': (build_normal_regression, {}, (1.0, 2.0, 1.0), 80),
    'exp_reg': (build_exponential_regression, {}, (1.0, 2.0), 80),
    'tobit': (build_tobit, {'c': 3.0}, (1.0, 3.0, 1.0), 80),
    'mixed_oneway': (build_one_way_mixed, {'q': 8, 'n_per_group': 4}, (0.0, 1.0, 2.0), 32),
}


def closed_setup(name, seed):
    builder, kwargs, truth, n = CLOSED_MODELS[name]
    model = builder(**kwargs)
    data = simulate(model, truth, n=n, seed=seed).dataset
    return model, data, np.array(truth)


def random_psi(model, truth, rng):
    """真值附近的随机点：正参数乘 [0.7, 1.3]，其余加 [−0.3, 0.3]"""
    pos = np.asarray(model.positive, dtype=bool)
    return np.where(pos, truth * rng.uniform(0.7, 1.3, truth.size), truth + rng.uniform(-0.3, 0.3, truth.size))


@pytest.mark.parametrize('name', sorted(CLOSED_MODELS))
def test_profile_score_matches_marginal_away_from_optimum(name):
    model, data, truth = closed_setup(name, seed=51)
    rng = np.random.default_rng(52)
    for _ in range(50):
        psi = random_psi(model, truth, rng)
        v = inner_mode(model, psi, data)
        score = hs.grad_psi_at_v(model, psi, v, data)
        expected = fd_gradient(lambda p: model.closed_marginal_loglik(p, data), psi, richardson=True)
        np.testing.assert_allclose(score, expected, atol=1e-6 * (1.0 + np.max(np.abs(expected))))


@pytest.mark.parametrize('name', sorted(CLOSED_MODELS))
def test_canonical_function_matches_inner_mode(name):
    model, data, truth = closed_setup(name, seed=61)
    rng = np.random.default_rng(62)
    for _ in range(50):
        psi = random_psi(model, truth, rng)
        y = solve_random_given_psi(model, psi, data)
        np.testing.assert_allclose(y, model.canonical_function(psi, data), rtol=1e-7, atol=1e-8)


@pytest.mark.parametrize('name', ['normal_reg', 'tobit', 'exp_reg'])
def test_row_permutation_invariance(name):
    model, data, _ = closed_setup(name, seed=71)
    fit = joint_maximize(model, data)
    # 原始行号 → ŷ
    imputed = dict(zip(data.row_order[data.n_obs:], fit.y_mis_hat))

    raw_x = np.empty_like(data.covariates)
    raw_y = np.empty(data.n)
    raw_x[data.row_order] = data.covariates
    raw_y[data.row_order] = data.response
    perm = np.random.default_rng(72).permutation(data.n)
    shuffled = hs.Dataset.from_arrays(raw_x[perm], raw_y[perm])
    refit = joint_maximize(model, shuffled)

    np.testing.assert_allclose(refit.psi_hat, fit.psi_hat, atol=1e-10)
    original_rows = perm[shuffled.row_order[shuffled.n_obs:]]
    np.testing.assert_allclose(refit.y_mis_hat, [imputed[i] for i in original_rows], atol=1e-10)


@pytest.mark.parametrize('name', ['normal_reg', 'tobit', 'exp_reg', 'mixed_oneway'])
def test_outer_iterations_ascend(name):
    model, data, _ = closed_setup(name, seed=81)
    fit = joint_maximize(model, data)
    history = np.asarray(fit.history)
    assert history.size == fit.iterations + 1
    assert history[-1] == pytest.approx(fit.h_value, abs=1e-12)
    assert np.all(np.diff(history) >= -1e-12 * (1.0 + np.abs(history[:-1])))


def test_raw_scale_censored_modes():
    model = build_censored_exponential(c=3.0)
    data = censored_small()
    theta, y = raw_joint_modes(model, data)
    assert theta == pytest.approx((6.0 + 3.0) / 5.0, abs=1e-8)
    np.testing.assert_allclose(y, [3.0])


def test_raw_scale_normal_variance_is_wrong():
    model = build_normal_regression()
    data = simulate(model, (1.0, 2.0, 1.0), n=100, seed=21).dataset
    canonical = joint_maximize(model, data)
    raw = joint_maximize(hs.with_scale(model, hs.RAW_SCALE), data)
    np.testing.assert_allclose(canonical.psi_hat, model.mle_oracle(data), atol=1e-8)
    assert abs(raw.psi_hat[2] - canonical.psi_hat[2]) > 1e-3
    # 原始尺度的 σ² 分母是 n 而不是 n_obs
    assert raw.psi_hat[2] == pytest.approx(canonical.psi_hat[2] * data.n_obs / data.n, rel=1e-6)


def test_henderson_joint_likelihood_misses_variance_components():
    model = build_one_way_mixed(q=50, n_per_group=4)
    data = simulate(model, (0.0, 1.0, 2.0), n=200, seed=31).dataset
    marginal_fit = joint_maximize(model, data)
    try:
        henderson = joint_maximize(hs.with_scale(model, hs.RAW_SCALE), data)
    except ConvergenceError:
        # 方差分量发散到边界同样说明联合似然给不出 MLE
        return
    assert np.max(np.abs(henderson.psi_hat[1:] - marginal_fit.psi_hat[1:])) > 1e-3


def test_multistart_agrees_with_single_start():
    model = build_tobit(c=3.0)
    data = simulate(model, (1.0, 3.0, 1.0), n=100, seed=41).dataset
    single = joint_maximize(model, data)
    multi = joint_maximize(model, data, SolveOptions(multistart=3, seed=2, threads=2))
    np.testing.assert_allclose(multi.psi_hat, single.psi_hat, atol=1e-6)


def test_newton_maximize_quadratic():
    x, value, iterations = newton_maximize(lambda z: -np.sum((z - 3.0) ** 2), np.zeros(2))
    np.testing.assert_allclose(x, [3.0, 3.0], atol=1e-8)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_explicit_bad_start_is_domain_error():
    model = build_exponential_mean()
    data = hs.Dataset.from_arrays(np.zeros((2, 0)), [1.0, np.nan])
    with pytest.raises(DomainError):
        joint_maximize(model, data, SolveOptions(init_psi=np.array([-1.0])))


if __name__ == '__main__':
    pytest.main([__file__])

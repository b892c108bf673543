import numpy as np
import pytest

from conftest import central_difference
from rcgrpo.flow import Condition, LinearFlow
from rcgrpo.latent import EditMask
from rcgrpo.noise import PerturbationScheme
from rcgrpo.variance import (Reward, VarianceReport, cross_sensitivity, delta_method_check,
                             linear_reward, linearize, mc_conditional_variance,
                             nuisance_prediction, quadratic_reward, reward_bridge_error,
                             task_rewards, variance_decomposition, variance_report)


@pytest.fixture
def linear_setup():
    m = EditMask(np.r_[np.ones(4), np.zeros(4)], token_dim=1)
    model = LinearFlow.create(np.zeros((8, 8)), n_tokens=8)
    return m, model, Condition(np.zeros((1, 1)))


def test_nuisance_prediction_examples():
    assert nuisance_prediction(np.array([1.0, 1.0]), 0.3, 0.05) == pytest.approx((0.18, 0.005, 0.0277778), rel=1e-5)
    assert nuisance_prediction(np.array([1.0, 1.0]), 0.3, 0.0) == (pytest.approx(0.18), 0.0, 0.0)
    with pytest.raises(ValueError):
        nuisance_prediction(np.ones(2), 0.0, 0.05)


def test_identity_map_mc_matches_prediction(linear_setup):
    m, model, cond = linear_setup
    w = np.r_[np.zeros(4), np.ones(2), np.zeros(2)]
    reward = linear_reward(w)
    eps = np.random.default_rng(1).standard_normal(8)
    mc = mc_conditional_variance(PerturbationScheme.global_(0.3), model, reward, eps, cond, m, 1, 10**5, 0)
    assert mc == pytest.approx(0.18, rel=0.03)
    mc = mc_conditional_variance(PerturbationScheme.rdp(0.3, 0.05), model, reward, eps, cond, m, 1, 10**5, 0)
    assert mc == pytest.approx(0.005, rel=0.03)


def test_zero_base_alpha_freezes_background_reward(linear_setup):
    m, model, cond = linear_setup
    reward = linear_reward(np.r_[np.zeros(4), np.ones(4)])
    eps = np.ones(8)
    assert mc_conditional_variance(PerturbationScheme.rdp(0.3, 0.0), model, reward, eps, cond, m, 2, 100, 0) == 0.0


def test_delta_method_exact_for_linear_flow_and_reward(rng):
    m = EditMask(np.r_[np.ones(3), np.zeros(5)])
    A = 0.4 * rng.standard_normal((8, 8))
    model = LinearFlow.create(A, n_tokens=8)
    cond = Condition(np.zeros((1, 1)))
    reward = linear_reward(rng.standard_normal(8))
    mc, pred, gap = delta_method_check(model, reward, rng.standard_normal(8), cond, m, 3,
                                       PerturbationScheme.rdp(0.3, 0.1), 10**5, 4)
    assert gap < 4 * np.sqrt(2 / 10**5)


def test_reward_fd_fallback(rng):
    ref, w = rng.standard_normal(5), rng.random(5)
    q = quadratic_reward(ref, w)
    plain = Reward(q.fn)
    x = rng.standard_normal(5)
    np.testing.assert_allclose(plain.grad(x), q.grad(x), atol=1e-8)
    np.testing.assert_allclose(plain.batch(x[None]), [q(x)])


def test_task_rewards_match_env(default_task, rng):
    from rcgrpo.env import reward_edit, reward_pres
    edit, pres = task_rewards(default_task)
    x = rng.standard_normal(default_task.source.size)
    assert edit(x) == pytest.approx(reward_edit(x, default_task), rel=1e-12)
    assert pres(x) == pytest.approx(reward_pres(x, default_task), rel=1e-12)


def test_cross_sensitivity():
    J = np.eye(4)
    m = [1, 1, 0, 0]
    assert cross_sensitivity(J, m) == 0.0
    J[2, 0] = 3.0
    assert cross_sensitivity(J, m) == pytest.approx(3 / np.sqrt(2))
    J[2:, 2:] = 0
    assert cross_sensitivity(J, m) == float("inf")


def test_linearize_gradient_is_chain_rule(small_attn, small_task, rng):
    edit, pres = task_rewards(small_task)
    eps = rng.standard_normal(8)
    lin = linearize(small_attn, pres, eps, small_task.condition, small_task.mask, 4)
    fd = central_difference(lambda e: pres(small_attn.rollout(e, small_task.condition, 4).terminal), eps)
    np.testing.assert_allclose(lin.a, fd, atol=1e-7)
    np.testing.assert_array_equal(lin.h[small_task.mask.elem_mask == 1], 0)


def test_variance_decomposition_identity(rng):
    e = rng.standard_normal(1000)
    b = 0.5 * e + rng.standard_normal(1000)
    d = variance_decomposition(e, b)
    assert abs(d.identity_residual) < 1e-10
    assert d.cs_slack >= 0
    with pytest.raises(ValueError):
        variance_decomposition([1.0], [2.0])


def test_bridge_error_zero_without_cross_coupling(linear_setup):
    m, model, cond = linear_setup
    pres = linear_reward(np.r_[np.zeros(4), np.ones(4)])
    assert reward_bridge_error(model, pres, np.ones(8), cond, m, 2, 0.3, 50, 0) == 0.0


def test_variance_report_round_trip(linear_setup):
    m, model, cond = linear_setup
    edit = linear_reward(np.r_[np.ones(4), np.zeros(4)])
    pres = linear_reward(np.r_[np.zeros(4), np.ones(4)])
    rep = variance_report(model, edit, pres, np.zeros(8), cond, m, 1, 0.3, 0.3, 0.05, 2000, seed=1)
    assert rep.kappa == 0.0 and abs(rep.interaction) < 1e-10
    assert VarianceReport.from_dict(rep.to_dict()) == rep
    assert rep.to_csv().splitlines()[0] == "quantity,value"

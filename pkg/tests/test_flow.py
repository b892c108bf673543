import json

import numpy as np
import pytest

from conftest import central_difference, rel_err
from rcgrpo.flow import AttnFlow, Condition, LinearFlow, NonFiniteError, model_from_json


def _cond(n_txt, d_txt, D=None, rng=0):
    r = np.random.default_rng(rng)
    src = None if D is None else r.standard_normal(D)
    return Condition(r.standard_normal((n_txt, d_txt)), src)


def test_linear_two_step_matches_hand_loop():
    # v = a x, T = 2: x1 = x0 - 0.5 a x0, x2 = x1 - 0.5 a x1
    a = 0.7
    model = LinearFlow.create(a * np.eye(3), n_tokens=3)
    eps = np.array([1.0, -2.0, 0.5])
    traj = model.rollout(eps, _cond(1, 1), 2)
    x = eps.copy()
    for _ in range(2):
        x = x - 0.5 * a * x
    np.testing.assert_allclose(traj.terminal, x, rtol=0, atol=1e-15)
    np.testing.assert_allclose(traj.terminal, (1 - 0.5 * a) ** 2 * eps, rtol=1e-14)
    np.testing.assert_allclose(traj.times(), [1.0, 0.5, 0.0])


def test_zero_velocity_is_identity(rng):
    model = LinearFlow.create(np.zeros((4, 4)), n_tokens=4)
    eps = rng.standard_normal(4)
    assert np.array_equal(model.rollout(eps, _cond(1, 1), 5).terminal, eps)


def test_rollout_deterministic(small_attn, small_task, rng):
    eps = rng.standard_normal(small_attn.dim)
    a = small_attn.rollout(eps, small_task.condition, 6)
    b = small_attn.rollout(eps, small_task.condition, 6)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.attentions, b.attentions)


def test_attention_rows_are_distributions(small_attn, small_task, rng):
    traj = small_attn.rollout(rng.standard_normal(small_attn.dim), small_task.condition, 4)
    assert traj.attentions.shape == (4, 2, 3, 4)
    assert np.all(traj.attentions >= 0)
    np.testing.assert_allclose(traj.attentions.sum(-1), 1.0, atol=1e-12)


def test_rollout_errors(small_attn, small_task):
    with pytest.raises(ValueError):
        small_attn.rollout(np.zeros(small_attn.dim), small_task.condition, 0)
    with pytest.raises(ValueError):
        small_attn.rollout(np.zeros(small_attn.dim + 1), small_task.condition, 2)
    bad = LinearFlow.create(np.eye(2) * 1e308, b=np.ones(2) * 1e308, n_tokens=2)
    with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NonFiniteError):
        bad.rollout(np.ones(2), _cond(1, 1), 3)


def test_batched_terminal_matches_single(small_attn, small_task, rng):
    E = rng.standard_normal((7, small_attn.dim))
    batch = small_attn.terminal_batch(E, small_task.condition, 5, chunk=3)
    single = np.stack([small_attn.rollout(e, small_task.condition, 5).terminal for e in E])
    np.testing.assert_allclose(batch, single, rtol=0, atol=1e-12)


def test_vjp_parameter_gradient_matches_finite_differences(small_attn, small_task, rng):
    # D = 8, L = 2, T = 4
    T = 4
    eps = rng.standard_normal(small_attn.dim)
    cot = {2: rng.standard_normal(8), 4: rng.standard_normal(8)}

    def scalar(model):
        s = model.rollout(eps, small_task.condition, T).states
        return sum(w @ s[k] for k, w in cot.items())

    grads, g_eps = small_attn.rollout_vjp(eps, small_task.condition, T, cot)
    theta = small_attn.flat_params()
    fd = central_difference(lambda th: scalar(small_attn.with_flat_params(th)), theta)
    assert rel_err(small_attn.flatten_grads(grads), fd) < 1e-4

    fd_eps = central_difference(
        lambda e: sum(w @ small_attn.rollout(e, small_task.condition, T).states[k] for k, w in cot.items()), eps)
    assert rel_err(g_eps, fd_eps) < 1e-4


def test_linear_vjp_matches_finite_differences(rng):
    A = 0.3 * rng.standard_normal((6, 6))
    model = LinearFlow.create(A, rng.standard_normal(6), rng.standard_normal((6, 2)), n_tokens=6, d_txt=2)
    cond = _cond(2, 2)
    eps = rng.standard_normal(6)
    w = rng.standard_normal(6)
    grads, _ = model.rollout_vjp(eps, cond, 3, {3: w})
    fd = central_difference(lambda th: w @ model.with_flat_params(th).rollout(eps, cond, 3).terminal,
                            model.flat_params())
    assert rel_err(model.flatten_grads(grads), fd) < 1e-6


def test_noise_jacobian_matches_finite_differences(small_attn, small_task, rng):
    eps = rng.standard_normal(small_attn.dim)
    J = small_attn.jacobian_wrt_noise(eps, small_task.condition, 4)
    fd = np.stack([central_difference(lambda e: small_attn.rollout(e, small_task.condition, 4).terminal[i], eps)
                   for i in range(small_attn.dim)])
    assert rel_err(J, fd) < 1e-6


def test_linear_jacobian_closed_form(rng):
    A = 0.2 * rng.standard_normal((5, 5))
    model = LinearFlow.create(A, n_tokens=5)
    J = model.jacobian_wrt_noise(rng.standard_normal(5), _cond(1, 1), 4)
    step = np.eye(5) - 0.25 * A
    np.testing.assert_allclose(J, np.linalg.matrix_power(step, 4), atol=1e-14)


def test_vjp_rejects_bad_cotangents(small_attn, small_task):
    with pytest.raises(ValueError):
        small_attn.rollout_vjp(np.zeros(8), small_task.condition, 3, {4: np.zeros(8)})
    with pytest.raises(ValueError):
        small_attn.rollout_vjp(np.zeros(8), small_task.condition, 3, {3: np.zeros(7)})


def test_serialization_round_trip(small_attn, small_task, rng):
    text = small_attn.to_json()
    json.loads(text)
    back = model_from_json(text)
    assert isinstance(back, AttnFlow)
    eps = rng.standard_normal(8)
    assert np.array_equal(back.rollout(eps, small_task.condition, 3).states,
                          small_attn.rollout(eps, small_task.condition, 3).states)


def test_with_params_does_not_alias(small_attn):
    m = small_attn.copy()
    theta = m.flat_params()
    m2 = m.with_flat_params(theta + 1.0)
    assert np.array_equal(m.flat_params(), theta)
    np.testing.assert_allclose(m2.flat_params(), theta + 1.0)

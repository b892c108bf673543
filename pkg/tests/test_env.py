import numpy as np
import pytest

from conftest import central_difference
from rcgrpo.env import (EditTask, Geometry, make_suite, make_task, reward_edit, reward_grad,
                        reward_pres, reward_task, suite_from_json, suite_to_json)


def test_task_structure():
    t = make_task(0)
    g = Geometry()
    assert t.source.size == g.dim == 128 and t.mask.token_count == 16
    off = t.mask.elem_mask == 0
    assert np.array_equal(t.target[off], t.source[off])
    assert reward_pres(t.source, t) == 0.0
    assert reward_edit(t.target, t) == 0.0 and reward_task(t.target, t) == 0.0
    assert reward_edit(t.source, t) < 0


def test_mask_specs():
    t = make_task(1, mask_spec={"kind": "rect", "height": 2, "width": 3, "row": 1, "col": 2})
    assert t.mask.token_count == 6
    grid = t.mask.token_mask.reshape(8, 8)
    assert grid[1:3, 2:5].all()
    t = make_task(1, mask_spec={"kind": "random", "fraction": 0.25})
    assert t.mask.token_count == 16
    with pytest.raises(ValueError):
        make_task(1, mask_spec={"kind": "rect", "height": 8, "width": 8})
    with pytest.raises(ValueError):
        make_task(1, mask_spec={"kind": "blob"})


def test_deterministic_and_round_trip():
    a = make_suite(3, seed=4)
    b = make_suite(3, seed=4)
    assert all(np.array_equal(x.source, y.source) for x, y in zip(a, b))
    back = suite_from_json(suite_to_json(a))
    assert isinstance(back[0], EditTask)
    for x, y in zip(a, back):
        assert np.array_equal(x.target, y.target) and x.task_id == y.task_id
        assert np.array_equal(x.condition.text_tokens, y.condition.text_tokens)


def test_reward_gradient_matches_finite_differences(rng):
    t = make_task(2, Geometry(n_tokens=4, token_dim=2), {"kind": "rect", "height": 1, "width": 1})
    x = rng.standard_normal(t.source.size)
    fd = central_difference(lambda v: reward_task(v, t), x)
    np.testing.assert_allclose(reward_grad(x, t), fd, atol=1e-8)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rcgrpo.latent import EditMask, Latent, decompose, region_norms


def test_decompose_examples():
    d = decompose([1.0, 2.0, 3.0], [1, 0, 1])
    np.testing.assert_array_equal(d.inside, [1, 0, 3])
    np.testing.assert_array_equal(d.outside, [0, 2, 0])

    x = np.array([0.3, -1.2, 4.0])
    d = decompose(x, np.ones(3))
    np.testing.assert_array_equal(d.inside, x)
    np.testing.assert_array_equal(d.outside, 0)

    d = decompose([0.5, -0.5], [0, 1])
    np.testing.assert_array_equal(d.inside, [0, -0.5])
    np.testing.assert_array_equal(d.outside, [0.5, 0])


def test_region_norms_examples():
    assert region_norms([1, 1, 1, 1], [1, 1, 0, 0]) == (2.0, 2.0)
    assert region_norms(np.zeros(5), [1, 0, 1, 0, 0]) == (0.0, 0.0)
    assert region_norms([3, 4], [1, 0]) == (9.0, 16.0)


@pytest.mark.parametrize("fn", [decompose, region_norms])
def test_dimension_mismatch(fn):
    with pytest.raises(ValueError):
        fn([1.0, 2.0], [1, 0, 1])


finite = st.floats(-1e6, 1e6, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 64).flatmap(
    lambda n: st.tuples(arrays(np.float64, n, elements=finite),
                        arrays(np.int8, n, elements=st.integers(0, 1)))))
def test_pythagorean_split_and_exact_reconstruction(data):
    x, m = data
    in_sq, out_sq = region_norms(x, m)
    total = float(x @ x)
    assert in_sq >= 0 and out_sq >= 0
    assert abs(in_sq + out_sq - total) <= 1e-12 * max(total, 1.0)
    d = decompose(x, m)
    assert np.array_equal(d.inside + d.outside, x)


def test_edit_mask_granularity():
    m = EditMask([1, 0, 1], token_dim=2)
    np.testing.assert_array_equal(m.elem_mask, [1, 1, 0, 0, 1, 1])
    assert (m.m_count, m.mbar_count, m.token_count) == (4, 2, 2)
    assert EditMask.from_elements(m.elem_mask, 2).token_count == 2
    with pytest.raises(ValueError):
        EditMask.from_elements([1, 0, 1, 1], token_dim=2)
    with pytest.raises(ValueError):
        EditMask([0, 2])


def test_degenerate_masks_accepted_by_math_ops():
    assert region_norms([1.0, 2.0], EditMask([0, 0])) == (0.0, 5.0)
    assert EditMask([1, 1]).is_degenerate()


def test_latent_invariants():
    lat = Latent(np.arange(6.0), 3, 2)
    assert lat.tokens().shape == (3, 2)
    with pytest.raises(ValueError):
        Latent(np.arange(6.0), 4, 2)
    with pytest.raises(ValueError):
        Latent([1.0, np.nan], 2, 1)
    with pytest.raises(ValueError):
        lat.data[0] = 5.0

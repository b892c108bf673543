import numpy as np
import pytest

from rcgrpo.latent import EditMask
from rcgrpo.noise import (NoiseGroup, PerturbationScheme, alpha_map, build_global_group,
                          build_group, build_rdp_group, conditional_covariance_diag, mix)


@pytest.fixture
def mask():
    return EditMask(np.r_[np.ones(4), np.zeros(12)], token_dim=2)


def test_alpha_map_examples():
    np.testing.assert_array_equal(alpha_map([1, 0], 0.3, 1e-4), [0.3, 1e-4])
    np.testing.assert_array_equal(alpha_map([1, 0, 1], 0.0, 0.0), 0.0)
    np.testing.assert_array_equal(alpha_map(np.ones(4), 0.5, 0.5), 0.5)
    with pytest.raises(ValueError):
        alpha_map([1, 0], 1.2, 0.0)


def test_scheme_validation():
    with pytest.raises(ValueError):
        PerturbationScheme.rdp(0.1, 0.2)
    with pytest.raises(ValueError):
        PerturbationScheme.global_(1.0)
    with pytest.raises(ValueError):
        PerturbationScheme("sde")


def test_rdp_zero_perturbation_collapses(mask, rng):
    anchor = rng.standard_normal(mask.dim)
    g = build_rdp_group(anchor, mask, PerturbationScheme.rdp(0.0, 0.0), 5, seed=3)
    assert np.all(g.candidates == anchor)


def test_rdp_reference_and_background_freeze(mask, rng):
    anchor = rng.standard_normal(mask.dim)
    g = build_rdp_group(anchor, mask, PerturbationScheme.rdp(0.3, 0.0), 8, seed=11, reference_index=2)
    assert np.array_equal(g.candidates[2], anchor)
    off = mask.elem_mask == 0
    assert np.array_equal(g.candidates[:, off], np.broadcast_to(anchor[off], (8, off.sum())))
    # on-mask coordinates of the perturbed candidates do move
    assert np.all(np.any(g.candidates[g.perturbed_indices][:, ~off] != anchor[~off], axis=1))
    assert g.perturbed_indices == [0, 1, 3, 4, 5, 6, 7]


def test_rdp_matches_mixing_formula(mask, rng):
    anchor = rng.standard_normal(mask.dim)
    scheme = PerturbationScheme.rdp(0.3, 1e-4)
    g = build_rdp_group(anchor, mask, scheme, 4, seed=5)
    from rcgrpo.noise import candidate_delta
    alpha = np.where(mask.elem_mask == 1, 0.3, 1e-4)
    expected = np.sqrt(1 - alpha**2) * anchor + alpha * candidate_delta(5, 2, mask.dim)
    np.testing.assert_allclose(g.candidates[2], expected, rtol=0, atol=1e-15)


def test_group_errors(mask, rng):
    anchor = rng.standard_normal(mask.dim)
    with pytest.raises(ValueError):
        build_rdp_group(anchor, mask, PerturbationScheme.rdp(), 1, seed=0)
    with pytest.raises(ValueError):
        build_rdp_group(anchor, mask, PerturbationScheme.rdp(), 4, seed=0, reference_index=4)
    with pytest.raises(ValueError):
        build_global_group(anchor, PerturbationScheme.rdp(), 4, seed=0)


def test_group_is_deterministic_and_independent_of_size(mask, rng):
    anchor = rng.standard_normal(mask.dim)
    s = PerturbationScheme.rdp()
    a = build_rdp_group(anchor, mask, s, 4, seed=9)
    b = build_rdp_group(anchor, mask, s, 6, seed=9)
    assert np.array_equal(a.candidates, build_rdp_group(anchor, mask, s, 4, seed=9).candidates)
    assert np.array_equal(a.candidates, b.candidates[:4])


def test_global_small_sigma_is_continuous(rng):
    anchor = rng.standard_normal(10)
    g = build_global_group(anchor, PerturbationScheme.global_(1e-12), 3, seed=1)
    np.testing.assert_allclose(g.candidates, np.broadcast_to(anchor, (3, 10)), atol=1e-6)
    assert g.reference_index is None and g.perturbed_indices == [0, 1, 2]


def test_global_marginal_and_conditional_variance():
    rng = np.random.default_rng(0)
    n, D, sigma = 10**6, 4, 0.3
    anchors = rng.standard_normal((n, D))
    cands = mix(anchors, sigma, rng.standard_normal((n, D)))
    np.testing.assert_allclose(cands.var(axis=0), 1.0, atol=0.02)
    anchor = rng.standard_normal(D)
    cond = mix(anchor, sigma, rng.standard_normal((10**5, D))) - anchor
    np.testing.assert_allclose(cond.var(axis=0), sigma**2, atol=0.005)


def test_conditional_covariance_diag(mask, rng):
    anchor = rng.standard_normal(mask.dim)
    g = build_global_group(anchor, PerturbationScheme.global_(0.3), 3, seed=0)
    np.testing.assert_allclose(conditional_covariance_diag(g, mask), 0.09)
    g = build_rdp_group(anchor, mask, PerturbationScheme.rdp(0.3, 1e-4), 3, seed=0)
    cov = conditional_covariance_diag(g, mask)
    np.testing.assert_allclose(cov[mask.elem_mask == 1], 0.09)
    np.testing.assert_allclose(cov[mask.elem_mask == 0], 1e-8)
    assert np.all(conditional_covariance_diag(g, mask, index=g.reference_index) == 0)
    g = build_rdp_group(anchor, mask, PerturbationScheme.rdp(0.0, 0.0), 3, seed=0)
    assert np.all(conditional_covariance_diag(g, mask) == 0)


def test_conditional_covariance_matches_monte_carlo(mask):
    rng = np.random.default_rng(3)
    anchor = rng.standard_normal(mask.dim)
    scheme = PerturbationScheme.rdp(0.3, 0.05)
    g = build_rdp_group(anchor, mask, scheme, 2, seed=0)
    theory = conditional_covariance_diag(g, mask)
    alpha = alpha_map(mask, 0.3, 0.05)
    dev = mix(anchor, alpha, rng.standard_normal((10**5, mask.dim))) - anchor
    np.testing.assert_allclose(dev.var(axis=0), theory, rtol=0.05)


def test_noise_group_json_round_trip(mask, rng):
    g = build_group(rng.standard_normal(mask.dim), mask, PerturbationScheme.rdp(), 3, seed=4)
    back = NoiseGroup.from_json(g.to_json())
    assert np.array_equal(back.candidates, g.candidates)
    assert back.scheme == g.scheme and back.reference_index == 0 and back.seed == 4

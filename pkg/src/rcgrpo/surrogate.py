"""Region-normalized masked metric and the candidate-set surrogate policy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .latent import EPS, as_mask, as_vector, check_same_length


@dataclass(frozen=True)
class Bandwidths:
    tau_edit: float = 0.9
    tau_base: float = 1.1

    def __post_init__(self):
        if not (self.tau_edit > 0 and self.tau_base > 0):
            raise ValueError(
                f"bandwidths must be strictly positive, got ({self.tau_edit}, {self.tau_base})"
            )


@dataclass(frozen=True)
class CandidateDistribution:
    log_probs: np.ndarray
    anchor_index: int
    timestep: float

    @property
    def probs(self):
        return np.exp(self.log_probs)

    @property
    def size(self):
        return self.log_probs.size


def kernel_covariance_inverse_diag(m, bw):
    """Diagonal of the masked kernel precision ``Sigma_C^{-1}``."""
    mv = as_mask(m)
    n_in = mv.sum()
    n_out = mv.size - n_in
    w_in = 1.0 / ((n_in + EPS) * bw.tau_edit**2)
    w_out = 1.0 / ((n_out + EPS) * bw.tau_base**2)
    return np.where(mv == 1, w_in, w_out)


def masked_distance(x, y, m, bw):
    """Squared distance where each region contributes its bandwidth-scaled MSE."""
    xv, yv, mv = as_vector(x), as_vector(y), as_mask(m)
    check_same_length(xv, yv, mv)
    diff = xv - yv
    sq = diff * diff
    on = mv == 1
    n_in = float(on.sum())
    n_out = mv.size - n_in
    d_in = sq[on].sum() / ((n_in + EPS) * bw.tau_edit**2)
    d_out = sq[~on].sum() / ((n_out + EPS) * bw.tau_base**2)
    return float(d_in + d_out)


def euclidean_distance(x, y, m=None, bw=None):
    """Unnormalized baseline distance ``||x - y||^2``; mask and bandwidths ignored."""
    diff = as_vector(x) - as_vector(y)
    return float(diff @ diff)


def _distances(points, center, weights):
    diff = np.asarray(points) - center
    return (diff * diff) @ weights


def responsibilities(query, candidates, m, bw):
    """Posterior weights ``softmax_i(-d_C^2(query, candidate_i) / 2)``."""
    cands = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    if cands.shape[0] == 0 or cands.size == 0:
        raise ValueError("responsibilities need at least one candidate")
    q = as_vector(query)
    w = kernel_covariance_inverse_diag(m, bw)
    check_same_length(q, w)
    logits = -0.5 * _distances(cands, q, w)
    return np.exp(logits - logsumexp(logits))


def candidate_log_policy(candidates_t, anchor_state, weights):
    """Log-probabilities of the surrogate policy given precomputed precision weights."""
    logits = -0.5 * _distances(candidates_t, anchor_state, weights)
    return logits - logsumexp(logits)


def candidate_policy(candidates_t, anchor_state, m, bw, anchor_index=-1, timestep=float("nan"),
                     metric="masked"):
    """Softmax over candidates of the negative half masked distance to the anchor state.

    ``metric="euclidean"`` swaps in the unnormalized isotropic distance as a
    comparison baseline.
    """
    cands = np.atleast_2d(np.asarray(candidates_t, dtype=np.float64))
    if cands.shape[0] < 2:
        raise ValueError("candidate policy needs G >= 2 candidates")
    anchor = as_vector(anchor_state)
    if metric == "masked":
        w = kernel_covariance_inverse_diag(m, bw)
    elif metric == "euclidean":
        w = np.ones(anchor.size)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    check_same_length(anchor, w, cands[0])
    return CandidateDistribution(candidate_log_policy(cands, anchor, w), anchor_index, timestep)


def log_policy_grad(candidates_t, anchor_state, weights):
    """Gradient of every ``log pi_i`` w.r.t. the anchor state, shape (G, D).

    ``d log pi_i / d anchor = W (x_i - sum_j pi_j x_j)`` with ``W`` the diagonal precision.
    """
    cands = np.asarray(candidates_t)
    p = np.exp(candidate_log_policy(cands, anchor_state, weights))
    return (cands - p @ cands) * weights


def policy_ratio(new, old, i):
    if new.size != old.size:
        raise ValueError(f"group sizes differ: {new.size} vs {old.size}")
    if new.anchor_index != old.anchor_index:
        raise ValueError("ratio between distributions with different anchors")
    if not (new.timestep == old.timestep or (np.isnan(new.timestep) and np.isnan(old.timestep))):
        raise ValueError("ratio between distributions at different timesteps")
    return float(np.exp(new.log_probs[i] - old.log_probs[i]))


def calibrate_bandwidths(alpha_edit, alpha_base, c=3.0, tau_min=1e-3):
    """Perturbation-calibrated bandwidths ``(c*alpha_edit, max(c*alpha_base, tau_min))``."""
    if c <= 0 or tau_min <= 0:
        raise ValueError("calibration constants must be positive")
    return Bandwidths(c * alpha_edit, max(c * alpha_base, tau_min))

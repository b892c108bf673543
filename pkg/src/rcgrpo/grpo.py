"""Group-relative policy optimization over deterministic flow rollouts.

One update: build a noise group per task, roll every candidate out under the
frozen parameters, score them, standardize, then ascend the clipped surrogate
objective whose only differentiable path is the re-integrated anchor
trajectory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .acd import acd_reward
from .env import reward_task
from .flow import NonFiniteError
from .latent import EPS
from .noise import GLOBAL, PerturbationScheme, build_group
from .surrogate import Bandwidths, candidate_log_policy, kernel_covariance_inverse_diag

log = logging.getLogger(__name__)

MINIBATCH = "minibatch"
GROUP = "group"


class TrainingError(RuntimeError):
    """Non-finite training state; ``dump`` holds the offending group."""

    def __init__(self, msg, dump=None):
        super().__init__(msg)
        self.dump = dump or {}


@dataclass(frozen=True)
class GrpoConfig:
    G: int = 8
    B: int = 2
    eps_clip: float = 0.2
    beta_kl: float = 0.0
    lr: float = 3e-4
    lambda_task: float = 0.5
    lambda_acd: float = 0.5
    groups_per_update: int = 4
    scheme: PerturbationScheme = field(default_factory=PerturbationScheme)
    bandwidths: Bandwidths = field(default_factory=Bandwidths)
    T_train: int = 8
    seed: int = 0
    reference_index: int = 0
    acd_layers: tuple = (3, 4)
    norm_scope: str = MINIBATCH
    policy_stride: int = 1
    metric: str = "masked"

    def __post_init__(self):
        if self.G < 2:
            raise ValueError(f"G must be >= 2, got {self.G}")
        n_perturbed = self.G if self.scheme.kind == GLOBAL else self.G - 1
        if not 1 <= self.B <= n_perturbed:
            raise ValueError(f"B must be in [1, {n_perturbed}], got {self.B}")
        if self.eps_clip <= 0:
            raise ValueError("eps_clip must be positive")
        if self.lambda_task < 0 or self.lambda_acd < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.beta_kl != 0:
            raise ValueError("only beta_kl = 0 is supported")
        if self.norm_scope not in (MINIBATCH, GROUP):
            raise ValueError(f"norm_scope must be {MINIBATCH!r} or {GROUP!r}")
        if self.T_train < 2:
            raise ValueError("T_train must be >= 2 so interior timesteps exist")
        if not 0 <= self.reference_index < self.G:
            raise ValueError("reference_index out of range")
        if self.policy_stride < 1:
            raise ValueError("policy_stride must be >= 1")
        if not self.acd_layers:
            raise ValueError("acd_layers must be nonempty")

    def with_(self, **kw):
        return replace(self, **kw)


# --- reward shaping -----------------------------------------------------------

def standardize(values):
    """``(v - mean) / (std + eps)`` with population std."""
    v = np.asarray(values, dtype=np.float64)
    return (v - v.mean()) / (v.std() + EPS)


def normalize_rewards(values):
    if len(values) < 2:
        raise ValueError("need at least two rewards to normalize")
    return standardize(values)


def combine_rewards(task_norm, acd_norm, lambda_task, lambda_acd):
    t = np.asarray(task_norm, dtype=np.float64)
    a = np.asarray(acd_norm, dtype=np.float64)
    if t.shape != a.shape:
        raise ValueError(f"length mismatch: {t.shape} vs {a.shape}")
    return lambda_task * t + lambda_acd * a


def group_advantages(rewards):
    if len(rewards) < 2:
        raise ValueError("need at least two rewards per group")
    return standardize(rewards)


def sample_anchors(perturbed_indices, B, rng):
    idx = np.asarray(sorted(perturbed_indices))
    if B > idx.size:
        raise ValueError(f"cannot draw {B} anchors from {idx.size} perturbed candidates")
    return np.sort(rng.choice(idx, size=B, replace=False))


def clipped_terms(ratios, advantages, eps_clip):
    """Elementwise ``min(A rho, A clip(rho))`` and its derivative w.r.t. ``rho``."""
    rho = np.asarray(ratios, dtype=np.float64)
    A = np.broadcast_to(np.asarray(advantages, dtype=np.float64), rho.shape)
    unclipped = A * rho
    clipped = A * np.clip(rho, 1 - eps_clip, 1 + eps_clip)
    value = np.minimum(unclipped, clipped)
    slope = np.where(unclipped <= clipped, A, 0.0)
    return value, slope


def clipped_objective(ratios, advantages, eps_clip):
    """Mean clipped surrogate; ``ratios`` broadcast against per-candidate ``advantages``."""
    if eps_clip <= 0:
        raise ValueError("eps_clip must be positive")
    return float(clipped_terms(ratios, advantages, eps_clip)[0].mean())


# --- metrics -------------------------------------------------------------------

def within_group_reward_std(rewards):
    return float(np.std(np.asarray(rewards, dtype=np.float64)))


def background_drift(x0, source, m):
    elem = m.elem_mask if hasattr(m, "elem_mask") else np.asarray(m, dtype=np.float64)
    diff = (1.0 - elem) * (np.asarray(x0) - np.asarray(source))
    n = (1.0 - elem).sum()
    return float(diff @ diff / n) if n else 0.0


# --- group rollouts ------------------------------------------------------------

@dataclass
class GroupBatch:
    task: object
    group: object
    states: np.ndarray  # (G, T+1, D) under the frozen parameters
    r_task: np.ndarray
    r_acd: np.ndarray
    drift: np.ndarray
    anchors: np.ndarray
    combined: np.ndarray = None
    advantages: np.ndarray = None
    old_log_probs: dict = None  # (k, step) -> log-prob vector

    @property
    def raw_combined(self):
        return self.r_task, self.r_acd


def policy_steps(T, stride=1):
    """Interior solver states ``1..T-1`` (t = 1 - dt ... dt), excluding t=0."""
    return list(range(1, T, stride))


def rollout_group(model, task, config, group_seed, anchor=None):
    """Build the noise group for ``task`` and roll every candidate out."""
    ss = np.random.SeedSequence(entropy=int(group_seed))
    anchor_ss, cand_ss, pick_ss = ss.spawn(3)
    if anchor is None:
        anchor = np.random.default_rng(anchor_ss).standard_normal(model.dim)
    delta_seed = int(cand_ss.generate_state(1)[0])
    group = build_group(anchor, task.mask, config.scheme, config.G, delta_seed, config.reference_index)
    T = config.T_train
    layer_cols = [l - 1 for l in config.acd_layers]
    states = np.empty((config.G, T + 1, model.dim))
    r_task = np.empty(config.G)
    r_acd = np.empty(config.G)
    drift = np.empty(config.G)
    for i, eps in enumerate(group.candidates):
        traj = model.rollout(eps, task.condition, T)
        states[i] = traj.states
        r_task[i] = reward_task(traj.terminal, task)
        r_acd[i] = acd_reward(traj.attentions, task.mask.token_mask, layer_cols) if model.n_layers else 0.0
        drift[i] = background_drift(traj.terminal, task.source, task.mask)
    anchors = sample_anchors(group.perturbed_indices, config.B, np.random.default_rng(pick_ss))
    return GroupBatch(task, group, states, r_task, r_acd, drift, anchors)


def assign_advantages(batches, config):
    """Normalize task/ACD rewards, combine, and standardize per group."""
    if config.norm_scope == MINIBATCH:
        t_all = standardize(np.concatenate([b.r_task for b in batches]))
        a_all = standardize(np.concatenate([b.r_acd for b in batches]))
        G = config.G
        for j, b in enumerate(batches):
            b.combined = combine_rewards(t_all[j * G:(j + 1) * G], a_all[j * G:(j + 1) * G],
                                         config.lambda_task, config.lambda_acd)
    else:
        for b in batches:
            b.combined = combine_rewards(standardize(b.r_task), standardize(b.r_acd),
                                         config.lambda_task, config.lambda_acd)
    for b in batches:
        b.advantages = group_advantages(b.combined)
    return batches


def _weights(task, config):
    if config.metric == "euclidean":
        return np.ones(task.mask.dim)
    return kernel_covariance_inverse_diag(task.mask, config.bandwidths)


def record_old_policies(batch, config):
    """Old-policy log-probs; the old anchor trajectory is the candidate's own rollout."""
    w = _weights(batch.task, config)
    batch.old_log_probs = {}
    for k in batch.anchors:
        for s in policy_steps(config.T_train, config.policy_stride):
            batch.old_log_probs[(int(k), s)] = candidate_log_policy(batch.states[:, s], batch.states[k, s], w)
    return batch


def group_objective(model, batch, config, need_grad=True):
    """Clipped surrogate for one group under ``model``; returns ``(value, grads, ratios)``.

    The objective is averaged over (anchor, timestep, candidate); anchor
    trajectories are re-integrated under ``model`` and carry the gradient.
    """
    T = config.T_train
    steps = policy_steps(T, config.policy_stride)
    w = _weights(batch.task, config)
    G = config.G
    n_terms = len(batch.anchors) * len(steps) * G
    total = 0.0
    grads = model.zero_grads() if need_grad else None
    ratios = {}
    for k in batch.anchors:
        k = int(k)
        traj = model.rollout(batch.group.candidates[k], batch.task.condition, T)
        cotangents = {}
        for s in steps:
            cands = batch.states[:, s]
            center = traj.states[s]
            logp = candidate_log_policy(cands, center, w)
            rho = np.exp(logp - batch.old_log_probs[(k, s)])
            val, slope = clipped_terms(rho, batch.advantages, config.eps_clip)
            total += val.sum()
            ratios[(k, s)] = rho
            if need_grad:
                # d rho_i / d center = rho_i * W (x_i - sum_j pi_j x_j)
                p = np.exp(logp)
                coef = slope * rho
                cotangents[s] = w * (coef @ cands - coef.sum() * (p @ cands)) / n_terms
        if need_grad:
            g, _ = model.rollout_vjp(batch.group.candidates[k], batch.task.condition, T, cotangents)
            for name in grads:
                grads[name] += g[name]
    return total / n_terms, grads, ratios


@dataclass
class StepResult:
    model: object
    rows: list
    batches: list
    objective: float


def train_step(model, tasks, config, update_index=0, seed=None):
    """One GRPO update over ``tasks`` (one group each); returns a :class:`StepResult`."""
    seed = config.seed if seed is None else seed
    batches = []
    for j, task in enumerate(tasks):
        gseed = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(update_index), j))
        gseed = int(gseed.generate_state(1)[0])
        try:
            batches.append(rollout_group(model, task, config, gseed))
        except NonFiniteError as err:
            raise TrainingError(f"update {update_index} group {j}: {err}",
                                {"task_id": task.task_id, "group_seed": gseed}) from err
    assign_advantages(batches, config)
    grads = model.zero_grads()
    rows = []
    objective = 0.0
    for j, b in enumerate(batches):
        record_old_policies(b, config)
        try:
            val, g, _ = group_objective(model, b, config)
        except NonFiniteError as err:
            raise TrainingError(f"update {update_index} group {j}: {err}", _dump(b)) from err
        flat = model.flatten_grads(g)
        if not (np.isfinite(val) and np.all(np.isfinite(flat))):
            raise TrainingError(f"non-finite objective/gradient in update {update_index} group {j}", _dump(b))
        for name in grads:
            grads[name] += g[name]
        objective += val
        rows.append({
            "update": update_index,
            "group": j,
            "mean_reward": float(np.mean(config.lambda_task * b.r_task + config.lambda_acd * b.r_acd)),
            "reward_std": within_group_reward_std(b.r_task),
            "bg_drift": float(np.mean(b.drift)),
            "mean_acd": float(np.mean(b.r_acd)),
            "objective": float(val),
        })
    new_params = {k: model.params[k] + config.lr * grads[k] for k in model.params}
    return StepResult(model.with_params(new_params), rows, batches, objective / len(batches))


def _dump(batch):
    return {
        "task_id": batch.task.task_id,
        "seed": batch.group.seed,
        "anchors": batch.anchors.tolist(),
        "r_task": batch.r_task.tolist(),
        "r_acd": batch.r_acd.tolist(),
        "advantages": None if batch.advantages is None else batch.advantages.tolist(),
    }


def evaluate(model, tasks, config, n_noises=4, seed=12345):
    """Single-path deterministic evaluation (no perturbation) on fixed noises.

    Returns mean raw combined reward, mean task reward, mean ACD and mean drift.
    """
    layer_cols = [l - 1 for l in config.acd_layers]
    rng = np.random.default_rng(seed)
    noises = rng.standard_normal((n_noises, model.dim))
    rt, ra, dr = [], [], []
    for task in tasks:
        for eps in noises:
            traj = model.rollout(eps, task.condition, config.T_train)
            rt.append(reward_task(traj.terminal, task))
            ra.append(acd_reward(traj.attentions, task.mask.token_mask, layer_cols) if model.n_layers else 0.0)
            dr.append(background_drift(traj.terminal, task.source, task.mask))
    rt, ra = np.array(rt), np.array(ra)
    return {
        "combined": float(np.mean(config.lambda_task * rt + config.lambda_acd * ra)),
        "task": float(rt.mean()),
        "acd": float(ra.mean()),
        "drift": float(np.mean(dr)),
    }

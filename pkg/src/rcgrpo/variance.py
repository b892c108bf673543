"""Monte-Carlo and first-order (delta-method) checks of conditional reward variance.

Everything here conditions on a fixed anchor noise ``eps_star`` and looks at
how reward varies across regenerated candidates around it.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .latent import as_mask
from .noise import GLOBAL, alpha_map, mix

FD_STEP = 1e-5


class Reward:
    """Terminal reward ``f(x0)`` with an optional analytic gradient.

    ``batch`` evaluates many terminals at once, shape (N, D) -> (N,).
    """

    def __init__(self, fn, grad=None, batch=None):
        self.fn = fn
        self._grad = grad
        self._batch = batch

    def __call__(self, x0):
        return float(self.fn(x0))

    def grad(self, x0):
        if self._grad is not None:
            return np.asarray(self._grad(x0), dtype=np.float64)
        x0 = np.asarray(x0, dtype=np.float64)
        g = np.empty_like(x0)
        for d in range(x0.size):
            e = np.zeros_like(x0)
            e[d] = FD_STEP
            g[d] = (self.fn(x0 + e) - self.fn(x0 - e)) / (2 * FD_STEP)
        return g

    def batch(self, X):
        if self._batch is not None:
            return np.asarray(self._batch(X), dtype=np.float64)
        return np.array([self.fn(x) for x in X])


def linear_reward(w):
    w = np.asarray(w, dtype=np.float64)
    return Reward(lambda x: w @ x, lambda x: w.copy(), lambda X: X @ w)


def quadratic_reward(ref, weights):
    """``-sum_d weights_d (x_d - ref_d)^2``; covers masked negative-MSE rewards."""
    ref = np.asarray(ref, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return Reward(
        lambda x: -float(w @ (x - ref) ** 2),
        lambda x: -2.0 * w * (x - ref),
        lambda X: -((X - ref) ** 2) @ w,
    )


def task_rewards(task):
    """``(R_edit, R_pres)`` of an edit task as :class:`Reward` objects."""
    m = task.mask.elem_mask
    edit = quadratic_reward(task.target, m / task.mask.m_count)
    pres = quadratic_reward(task.source, (1 - m) / task.mask.mbar_count)
    return edit, pres


def sum_rewards(*rewards):
    return Reward(
        lambda x: sum(r(x) for r in rewards),
        lambda x: sum(r.grad(x) for r in rewards),
        lambda X: sum(r.batch(X) for r in rewards),
    )


@dataclass
class LinearizationReport:
    J: np.ndarray
    g0: np.ndarray
    a: np.ndarray
    h: np.ndarray
    kappa: float

    @property
    def kappa_infinite(self):
        return not np.isfinite(self.kappa)


def cross_sensitivity(J, m):
    """``||d x0_base / d eps_in||_F / ||d x0_base / d eps_base||_F`` (inf if the latter is 0)."""
    mv = as_mask(m) == 1
    cross = np.linalg.norm(J[np.ix_(~mv, mv)])
    within = np.linalg.norm(J[np.ix_(~mv, ~mv)])
    if within == 0:
        return float("inf") if cross > 0 else 0.0
    return float(cross / within)


def linearize(model, reward, eps_star, cond, m, T, pres_reward=None):
    """Jacobian, reward gradients and cross-region sensitivity at ``eps_star``.

    ``h`` is the gradient of ``pres_reward`` (defaults to ``reward``) through
    the flow map w.r.t. the background noise only.
    """
    eps_star = np.asarray(eps_star, dtype=np.float64)
    J = model.jacobian_wrt_noise(eps_star, cond, T)
    x0 = model.rollout(eps_star, cond, T).terminal
    g0 = reward.grad(x0)
    a = J.T @ g0
    pres = pres_reward or reward
    background = 1.0 - as_mask(m)
    h = background * (J.T @ pres.grad(x0))
    return LinearizationReport(J, g0, a, h, cross_sensitivity(J, m))


def conditional_samples(scheme, eps_star, m, N, rng):
    """``N`` perturbed candidates around ``eps_star`` (the RDP reference is never drawn)."""
    eps_star = np.asarray(eps_star, dtype=np.float64)
    if scheme.kind == GLOBAL:
        alpha = scheme.sigma
    else:
        alpha = alpha_map(m, scheme.alpha_edit, scheme.alpha_base)
    delta = rng.standard_normal((N, eps_star.size))
    return mix(eps_star[None, :], alpha, delta)


def conditional_cov_diag(scheme, m):
    mv = as_mask(m)
    if scheme.kind == GLOBAL:
        return np.full(mv.size, scheme.sigma**2)
    return alpha_map(mv, scheme.alpha_edit, scheme.alpha_base) ** 2


def mc_conditional_variance(scheme, model, reward, eps_star, cond, m, T, N, rng):
    """Unbiased sample variance of ``reward(Phi(eps))`` over ``N`` regenerated candidates."""
    if N < 2:
        raise ValueError("need N >= 2 samples")
    rng = np.random.default_rng(rng)
    E = conditional_samples(scheme, eps_star, m, N, rng)
    vals = reward.batch(model.terminal_batch(E, cond, T))
    return float(np.var(vals, ddof=1))


def nuisance_prediction(h, sigma, alpha_base):
    """First-order background variance under global and RDP mixing, and their ratio."""
    if sigma == 0:
        raise ValueError("ratio undefined for sigma = 0")
    hh = float(np.dot(h, h))
    return sigma**2 * hh, alpha_base**2 * hh, alpha_base**2 / sigma**2


def delta_method_check(model, reward, eps_star, cond, m, T, scheme, N, rng):
    """Compare MC conditional variance with ``a^T Diag(cov) a``."""
    lin = linearize(model, reward, eps_star, cond, m, T)
    predicted = float((lin.a**2) @ conditional_cov_diag(scheme, m))
    mc = mc_conditional_variance(scheme, model, reward, eps_star, cond, m, T, N, rng)
    gap = abs(mc - predicted) / predicted if predicted > 0 else (0.0 if mc == 0 else float("inf"))
    return mc, predicted, gap


@dataclass
class Decomposition:
    var_edit: float
    var_base: float
    cov: float
    cs_bound: float
    total_var: float
    identity_residual: float

    @property
    def cs_slack(self):
        return self.cs_bound - abs(self.cov)


def variance_decomposition(r_edit, r_base):
    """Split ``Var(r_edit + r_base)`` into its two variances and covariance."""
    e = np.asarray(r_edit, dtype=np.float64)
    b = np.asarray(r_base, dtype=np.float64)
    if e.size < 2 or e.shape != b.shape:
        raise ValueError("need two equal-length sample arrays with >= 2 entries")
    C = np.cov(np.vstack([e, b]), ddof=1)
    ve, vb, cov = float(C[0, 0]), float(C[1, 1]), float(C[0, 1])
    total = float(np.var(e + b, ddof=1))
    return Decomposition(ve, vb, cov, float(np.sqrt(ve * vb)), total, total - (ve + vb + 2 * cov))


def reward_bridge_error(model, pres_reward, eps_star, cond, m, T, alpha_edit, N, rng):
    """Mean change in the preservation reward under edit-region-only perturbations."""
    if alpha_edit <= 0:
        raise ValueError("alpha_edit must be positive")
    rng = np.random.default_rng(rng)
    eps_star = np.asarray(eps_star, dtype=np.float64)
    alpha = alpha_map(m, alpha_edit, 0.0)
    E = mix(eps_star[None, :], alpha, rng.standard_normal((N, eps_star.size)))
    base = pres_reward(model.rollout(eps_star, cond, T).terminal)
    return float(np.mean(np.abs(pres_reward.batch(model.terminal_batch(E, cond, T)) - base)))


@dataclass
class VarianceReport:
    """Conditional-variance comparison of global vs region-decoupled mixing.

    ``interaction`` is this package's estimator of the cross-region residual:
    total variance minus the edit / bridged-background decomposition.
    """

    sigma: float
    alpha_edit: float
    alpha_base: float
    n_samples: int
    mc_var_global: float
    mc_var_local: float
    predicted_global: float
    predicted_local: float
    ratio: float
    predicted_ratio: float
    cov: float
    cs_bound: float
    interaction: float
    kappa: float

    @property
    def ratio_rel_error(self):
        return abs(self.ratio - self.predicted_ratio) / self.predicted_ratio

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["quantity", "value"])
        for k, v in self.to_dict().items():
            w.writerow([k, f"{v:.9g}" if isinstance(v, float) else v])
        return buf.getvalue()


def variance_report(model, edit_reward, pres_reward, eps_star, cond, m, T, sigma, alpha_edit,
                    alpha_base, N, seed=0):
    """Run both schemes around ``eps_star`` and assemble a :class:`VarianceReport`.

    The nuisance variances compare the background-reward spread; the
    decomposition uses global-mixing samples with the bridged background reward
    (edit-region noise pinned at the anchor).
    """
    from .noise import PerturbationScheme

    ss = np.random.SeedSequence(seed)
    rg, rl = [np.random.default_rng(s) for s in ss.spawn(2)]
    glob = PerturbationScheme.global_(sigma)
    loc = PerturbationScheme.rdp(alpha_edit, alpha_base)
    lin = linearize(model, pres_reward, eps_star, cond, m, T, pres_reward=pres_reward)
    pg, pl, pr = nuisance_prediction(lin.h, sigma, alpha_base)

    mv = as_mask(m)
    Eg = conditional_samples(glob, eps_star, m, N, rg)
    Xg = model.terminal_batch(Eg, cond, T)
    Eb = np.where(mv == 1, np.asarray(eps_star)[None, :], Eg)
    r_edit = edit_reward.batch(Xg)
    r_pres = pres_reward.batch(Xg)
    r_base = pres_reward.batch(model.terminal_batch(Eb, cond, T))
    dec = variance_decomposition(r_edit, r_base)
    total = float(np.var(r_edit + r_pres, ddof=1))

    El = conditional_samples(loc, eps_star, m, N, rl)
    vl = float(np.var(pres_reward.batch(model.terminal_batch(El, cond, T)), ddof=1))
    vg = float(np.var(r_pres, ddof=1))
    return VarianceReport(
        sigma=sigma, alpha_edit=alpha_edit, alpha_base=alpha_base, n_samples=N,
        mc_var_global=vg, mc_var_local=vl, predicted_global=pg, predicted_local=pl,
        ratio=vl / vg if vg > 0 else float("nan"), predicted_ratio=pr,
        cov=dec.cov, cs_bound=dec.cs_bound,
        interaction=total - (dec.var_edit + dec.var_base + 2 * dec.cov),
        kappa=lin.kappa,
    )

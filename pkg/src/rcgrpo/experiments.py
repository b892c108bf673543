"""Experiment orchestration shared by the CLI and the acceptance suite."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .acd import AttentionRecord, aggregate_acd, acd_layer_residual
from .env import make_suite, reward_edit, reward_pres
from .flow import AttnFlow, LinearFlow
from .grpo import background_drift, evaluate, rollout_group, train_step
from .noise import GLOBAL, RDP
from .variance import (linear_reward, mc_conditional_variance, nuisance_prediction,
                       task_rewards, variance_report)

METRIC_COLUMNS = ["update", "group", "mean_reward", "reward_std", "bg_drift", "mean_acd", "objective"]


def fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.9g}"
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(r[h]) for h in header])
    return buf.getvalue()


def make_model(cfg):
    g = cfg.geometry
    return AttnFlow.init(g.n_tokens, g.token_dim, g.d_txt, g.n_layers, rng=cfg.model_init_seed)


def make_tasks(cfg, n=None, seed=None):
    return make_suite(n or cfg.n_tasks, cfg.seed if seed is None else seed, cfg.geometry, cfg.mask)


def update_batch(tasks, update, per_update):
    return [tasks[(update * per_update + j) % len(tasks)] for j in range(per_update)]


@dataclass
class TrainRun:
    model: object
    rows: list
    eval_before: dict
    eval_after: dict
    reference_drift: list = field(default_factory=list)


def run_training(cfg, scheme=None, n_updates=None, model=None, on_rows=None, track_reference=False):
    """Train for ``n_updates`` (default ``cfg.n_updates``), streaming rows to ``on_rows``."""
    gcfg = cfg.grpo(scheme)
    tasks = make_tasks(cfg)
    model = model or make_model(cfg)
    n_updates = cfg.n_updates if n_updates is None else n_updates
    before = evaluate(model, tasks, gcfg)
    rows, ref_drift = [], []
    for u in range(n_updates):
        res = train_step(model, update_batch(tasks, u, gcfg.groups_per_update), gcfg, update_index=u)
        if track_reference:
            ref_drift.extend(_reference_drift(model, b, gcfg) for b in res.batches)
        model = res.model
        rows.extend(res.rows)
        if on_rows:
            on_rows(res.rows)
    return TrainRun(model, rows, before, evaluate(model, tasks, gcfg), ref_drift)


def _reference_drift(model, batch, gcfg):
    """Mean background MSE of candidates to the unperturbed anchor's output."""
    anchor_x0 = model.rollout(batch.group.anchor, batch.task.condition, gcfg.T_train).terminal
    return float(np.mean([background_drift(s[-1], anchor_x0, batch.task.mask) for s in batch.states]))


def compare_schemes(cfg, n_groups=200):
    """Train under RDP and global mixing with matched seeds; summarize per-group statistics.

    The global run uses ``cfg.sigma``; the RDP run uses ``cfg.alpha_edit`` / ``cfg.alpha_base``.
    """
    n_updates = int(np.ceil(n_groups / cfg.groups_per_update))
    out = {}
    for kind in (RDP, GLOBAL):
        run = run_training(cfg, scheme=kind, n_updates=n_updates, track_reference=True)
        rows = run.rows[:n_groups]
        std = np.array([r["reward_std"] for r in rows])
        drift = np.array([r["bg_drift"] for r in rows])
        out[kind] = {
            "median_reward_std": float(np.median(std)),
            "median_bg_drift": float(np.median(drift)),
            "median_reference_drift": float(np.median(run.reference_drift[:n_groups])),
            "reward_std": std.tolist(),
            "bg_drift": drift.tolist(),
            "eval_after": run.eval_after,
        }
    return out


def rollout_report(cfg, model=None, task_index=0, group_seed=None):
    """Roll out one noise group; returns candidate rows, trajectory summary and ACD rows."""
    gcfg = cfg.grpo()
    model = model or make_model(cfg)
    task = make_tasks(cfg)[task_index]
    seed = cfg.seed if group_seed is None else group_seed
    batch = rollout_group(model, task, gcfg, seed)
    cand_rows, acd_rows = [], []
    traj_summary = {"times": list(1.0 - np.arange(gcfg.T_train + 1) / gcfg.T_train), "candidates": []}
    mv = task.mask.elem_mask == 1
    for i, eps in enumerate(batch.group.candidates):
        traj = model.rollout(eps, task.condition, gcfg.T_train)
        x0 = traj.terminal
        cand_rows.append({
            "candidate": i,
            "reference": int(i == batch.group.reference_index),
            "r_edit": reward_edit(x0, task),
            "r_pres": reward_pres(x0, task),
            "r_task": float(batch.r_task[i]),
            "r_acd": float(batch.r_acd[i]),
            "bg_drift": float(batch.drift[i]),
        })
        traj_summary["candidates"].append({
            "edit_sq_norm": [float(s[mv] @ s[mv]) for s in traj.states],
            "base_sq_norm": [float(s[~mv] @ s[~mv]) for s in traj.states],
        })
        if model.n_layers:
            rep = aggregate_acd(AttentionRecord.from_trajectory(traj), task.mask.token_mask, gcfg.acd_layers)
            for j, lid in enumerate(rep.layer_ids):
                for t in range(rep.values.shape[0]):
                    acd_rows.append({"candidate": i, "layer": lid, "step": t + 1, "acd": rep.values[t, j]})
    return cand_rows, traj_summary, acd_rows


def block_linear_flow(mask, rng=0, gain=1.0, coupling=0.3, d_txt=1):
    """LinearFlow whose drift matrix never mixes edit and background coordinates."""
    rng = np.random.default_rng(rng)
    mv = mask.elem_mask == 1
    D = mask.dim
    N = rng.standard_normal((D, D)) * coupling / np.sqrt(D)
    A = gain * np.eye(D) + N
    A[np.ix_(mv, ~mv)] = 0.0
    A[np.ix_(~mv, mv)] = 0.0
    return LinearFlow.create(A, b=0.1 * rng.standard_normal(D), n_tokens=mask.n_tokens,
                             token_dim=mask.token_dim, d_txt=d_txt)


def lab_setup(cfg):
    """Model, rewards, anchor and condition for a variance-lab preset."""
    task = make_tasks(cfg, n=1)[0]
    m = task.mask
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(11,)))
    eps_star = rng.standard_normal(m.dim)
    mv = m.elem_mask
    if cfg.lab_preset == "attn":
        model = make_model(cfg)
        edit, pres = task_rewards(task)
        T = cfg.T_train
    else:
        if cfg.lab_preset == "identity":
            model = LinearFlow.create(np.zeros((m.dim, m.dim)), n_tokens=m.n_tokens,
                                      token_dim=m.token_dim, d_txt=cfg.geometry.d_txt)
        else:
            model = block_linear_flow(m, rng=cfg.model_init_seed, d_txt=cfg.geometry.d_txt)
        w = rng.standard_normal(m.dim)
        # background weights scaled to ||h||^2 = 2 for the identity map
        wb = (1 - mv) * w
        wb *= np.sqrt(2.0) / np.linalg.norm(wb)
        we = mv * w
        edit, pres = linear_reward(we), linear_reward(wb)
        T = cfg.T_train
    return model, edit, pres, eps_star, task, T


def run_variance_lab(cfg):
    model, edit, pres, eps_star, task, T = lab_setup(cfg)
    rep = variance_report(model, edit, pres, eps_star, task.condition, task.mask, T,
                          cfg.lab_sigma, cfg.lab_alpha_edit, cfg.lab_alpha_base, cfg.lab_samples, cfg.seed)
    n = cfg.lab_samples
    # relative standard error of a sample variance from n Gaussian draws
    var_rse = np.sqrt(2.0 / (n - 1))
    checks = {
        "ratio_within_10pct": rep.ratio_rel_error < 0.10,
        "cauchy_schwarz": rep.cs_bound - abs(rep.cov) >= -1e-12,
    }
    if cfg.lab_preset in ("identity", "linear-block"):
        gap_g = abs(rep.mc_var_global - rep.predicted_global) / rep.predicted_global
        checks["delta_method_exact"] = gap_g < 4 * var_rse
    return rep, checks


def run_acd_diag(cfg, model=None):
    """Per-layer ACD residual between best and worst rollouts of each condition."""
    gcfg = cfg.grpo().with_(G=max(cfg.diag_rollouts, 2), B=1)
    model = model or make_model(cfg)
    tasks = make_tasks(cfg, n=cfg.diag_conditions, seed=cfg.seed + 1)
    positives, negatives = [], []
    token_masks = []
    for j, task in enumerate(tasks):
        batch = rollout_group(model, task, gcfg, cfg.seed * 7919 + j)
        best, worst = int(np.argmax(batch.r_task)), int(np.argmin(batch.r_task))
        for idx, bucket in ((best, positives), (worst, negatives)):
            traj = model.rollout(batch.group.candidates[idx], task.condition, gcfg.T_train)
            bucket.append(AttentionRecord.from_trajectory(traj))
        token_masks.append(task.mask.token_mask)
    # masks differ per condition, so residuals are averaged condition by condition
    L = model.n_layers
    delta = np.zeros(L)
    for pos, neg, tm in zip(positives, negatives, token_masks):
        d = acd_layer_residual([pos], [neg], tm)
        delta += np.array([d[l] for l in range(1, L + 1)])
    delta /= len(tasks)
    return [{"layer": l, "delta": float(delta[l - 1])} for l in range(1, L + 1)]

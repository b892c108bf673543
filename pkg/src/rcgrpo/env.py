"""Synthetic latent-editing tasks with an additive edit/preservation reward.

Each task has a source latent carrying an "object" signature on the masked
tokens, and a target that swaps the object for a new pattern.  The text
condition encodes both signatures so a conditional model can locate the
region and learn the edit.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .flow import Condition
from .latent import EditMask, as_mask, as_vector, check_same_length


@dataclass(frozen=True)
class Geometry:
    n_tokens: int = 64
    token_dim: int = 2
    n_txt: int = 4
    n_layers: int = 4

    @property
    def dim(self):
        return self.n_tokens * self.token_dim

    @property
    def d_txt(self):
        return 2 * self.token_dim

    @property
    def side(self):
        s = int(round(np.sqrt(self.n_tokens)))
        if s * s != self.n_tokens:
            raise ValueError(f"n_tokens={self.n_tokens} is not a square grid")
        return s


@dataclass(frozen=True)
class EditTask:
    source: np.ndarray
    mask: EditMask
    target: np.ndarray  # equals source off-mask; only on-mask values are used
    condition: Condition
    task_id: str
    seed: int

    def __post_init__(self):
        if self.mask.is_degenerate():
            raise ValueError("edit task mask must satisfy 0 < |M| < D")

    @property
    def target_inside(self):
        return self.target * self.mask.elem_mask

    def to_dict(self):
        return {
            "task_id": self.task_id,
            "seed": self.seed,
            "token_dim": self.mask.token_dim,
            "token_mask": self.mask.token_mask.tolist(),
            "source": self.source.tolist(),
            "target": self.target.tolist(),
            "condition": self.condition.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            source=np.asarray(d["source"], dtype=np.float64),
            mask=EditMask(np.asarray(d["token_mask"]), d["token_dim"]),
            target=np.asarray(d["target"], dtype=np.float64),
            condition=Condition.from_dict(d["condition"]),
            task_id=d["task_id"],
            seed=int(d["seed"]),
        )


def _token_mask(rng, geom, mask_spec):
    kind = mask_spec.get("kind", "rect")
    n = geom.n_tokens
    if kind == "rect":
        side = geom.side
        h = int(mask_spec.get("height", 4))
        w = int(mask_spec.get("width", 4))
        if "row" in mask_spec:
            r0, c0 = int(mask_spec["row"]), int(mask_spec.get("col", 0))
        else:
            r0 = int(rng.integers(0, max(side - h, 0) + 1))
            c0 = int(rng.integers(0, max(side - w, 0) + 1))
        grid = np.zeros((side, side))
        grid[r0:r0 + h, c0:c0 + w] = 1.0
        return grid.ravel()
    if kind == "random":
        k = int(round(float(mask_spec.get("fraction", 0.25)) * n))
        tm = np.zeros(n)
        tm[rng.choice(n, size=k, replace=False)] = 1.0
        return tm
    raise ValueError(f"unknown mask kind {kind!r}")


def make_task(seed, geometry=None, mask_spec=None, object_scale=1.5, edit_scale=1.5,
              text_noise=0.1):
    geom = geometry or Geometry()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(7,)))
    tm = _token_mask(rng, geom, mask_spec or {"kind": "rect"})
    mask = EditMask(tm, geom.token_dim)
    if mask.is_degenerate():
        raise ValueError(f"mask spec {mask_spec} yields a degenerate mask (|M|={mask.m_count})")
    d = geom.token_dim

    def unit(v):
        return v / np.linalg.norm(v)

    obj = object_scale * unit(rng.standard_normal(d))
    pattern = edit_scale * unit(rng.standard_normal(d))
    source = rng.standard_normal(geom.dim)
    on_tok = tm == 1
    src_grid = source.reshape(geom.n_tokens, d)
    src_grid[on_tok] += obj
    target = src_grid.copy()
    target[on_tok] += pattern - obj
    text = np.tile(np.concatenate([obj, pattern]), (geom.n_txt, 1))
    text += text_noise * rng.standard_normal(text.shape)
    cond = Condition(text, source.copy(), target_pattern_id=f"task-{seed}")
    return EditTask(source, mask, target.ravel(), cond, f"task-{seed}", int(seed))


def make_suite(n_tasks, seed=0, geometry=None, mask_spec=None):
    return [make_task(seed * 100003 + i, geometry, mask_spec) for i in range(n_tasks)]


def suite_to_json(tasks):
    return json.dumps([t.to_dict() for t in tasks])


def suite_from_json(text):
    return [EditTask.from_dict(d) for d in json.loads(text)]


def _masked_mse(x0, ref, m, inside):
    xv, rv, mv = as_vector(x0), as_vector(ref), as_mask(m)
    check_same_length(xv, rv, mv)
    sel = (mv == 1) if inside else (mv == 0)
    n = sel.sum()
    if n == 0:
        return 0.0
    diff = (xv - rv)[sel]
    return float(diff @ diff) / n


def reward_edit(x0, task):
    """Negative MSE to the target over the edit region (0 at an exact edit)."""
    return -_masked_mse(x0, task.target, task.mask, inside=True)


def reward_pres(x0, task):
    """Negative MSE to the source over the background (0 at exact preservation)."""
    return -_masked_mse(x0, task.source, task.mask, inside=False)


def reward_task(x0, task):
    return reward_edit(x0, task) + reward_pres(x0, task)


def reward_grad(x0, task, edit=True, pres=True):
    """Analytic gradient of the selected reward terms w.r.t. ``x0``."""
    m = task.mask.elem_mask
    g = np.zeros_like(x0)
    if edit:
        g += -2.0 * m * (x0 - task.target) / task.mask.m_count
    if pres:
        g += -2.0 * (1 - m) * (x0 - task.source) / task.mask.mbar_count
    return g

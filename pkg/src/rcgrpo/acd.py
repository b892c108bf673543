"""Attention Concentration Density (ACD) reward and the layer-wise residual."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .latent import EPS

ROW_TOL = 1e-9


@dataclass(frozen=True)
class AttentionRecord:
    """Head-aggregated text-to-image attention, shape (T, L, N_txt, n_tokens).

    ``layer_ids`` are the 1-based layer numbers of the second axis.
    """

    maps: np.ndarray
    layer_ids: tuple

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float64)
        if maps.ndim != 4:
            raise ValueError(f"attention record must be 4-d (T, L, N, n), got {maps.shape}")
        if np.any(maps < 0):
            raise ValueError("attention weights must be nonnegative")
        if not np.allclose(maps.sum(axis=-1), 1.0, rtol=0, atol=ROW_TOL):
            raise ValueError("attention rows must sum to 1")
        ids = tuple(int(i) for i in self.layer_ids) if self.layer_ids else tuple(range(1, maps.shape[1] + 1))
        if len(ids) != maps.shape[1]:
            raise ValueError("layer_ids length does not match the layer axis")
        object.__setattr__(self, "maps", maps)
        object.__setattr__(self, "layer_ids", ids)

    @classmethod
    def from_trajectory(cls, traj):
        return cls(traj.attentions, tuple(range(1, traj.attentions.shape[1] + 1)))

    @property
    def step_count(self):
        return self.maps.shape[0]

    def to_dict(self):
        return {"layer_ids": list(self.layer_ids), "maps": self.maps.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["maps"]), tuple(d["layer_ids"]))

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass(frozen=True)
class AcdReport:
    values: np.ndarray  # (T, |layers|) per-(step, layer) ACD
    layer_ids: tuple  # layers the columns of ``values`` refer to
    selected: tuple  # layers entering the aggregate
    reward: float

    def layer_means(self):
        return dict(zip(self.layer_ids, self.values.mean(axis=0)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "step", "acd"])
        for j, lid in enumerate(self.layer_ids):
            for t in range(self.values.shape[0]):
                w.writerow([lid, t + 1, f"{self.values[t, j]:.9g}"])
        return buf.getvalue()


def attention_mass(A):
    """Attention mass received by each image token (column sums)."""
    A = np.asarray(A, dtype=np.float64)
    if np.any(A < 0):
        raise ValueError("attention weights must be nonnegative")
    return A.sum(axis=-2)


def acd_density(a, token_mask):
    """Mean mass inside the mask relative to the mean over all tokens.

    Broadcasts over leading axes of ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    tm = np.asarray(token_mask, dtype=np.float64)
    if a.shape[-1] != tm.size:
        raise ValueError(f"mass has {a.shape[-1]} tokens, mask has {tm.size}")
    inside = (a @ tm) / (tm.sum() + EPS)
    overall = a.sum(axis=-1) / (tm.size + EPS)
    return inside / overall


def acd_values(maps, token_mask):
    """ACD for every (step, layer) of a (T, L, N, n) attention array."""
    return acd_density(np.asarray(maps).sum(axis=-2), token_mask)


def aggregate_acd(rec, token_mask, layer_set):
    """Per-(step, layer) ACD and their mean over ``layer_set`` x steps."""
    layer_set = tuple(layer_set)
    if not layer_set:
        raise ValueError("layer set must be nonempty")
    missing = set(layer_set) - set(rec.layer_ids)
    if missing:
        raise ValueError(f"layers {sorted(missing)} not in record {rec.layer_ids}")
    vals = acd_values(rec.maps, token_mask)
    cols = [rec.layer_ids.index(l) for l in layer_set]
    return AcdReport(vals, rec.layer_ids, layer_set, float(vals[:, cols].mean()))


def acd_reward(maps, token_mask, layer_cols):
    """Fast path: aggregate ACD from a raw (T, L, N, n) array and 0-based layer columns."""
    return float(acd_values(np.asarray(maps)[:, list(layer_cols)], token_mask).mean())


def acd_layer_residual(positives, negatives, token_mask):
    """Mean step-averaged ACD of positive rollouts minus that of negatives, per layer."""
    if not positives or not negatives:
        raise ValueError("positive and negative rollout sets must be nonempty")
    ids = positives[0].layer_ids
    for rec in list(positives) + list(negatives):
        if rec.layer_ids != ids:
            raise ValueError("all records must share layer ids")

    def mean_profile(recs):
        return np.mean([acd_values(r.maps, token_mask).mean(axis=0) for r in recs], axis=0)

    delta = mean_profile(positives) - mean_profile(negatives)
    return dict(zip(ids, delta))

"""Correlated initial-noise groups: region-decoupled (RDP) and global mixing.

Candidate indices are 0-based throughout; the default reference index is 0.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .latent import as_mask, as_vector, check_same_length

RDP = "rdp"
GLOBAL = "global"


@dataclass(frozen=True)
class PerturbationScheme:
    kind: str = RDP
    alpha_edit: float = 0.3
    alpha_base: float = 1e-4
    sigma: float = 0.3

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind == RDP:
            if not 0.0 <= self.alpha_base <= self.alpha_edit <= 1.0:
                raise ValueError(
                    "RDP requires 0 <= alpha_base <= alpha_edit <= 1, got "
                    f"alpha_edit={self.alpha_edit}, alpha_base={self.alpha_base}"
                )
        elif kind == GLOBAL:
            if not 0.0 < self.sigma < 1.0:
                raise ValueError(f"global scheme requires 0 < sigma < 1, got {self.sigma}")
        else:
            raise ValueError(f"unknown perturbation scheme {self.kind!r}")

    @classmethod
    def rdp(cls, alpha_edit=0.3, alpha_base=1e-4):
        return cls(RDP, alpha_edit=alpha_edit, alpha_base=alpha_base)

    @classmethod
    def global_(cls, sigma=0.3):
        return cls(GLOBAL, sigma=sigma)

    def to_dict(self):
        if self.kind == RDP:
            return {"kind": RDP, "alpha_edit": self.alpha_edit, "alpha_base": self.alpha_base}
        return {"kind": GLOBAL, "sigma": self.sigma}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class NoiseGroup:
    anchor: np.ndarray
    candidates: np.ndarray  # (G, D)
    scheme: PerturbationScheme
    seed: int
    reference_index: int | None = None

    @property
    def size(self):
        return self.candidates.shape[0]

    @property
    def perturbed_indices(self):
        return [i for i in range(self.size) if i != self.reference_index]

    def to_dict(self):
        return {
            "anchor": self.anchor.tolist(),
            "candidates": self.candidates.tolist(),
            "scheme": self.scheme.to_dict(),
            "seed": self.seed,
            "reference_index": self.reference_index,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            anchor=np.asarray(d["anchor"], dtype=np.float64),
            candidates=np.asarray(d["candidates"], dtype=np.float64),
            scheme=PerturbationScheme.from_dict(d["scheme"]),
            seed=int(d["seed"]),
            reference_index=d.get("reference_index"),
        )

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def alpha_map(m, alpha_edit, alpha_base):
    """Per-element mixing coefficient: ``alpha_edit`` on-mask, ``alpha_base`` off-mask."""
    for name, a in (("alpha_edit", alpha_edit), ("alpha_base", alpha_base)):
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"{name} must lie in [0, 1], got {a}")
    mv = as_mask(m)
    return np.where(mv == 1, float(alpha_edit), float(alpha_base))


def mix(anchor, alpha, delta):
    """Variance-preserving mixing ``sqrt(1 - alpha^2) * anchor + alpha * delta``.

    ``alpha`` may be a scalar or per-element array; broadcasts over leading
    batch axes of ``anchor`` / ``delta``.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    return np.sqrt(1.0 - alpha * alpha) * anchor + alpha * delta


def candidate_delta(seed, index, dim):
    """Standard-normal draw for candidate ``index``; independent of group size."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(int(index),))
    return np.random.default_rng(ss).standard_normal(dim)


def _check_group_size(G):
    if G < 2:
        raise ValueError(f"group size G must be >= 2, got {G}")


def build_rdp_group(anchor, m, scheme, G, seed, reference_index=0):
    """Region-decoupled group: candidate ``reference_index`` is the anchor itself."""
    _check_group_size(G)
    if scheme.kind != RDP:
        raise ValueError("build_rdp_group needs an RDP scheme")
    if not 0 <= reference_index < G:
        raise ValueError(f"reference_index must be in [0, {G}), got {reference_index}")
    eps = as_vector(anchor, "anchor").copy()
    mv = as_mask(m)
    check_same_length(eps, mv)
    alpha = alpha_map(mv, scheme.alpha_edit, scheme.alpha_base)
    cands = np.empty((G, eps.size))
    for i in range(G):
        if i == reference_index:
            cands[i] = eps
        else:
            cands[i] = mix(eps, alpha, candidate_delta(seed, i, eps.size))
    return NoiseGroup(eps, cands, scheme, int(seed), reference_index)


def build_global_group(anchor, scheme, G, seed):
    """Neighbourhood with every candidate isotropically perturbed by ``sigma``."""
    _check_group_size(G)
    if scheme.kind != GLOBAL:
        raise ValueError("build_global_group needs a global scheme")
    eps = as_vector(anchor, "anchor").copy()
    cands = np.stack([mix(eps, scheme.sigma, candidate_delta(seed, i, eps.size)) for i in range(G)])
    return NoiseGroup(eps, cands, scheme, int(seed), None)


def build_group(anchor, m, scheme, G, seed, reference_index=0):
    if scheme.kind == RDP:
        return build_rdp_group(anchor, m, scheme, G, seed, reference_index)
    return build_global_group(anchor, scheme, G, seed)


def conditional_covariance_diag(group, m, index=None):
    """Theoretical per-element variance of ``candidate - anchor`` given the anchor.

    With ``index`` equal to the reference candidate of an RDP group the result
    is identically zero.
    """
    mv = as_mask(m)
    scheme = group.scheme
    if scheme.kind == GLOBAL:
        return np.full(mv.size, scheme.sigma**2)
    if index is not None and index == group.reference_index:
        return np.zeros(mv.size)
    return alpha_map(mv, scheme.alpha_edit, scheme.alpha_base) ** 2

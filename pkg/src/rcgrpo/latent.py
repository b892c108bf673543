"""Latent vectors, edit masks and region-restricted helpers.

A latent is a flat float64 vector of length ``D = n_tokens * token_dim`` laid
out token-major, so token ``u`` owns elements ``u*token_dim ... (u+1)*token_dim-1``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EPS = 1e-8


def as_vector(x, name="x"):
    """Return ``x`` (Latent or array-like) as a finite 1-d float64 array."""
    if isinstance(x, Latent):
        return x.data
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-d, got shape {arr.shape}")
    return arr


def as_mask(m):
    """Element-level 0/1 mask array from an EditMask or array-like."""
    if isinstance(m, EditMask):
        return m.elem_mask
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"mask must be 1-d, got shape {arr.shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ValueError("mask entries must be 0 or 1")
    return arr


def check_same_length(*arrays):
    n = len(arrays[0])
    for a in arrays[1:]:
        if len(a) != n:
            raise ValueError(f"dimension mismatch: {n} vs {len(a)}")


@dataclass(frozen=True)
class Latent:
    data: np.ndarray
    n_tokens: int
    token_dim: int

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("latent data must be a non-empty 1-d vector")
        if self.n_tokens * self.token_dim != arr.size:
            raise ValueError(
                f"grid {self.n_tokens}x{self.token_dim} does not match D={arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ValueError("latent contains non-finite entries")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @classmethod
    def flat(cls, data):
        arr = np.asarray(data, dtype=np.float64)
        return cls(arr, arr.size, 1)

    @property
    def dim(self):
        return self.data.size

    def tokens(self):
        return self.data.reshape(self.n_tokens, self.token_dim)

    def __len__(self):
        return self.data.size


@dataclass(frozen=True)
class EditMask:
    """Binary edit mask stored at token and element granularity."""

    token_mask: np.ndarray
    token_dim: int = 1
    elem_mask: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tok = np.array(self.token_mask, dtype=np.float64)
        if tok.ndim != 1 or tok.size == 0:
            raise ValueError("token_mask must be a non-empty 1-d vector")
        if not np.all((tok == 0) | (tok == 1)):
            raise ValueError("mask entries must be 0 or 1")
        if self.token_dim < 1:
            raise ValueError("token_dim must be >= 1")
        elem = np.repeat(tok, self.token_dim)
        tok.setflags(write=False)
        elem.setflags(write=False)
        object.__setattr__(self, "token_mask", tok)
        object.__setattr__(self, "elem_mask", elem)

    @classmethod
    def from_elements(cls, elem_mask, token_dim=1):
        """Build from an element mask; each token must be fully in or out."""
        elem = as_mask(elem_mask)
        if elem.size % token_dim:
            raise ValueError("element mask length not divisible by token_dim")
        grid = elem.reshape(-1, token_dim)
        if not np.all(grid == grid[:, :1]):
            raise ValueError("element mask splits a token across regions")
        return cls(grid[:, 0], token_dim)

    @property
    def dim(self):
        return self.elem_mask.size

    @property
    def n_tokens(self):
        return self.token_mask.size

    @property
    def m_count(self):
        return int(self.elem_mask.sum())

    @property
    def mbar_count(self):
        return self.dim - self.m_count

    @property
    def token_count(self):
        return int(self.token_mask.sum())

    @property
    def complement(self):
        return 1.0 - self.elem_mask

    def is_degenerate(self):
        return self.m_count == 0 or self.m_count == self.dim


@dataclass(frozen=True)
class RegionDecomposition:
    inside: np.ndarray
    outside: np.ndarray

    def recombine(self):
        return self.inside + self.outside


def decompose(x, m):
    """Split ``x`` into its on-mask and off-mask parts.

    Masking is done by selection rather than multiplication so that
    ``inside + outside`` reproduces ``x`` exactly (and non-finite-free zeros).
    """
    xv = as_vector(x)
    mv = as_mask(m)
    check_same_length(xv, mv)
    on = mv == 1
    inside = np.where(on, xv, 0.0)
    outside = np.where(on, 0.0, xv)
    return RegionDecomposition(inside, outside)


def region_norms(x, m):
    """Squared norms of ``x`` inside and outside the mask."""
    xv = as_vector(x)
    mv = as_mask(m)
    check_same_length(xv, mv)
    sq = xv * xv
    in_sq = float(np.sum(sq[mv == 1]))
    out_sq = float(np.sum(sq[mv == 0]))
    return in_sq, out_sq

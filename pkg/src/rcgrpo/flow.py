"""Toy deterministic flow models integrated with explicit Euler steps.

Two velocity fields are provided:

* :class:`LinearFlow` -- ``v = A x + b + B e``, with ``e`` the mean text embedding.
* :class:`AttnFlow` -- a single-head text-to-image cross-attention field
  whose per-token attention mass is written back into the velocity, so that
  attention-based rewards have a differentiable path to the parameters.

Both expose the forward velocity plus the two derivative products the rest of
the package needs: a vector-Jacobian product (for reverse accumulation through
the unrolled integrator) and the dense state Jacobian (for forward sensitivity).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .latent import as_vector


class NonFiniteError(FloatingPointError):
    """Raised when a rollout produces NaN or inf."""


@dataclass(frozen=True)
class Condition:
    text_tokens: np.ndarray
    source: np.ndarray | None = None
    target_pattern_id: str = ""

    def __post_init__(self):
        tok = np.atleast_2d(np.asarray(self.text_tokens, dtype=np.float64))
        if tok.shape[0] < 1 or not np.all(np.isfinite(tok)):
            raise ValueError("condition needs >= 1 finite text token")
        object.__setattr__(self, "text_tokens", tok)
        if self.source is not None:
            object.__setattr__(self, "source", as_vector(self.source, "source"))

    @property
    def mean_text(self):
        return self.text_tokens.mean(axis=0)

    def to_dict(self):
        return {
            "text_tokens": self.text_tokens.tolist(),
            "source": None if self.source is None else self.source.tolist(),
            "target_pattern_id": self.target_pattern_id,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["text_tokens"]), d.get("source"), d.get("target_pattern_id", ""))


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, D); states[0] is the noise at t=1
    attentions: np.ndarray  # (T, L, N_txt, n_tokens); empty L axis for LinearFlow
    step_size: float

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    @property
    def terminal(self):
        return self.states[-1]

    def times(self):
        return 1.0 - self.step_size * np.arange(self.n_steps + 1)


def _softmax_rows(s):
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


class FlowModel:
    """Common machinery: parameter packing, rollout, VJP and Jacobian."""

    kind = ""
    param_names: tuple = ()

    def __init__(self, params, n_tokens, token_dim):
        self.params = {k: np.array(params[k], dtype=np.float64) for k in self.param_names}
        self.n_tokens = int(n_tokens)
        self.token_dim = int(token_dim)

    @property
    def dim(self):
        return self.n_tokens * self.token_dim

    @property
    def n_layers(self):
        return 0

    # --- parameter packing -------------------------------------------------
    def flat_params(self):
        return np.concatenate([self.params[k].ravel() for k in self.param_names])

    def flatten_grads(self, grads):
        return np.concatenate([grads[k].ravel() for k in self.param_names])

    def unflatten(self, vec):
        out, pos = {}, 0
        for k in self.param_names:
            shape = self.params[k].shape
            n = int(np.prod(shape))
            out[k] = vec[pos:pos + n].reshape(shape)
            pos += n
        return out

    def with_flat_params(self, vec):
        return self.with_params(self.unflatten(np.asarray(vec, dtype=np.float64)))

    def with_params(self, params):
        new = self.copy()
        new.params = {k: np.array(params[k], dtype=np.float64) for k in self.param_names}
        return new

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__ = dict(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new

    def zero_grads(self):
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # --- subclasses implement --------------------------------------------
    def velocity(self, x, t, cond):
        """Return ``(v, attn, cache)``; ``attn`` has shape (L, N_txt, n_tokens)."""
        raise NotImplementedError

    def velocity_vjp(self, cache, u):
        """Return ``(u^T dv/dx, {name: u^T dv/dparam})``."""
        raise NotImplementedError

    def velocity_jacobian(self, cache):
        """Dense ``dv/dx`` of shape (D, D)."""
        raise NotImplementedError

    # --- integration -------------------------------------------------------
    def _forward(self, eps, cond, T, keep_cache):
        if T < 1:
            raise ValueError(f"T must be >= 1, got {T}")
        x = as_vector(eps, "eps").copy()
        if x.size != self.dim:
            raise ValueError(f"noise has dimension {x.size}, model expects {self.dim}")
        dt = 1.0 / T
        states = np.empty((T + 1, x.size))
        states[0] = x
        attns = np.empty((T, self.n_layers, cond.text_tokens.shape[0], self.n_tokens))
        caches = []
        for k in range(T):
            t = 1.0 - k * dt
            v, attn, cache = self.velocity(states[k], t, cond)
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"non-finite velocity at step {k} (t={t:.4f})")
            states[k + 1] = states[k] - dt * v
            attns[k] = attn
            if keep_cache:
                caches.append(cache)
        if not np.all(np.isfinite(states)):
            raise NonFiniteError("non-finite state in rollout")
        return Trajectory(states, attns, dt), caches

    def rollout(self, eps, cond, T):
        return self._forward(eps, cond, T, keep_cache=False)[0]

    def velocity_batch(self, X, t, cond):
        """Velocity for a batch of states ``X`` of shape (N, D); no attention output."""
        return np.stack([self.velocity(x, t, cond)[0] for x in X])

    def terminal_batch(self, eps_batch, cond, T, chunk=8192):
        """Terminal states for many noises at once, shape (N, D)."""
        E = np.atleast_2d(np.asarray(eps_batch, dtype=np.float64))
        dt = 1.0 / T
        out = np.empty_like(E)
        for lo in range(0, E.shape[0], chunk):
            X = E[lo:lo + chunk].copy()
            for k in range(T):
                X -= dt * self.velocity_batch(X, 1.0 - k * dt, cond)
            out[lo:lo + chunk] = X
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite terminal state in batched rollout")
        return out

    def rollout_vjp(self, eps, cond, T, cotangents):
        """Reverse accumulation of ``sum_k w_k^T d states[k]``.

        ``cotangents`` maps a state index ``k`` (0..T) to a vector ``w_k``.
        Returns ``(param_grads, noise_grad)`` where ``param_grads`` is a dict
        shaped like :attr:`params`.
        """
        traj, caches = self._forward(eps, cond, T, keep_cache=True)
        D = self.dim
        for k, w in cotangents.items():
            if not 0 <= k <= T:
                raise ValueError(f"cotangent step {k} outside 0..{T}")
            if np.shape(w) != (D,):
                raise ValueError(f"cotangent at step {k} has shape {np.shape(w)}, expected ({D},)")
        dt = traj.step_size
        grads = self.zero_grads()
        g = np.array(cotangents.get(T, np.zeros(D)), dtype=np.float64)
        for k in range(T - 1, -1, -1):
            dx, dp = self.velocity_vjp(caches[k], g)
            for name, val in dp.items():
                grads[name] -= dt * val
            g = g - dt * dx
            if k in cotangents:
                g = g + cotangents[k]
        return grads, g

    def jacobian_wrt_noise(self, eps, cond, T):
        """Dense d(terminal state)/d(noise) by forward sensitivity."""
        traj, caches = self._forward(eps, cond, T, keep_cache=True)
        dt = traj.step_size
        J = np.eye(self.dim)
        for cache in caches:
            J = J - dt * (self.velocity_jacobian(cache) @ J)
        return J

    # --- serialization -----------------------------------------------------
    def geometry(self):
        return {"n_tokens": self.n_tokens, "token_dim": self.token_dim}

    def to_dict(self):
        return {
            "model_kind": self.kind,
            "geometry": self.geometry(),
            "params": {
                k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                for k, v in self.params.items()
            },
        }

    def to_json(self):
        return json.dumps(self.to_dict())


class LinearFlow(FlowModel):
    kind = "LinearFlow"
    param_names = ("A", "b", "B")

    def __init__(self, params, n_tokens, token_dim=1):
        super().__init__(params, n_tokens, token_dim)
        D = self.dim
        if self.params["A"].shape != (D, D) or self.params["b"].shape != (D,):
            raise ValueError("LinearFlow parameter shapes do not match the geometry")

    @classmethod
    def create(cls, A, b=None, B=None, n_tokens=None, token_dim=1, d_txt=1):
        A = np.asarray(A, dtype=np.float64)
        D = A.shape[0]
        b = np.zeros(D) if b is None else b
        B = np.zeros((D, d_txt)) if B is None else B
        return cls({"A": A, "b": b, "B": B}, n_tokens or D // token_dim, token_dim)

    def velocity(self, x, t, cond):
        p = self.params
        e = cond.mean_text
        v = p["A"] @ x + p["b"] + p["B"] @ e
        return v, np.empty((0, cond.text_tokens.shape[0], self.n_tokens)), (x, e)

    def velocity_batch(self, X, t, cond):
        p = self.params
        return X @ p["A"].T + (p["b"] + p["B"] @ cond.mean_text)

    def velocity_vjp(self, cache, u):
        x, e = cache
        return self.params["A"].T @ u, {"A": np.outer(u, x), "b": u.copy(), "B": np.outer(u, e)}

    def velocity_jacobian(self, cache):
        return self.params["A"]


class AttnFlow(FlowModel):
    """Cross-attention velocity field.

    Per layer ``l`` the text queries ``E Wq`` attend over image keys ``X Wk``
    (``X`` is the state viewed as an ``n_tokens x token_dim`` grid).  The
    column mass ``a_l(u) = sum_v A_l(v, u)`` scales a layer message
    ``mean(E) Wo`` deposited on token ``u``.  The full field is::

        v = t * Ws (x - source) + flatten(sum_l outer(a_l, mean(E) Wo_l))
    """

    kind = "AttnFlow"
    param_names = ("Wq", "Wk", "Wo", "Ws")

    def __init__(self, params, n_tokens, token_dim):
        super().__init__(params, n_tokens, token_dim)
        L = self.params["Wq"].shape[0]
        if L < 1 or self.params["Wk"].shape[0] != L or self.params["Wo"].shape[0] != L:
            raise ValueError("AttnFlow needs L >= 1 consistent layers")
        if self.params["Ws"].shape != (self.dim, self.dim):
            raise ValueError("Ws must be D x D")
        if self.params["Wk"].shape[1] != token_dim or self.params["Wo"].shape[2] != token_dim:
            raise ValueError("key/output projections must match token_dim")
        self._scale = 1.0 / np.sqrt(token_dim)

    @classmethod
    def init(cls, n_tokens, token_dim, d_txt, n_layers, rng=0, key_dim=None,
             state_gain=2.0, state_noise=0.05, attn_scale=0.3, out_scale=0.1):
        rng = np.random.default_rng(rng)
        dk = key_dim or token_dim
        D = n_tokens * token_dim
        params = {
            "Wq": attn_scale * rng.standard_normal((n_layers, d_txt, dk)),
            "Wk": attn_scale * rng.standard_normal((n_layers, token_dim, dk)),
            "Wo": out_scale * rng.standard_normal((n_layers, d_txt, token_dim)),
            "Ws": state_gain * np.eye(D) + state_noise * rng.standard_normal((D, D)) / np.sqrt(D),
        }
        return cls(params, n_tokens, token_dim)

    @property
    def n_layers(self):
        return self.params["Wq"].shape[0]

    def velocity(self, x, t, cond):
        p = self.params
        E = cond.text_tokens
        e = E.mean(axis=0)
        src = cond.source if cond.source is not None else 0.0
        X = x.reshape(self.n_tokens, self.token_dim)
        r = x - src
        v = t * (p["Ws"] @ r)
        msg = np.zeros_like(X)
        L = self.n_layers
        attn = np.empty((L, E.shape[0], self.n_tokens))
        Qs, Ks, os_ = [], [], []
        for l in range(L):
            Q = E @ p["Wq"][l]
            K = X @ p["Wk"][l]
            A = _softmax_rows(self._scale * (Q @ K.T))
            o = e @ p["Wo"][l]
            msg += np.outer(A.sum(axis=0), o)
            attn[l] = A
            Qs.append(Q)
            Ks.append(K)
            os_.append(o)
        v = v + msg.ravel()
        if not np.all(np.isfinite(attn)):
            bad = int(np.argwhere(~np.isfinite(attn))[0][0])
            raise NonFiniteError(f"non-finite attention in layer {bad} at t={t:.4f}")
        cache = (X, r, t, E, e, attn, Qs, Ks, os_)
        return v, attn, cache

    def velocity_batch(self, Xb, t, cond):
        p = self.params
        E = cond.text_tokens
        e = E.mean(axis=0)
        src = cond.source if cond.source is not None else 0.0
        N = Xb.shape[0]
        grid = Xb.reshape(N, self.n_tokens, self.token_dim)
        gridT = grid.transpose(0, 2, 1)
        v = t * ((Xb - src) @ p["Ws"].T)
        msg = np.zeros_like(grid)
        for l in range(self.n_layers):
            Q = E @ p["Wq"][l]
            S = (self._scale * (Q @ p["Wk"][l].T)) @ gridT  # (N, N_txt, n_tokens)
            S -= S.max(axis=2, keepdims=True)
            np.exp(S, out=S)
            S /= S.sum(axis=2, keepdims=True)
            msg += S.sum(axis=1)[:, :, None] * (e @ p["Wo"][l])[None, None, :]
        return v + msg.reshape(N, -1)

    def velocity_vjp(self, cache, u):
        X, r, t, E, e, attn, Qs, Ks, os_ = cache
        p = self.params
        grads = {k: np.zeros_like(v) for k, v in p.items()}
        grads["Ws"] = t * np.outer(u, r)
        dx = t * (p["Ws"].T @ u)
        U = u.reshape(self.n_tokens, self.token_dim)
        dX = np.zeros_like(X)
        for l in range(self.n_layers):
            A, Q, K, o = attn[l], Qs[l], Ks[l], os_[l]
            col = A.sum(axis=0)
            dcol = U @ o
            grads["Wo"][l] = np.outer(e, U.T @ col)
            # column sum: every text row receives dcol
            dS = A * (dcol[None, :] - (A * dcol[None, :]).sum(axis=1, keepdims=True))
            dS *= self._scale
            dQ = dS @ K
            dK = dS.T @ Q
            grads["Wq"][l] = E.T @ dQ
            grads["Wk"][l] = X.T @ dK
            dX += dK @ p["Wk"][l].T
        return dx + dX.ravel(), grads

    def velocity_jacobian(self, cache):
        X, r, t, E, e, attn, Qs, Ks, os_ = cache
        n, d = self.n_tokens, self.token_dim
        Jt = np.zeros((n, d, n, d))
        for l in range(self.n_layers):
            A, Q, o = attn[l], Qs[l], os_[l]
            # P[v] = d S[v, w] / d X[w]  (same for every w)
            P = self._scale * (Q @ self.params["Wk"][l].T)  # (N, d)
            diag = np.einsum("vu,vb->ub", A, P)  # d col[u] / d X[u] (self term)
            cross = np.einsum("vu,vw,vb->uwb", A, A, P)
            C = -cross
            C[np.arange(n), np.arange(n)] += diag
            Jt += np.einsum("a,uwb->uawb", o, C)
        return t * self.params["Ws"] + Jt.reshape(n * d, n * d)


MODEL_KINDS = {LinearFlow.kind: LinearFlow, AttnFlow.kind: AttnFlow}


def model_from_dict(d):
    cls = MODEL_KINDS.get(d["model_kind"])
    if cls is None:
        raise ValueError(f"unknown model_kind {d['model_kind']!r}")
    params = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
        for k, v in d["params"].items()
    }
    g = d["geometry"]
    return cls(params, g["n_tokens"], g["token_dim"])


def model_from_json(text):
    return model_from_dict(json.loads(text))

"""scikit-learn style front end for region-constrained GRPO training.

``X`` is a sequence of :class:`~rcgrpo.env.EditTask`; there is no ``y``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .env import EditTask, Geometry
from .flow import AttnFlow
from .grpo import GrpoConfig, evaluate, train_step
from .noise import GLOBAL, PerturbationScheme
from .surrogate import Bandwidths


def check_tasks(X):
    """Validate a task sequence and return it as a list sharing one geometry."""
    if isinstance(X, EditTask):
        X = [X]
    tasks = list(X)
    if not tasks:
        raise ValueError("expected at least one EditTask")
    for t in tasks:
        if not isinstance(t, EditTask):
            raise TypeError(f"expected EditTask, got {type(t).__name__}")
    first = tasks[0]
    for t in tasks[1:]:
        if t.mask.dim != first.mask.dim or t.mask.token_dim != first.mask.token_dim:
            raise ValueError("all tasks must share the latent geometry")
        if t.condition.text_tokens.shape != first.condition.text_tokens.shape:
            raise ValueError("all tasks must share the text-condition shape")
    return tasks


def check_noise(noise, n, dim):
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 1:
        noise = np.broadcast_to(noise, (n, noise.size))
    if noise.shape != (n, dim):
        raise ValueError(f"noise must have shape ({n}, {dim}), got {noise.shape}")
    if not np.all(np.isfinite(noise)):
        raise ValueError("noise contains non-finite values")
    return noise


class RegionGRPO(BaseEstimator):
    """Post-train a toy cross-attention flow editor with region-constrained GRPO.

    Fitted attributes: ``model_`` (the trained :class:`~rcgrpo.flow.AttnFlow`),
    ``history_`` (one metrics dict per group per update) and
    ``n_updates_`` (updates applied so far).
    """

    def __init__(self, G=8, B=2, lr=10.0, n_updates=200, groups_per_update=4, scheme="rdp",
                 alpha_edit=0.3, alpha_base=1e-4, sigma=0.3, tau_edit=0.9, tau_base=1.1,
                 lambda_task=0.5, lambda_acd=0.5, eps_clip=0.2, T_train=8, n_layers=4,
                 acd_layers=(3, 4), norm_scope="minibatch", random_state=0, model_init_seed=0):
        self.G = G
        self.B = B
        self.lr = lr
        self.n_updates = n_updates
        self.groups_per_update = groups_per_update
        self.scheme = scheme
        self.alpha_edit = alpha_edit
        self.alpha_base = alpha_base
        self.sigma = sigma
        self.tau_edit = tau_edit
        self.tau_base = tau_base
        self.lambda_task = lambda_task
        self.lambda_acd = lambda_acd
        self.eps_clip = eps_clip
        self.T_train = T_train
        self.n_layers = n_layers
        self.acd_layers = acd_layers
        self.norm_scope = norm_scope
        self.random_state = random_state
        self.model_init_seed = model_init_seed

    def _config(self):
        if self.scheme == GLOBAL:
            scheme = PerturbationScheme.global_(self.sigma)
        else:
            scheme = PerturbationScheme.rdp(self.alpha_edit, self.alpha_base)
        return GrpoConfig(
            G=self.G, B=self.B, eps_clip=self.eps_clip, lr=self.lr,
            lambda_task=self.lambda_task, lambda_acd=self.lambda_acd,
            groups_per_update=self.groups_per_update, scheme=scheme,
            bandwidths=Bandwidths(self.tau_edit, self.tau_base), T_train=self.T_train,
            seed=self.random_state, acd_layers=tuple(self.acd_layers), norm_scope=self.norm_scope,
        )

    def _init_model(self, tasks):
        t = tasks[0]
        geom = Geometry(t.mask.n_tokens, t.mask.token_dim, t.condition.text_tokens.shape[0], self.n_layers)
        return AttnFlow.init(geom.n_tokens, geom.token_dim, t.condition.text_tokens.shape[1],
                             self.n_layers, rng=self.model_init_seed)

    def fit(self, X, y=None):
        tasks = check_tasks(X)
        self.config_ = self._config()
        self.model_ = self._init_model(tasks)
        self.history_ = []
        self.n_updates_ = 0
        for _ in range(self.n_updates):
            self._update(tasks)
        return self

    def partial_fit(self, X, y=None):
        """Apply one GRPO update (initializing the model on first call)."""
        tasks = check_tasks(X)
        if not hasattr(self, "model_"):
            self.config_ = self._config()
            self.model_ = self._init_model(tasks)
            self.history_ = []
            self.n_updates_ = 0
        self._update(tasks)
        return self

    def _update(self, tasks):
        per = self.config_.groups_per_update
        u = self.n_updates_
        batch = [tasks[(u * per + j) % len(tasks)] for j in range(per)]
        res = train_step(self.model_, batch, self.config_, update_index=u)
        self.model_ = res.model
        self.history_.extend(res.rows)
        self.n_updates_ += 1

    def predict(self, X, noise=None):
        """Deterministic single-path edits (no perturbation), shape (n_tasks, D)."""
        check_is_fitted(self, "model_")
        tasks = check_tasks(X)
        dim = self.model_.dim
        if noise is None:
            noise = np.random.default_rng(self.random_state).standard_normal(dim)
        noise = check_noise(noise, len(tasks), dim)
        return np.stack([
            self.model_.rollout(eps, t.condition, self.T_train).terminal
            for eps, t in zip(noise, tasks)
        ])

    def score(self, X, y=None):
        """Mean weighted task + ACD reward of unperturbed rollouts."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_tasks(X), self.config_)["combined"]

"""Experiment configuration: one JSON document, validated at load time."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields

from .env import Geometry
from .grpo import GROUP, MINIBATCH, GrpoConfig
from .noise import GLOBAL, RDP, PerturbationScheme
from .surrogate import Bandwidths, calibrate_bandwidths


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field name."""


@dataclass
class ExperimentConfig:
    # model geometry (toy scale; the reference setup uses a 19-block transformer)
    n_tokens: int = 64
    token_dim: int = 2
    n_txt: int = 4
    n_layers: int = 4
    acd_layers: list = field(default_factory=lambda: [3, 4])
    # GRPO
    G: int = 8
    B: int = 2
    eps_clip: float = 0.2
    beta_kl: float = 0.0
    lr: float = 10.0
    lambda_task: float = 0.5
    lambda_acd: float = 0.5
    groups_per_update: int = 4
    n_updates: int = 200
    T_train: int = 8
    T_eval: int = 16
    norm_scope: str = MINIBATCH
    policy_stride: int = 1
    metric: str = "masked"
    reference_index: int = 0
    # perturbation
    scheme: str = RDP
    alpha_edit: float = 0.3
    alpha_base: float = 1e-4
    sigma: float = 0.3
    # surrogate bandwidths
    tau_edit: float = 0.9
    tau_base: float = 1.1
    bandwidth_mode: str = "fixed"
    calib_c: float = 3.0
    tau_min: float = 1e-3
    # tasks
    n_tasks: int = 8
    mask: dict = field(default_factory=lambda: {"kind": "rect", "height": 4, "width": 4})
    # variance lab
    lab_preset: str = "linear-block"
    lab_samples: int = 100000
    lab_sigma: float = 0.3
    lab_alpha_edit: float = 0.3
    lab_alpha_base: float = 0.05
    # acd diagnostic
    diag_conditions: int = 200
    diag_rollouts: int = 4
    # misc
    model_init_seed: int = 0
    seed: int = 0
    out_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        for name in ("n_tokens", "token_dim", "n_txt", "n_layers", "G", "B", "groups_per_update",
                     "T_train", "T_eval", "n_tasks", "policy_stride", "diag_conditions", "diag_rollouts"):
            if int(getattr(self, name)) < 1:
                bad(name, "must be >= 1")
        if self.n_updates < 0:
            bad("n_updates", "must be >= 0")
        if self.G < 2:
            bad("G", "must be >= 2")
        if self.T_train < 2:
            bad("T_train", "must be >= 2")
        if not self.acd_layers or any(not 1 <= l <= self.n_layers for l in self.acd_layers):
            bad("acd_layers", f"must be a nonempty subset of 1..{self.n_layers}")
        if self.scheme not in (RDP, GLOBAL):
            bad("scheme", f"must be {RDP!r} or {GLOBAL!r}")
        n_perturbed = self.G if self.scheme == GLOBAL else self.G - 1
        if not 1 <= self.B <= n_perturbed:
            bad("B", f"must be in 1..{n_perturbed} for G={self.G} under {self.scheme}")
        if not 0 <= self.reference_index < self.G:
            bad("reference_index", f"must be in 0..{self.G - 1}")
        if self.eps_clip <= 0:
            bad("eps_clip", "must be > 0")
        if self.beta_kl != 0:
            bad("beta_kl", "only 0 is supported")
        if self.lr < 0:
            bad("lr", "must be >= 0")
        for name in ("lambda_task", "lambda_acd"):
            if getattr(self, name) < 0:
                bad(name, "must be >= 0")
        if not 0 <= self.alpha_base <= self.alpha_edit <= 1:
            bad("alpha_edit", "need 0 <= alpha_base <= alpha_edit <= 1")
        if not 0 < self.sigma < 1:
            bad("sigma", "must lie in (0, 1)")
        if self.bandwidth_mode not in ("fixed", "calibrated"):
            bad("bandwidth_mode", "must be 'fixed' or 'calibrated'")
        if self.tau_edit <= 0 or self.tau_base <= 0:
            bad("tau_edit" if self.tau_edit <= 0 else "tau_base", "must be > 0")
        if self.bandwidth_mode == "calibrated" and self.alpha_edit == 0:
            bad("alpha_edit", "calibrated bandwidths need alpha_edit > 0")
        if self.norm_scope not in (MINIBATCH, GROUP):
            bad("norm_scope", f"must be {MINIBATCH!r} or {GROUP!r}")
        if self.metric not in ("masked", "euclidean"):
            bad("metric", "must be 'masked' or 'euclidean'")
        if self.lab_preset not in ("linear-block", "identity", "attn"):
            bad("lab_preset", "must be 'linear-block', 'identity' or 'attn'")
        if self.lab_samples < 2:
            bad("lab_samples", "must be >= 2")
        if not 0 < self.lab_sigma < 1:
            bad("lab_sigma", "must lie in (0, 1)")
        if not 0 <= self.lab_alpha_base <= self.lab_alpha_edit <= 1:
            bad("lab_alpha_edit", "need 0 <= lab_alpha_base <= lab_alpha_edit <= 1")
        try:
            Geometry(self.n_tokens, self.token_dim, self.n_txt, self.n_layers).side
        except ValueError as err:
            if self.mask.get("kind", "rect") == "rect":
                bad("n_tokens", str(err))
        if self.mask.get("kind", "rect") not in ("rect", "random"):
            bad("mask", "kind must be 'rect' or 'random'")

    # --- derived objects -------------------------------------------------
    @property
    def geometry(self):
        return Geometry(self.n_tokens, self.token_dim, self.n_txt, self.n_layers)

    def perturbation(self, kind=None):
        kind = kind or self.scheme
        if kind == RDP:
            return PerturbationScheme.rdp(self.alpha_edit, self.alpha_base)
        return PerturbationScheme.global_(self.sigma)

    def bandwidths(self):
        if self.bandwidth_mode == "calibrated":
            return calibrate_bandwidths(self.alpha_edit, self.alpha_base, self.calib_c, self.tau_min)
        return Bandwidths(self.tau_edit, self.tau_base)

    def grpo(self, scheme=None):
        return GrpoConfig(
            G=self.G, B=self.B, eps_clip=self.eps_clip, beta_kl=self.beta_kl, lr=self.lr,
            lambda_task=self.lambda_task, lambda_acd=self.lambda_acd,
            groups_per_update=self.groups_per_update, scheme=self.perturbation(scheme),
            bandwidths=self.bandwidths(), T_train=self.T_train, seed=self.seed,
            reference_index=self.reference_index, acd_layers=tuple(self.acd_layers),
            norm_scope=self.norm_scope, policy_stride=self.policy_stride, metric=self.metric,
        )

    # --- IO ------------------------------------------------------------------
    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown configuration field")
        try:
            return cls(**d)
        except TypeError as err:
            raise ConfigError(f"config: {err}") from err

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw):
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return type(self).from_dict(d)

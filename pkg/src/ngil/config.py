"""Experiment configuration: one flat JSON document, also used as the run echo."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from ngil.mmd import KernelConfig
from ngil.train import MEMORY_STRATEGIES, TRAINER_KINDS, SSRMConfig

MODES = ("inductive", "transductive")


@dataclass
class ExperimentConfig:
    source: str = "csbm"  # "csbm" or "bundle"
    bundle: str | None = None

    csbm_tasks: int = 20
    csbm_batch_size: int = 100
    csbm_imbalance: float = 0.8
    csbm_dim: int = 8
    csbm_gap: float = 4.0
    csbm_spread: float = 2.0
    csbm_p_in: float = 0.03
    csbm_p_out: float = 0.015
    csbm_sigma: float = 1.0
    csbm_orientation: str = "alternating"

    trainer: str = "bare"
    mode: str = "inductive"
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])

    alpha: float = 0.1
    beta: float = 0.5
    memory_budget: int = 10
    memory_strategy: str = "per-class-uniform"
    mmd_subsample: int = 256
    kernel_alphas: list[float] = field(default_factory=lambda: [1.0, 0.1, 0.01])
    kernel_norm: str = "l2"

    epochs: int = 200
    lr: float = 5e-3
    patience: int = 20
    min_delta: float = 1e-5
    hidden: int = 64
    layers: int = 2
    activation: str = "relu"

    bound_diagnostics: bool = True
    bound_q: float = 1.0

    seed: int = 0
    out_dir: str | None = None

    def validate(self) -> "ExperimentConfig":
        if self.source not in ("csbm", "bundle"):
            raise ValueError(f"source must be 'csbm' or 'bundle', got {self.source!r}")
        if self.source == "bundle":
            if not self.bundle:
                raise ValueError("source 'bundle' requires a bundle path")
            if not Path(self.bundle).is_dir():
                raise ValueError(f"bundle directory {self.bundle} does not exist")
        elif self.bundle:
            raise ValueError("give exactly one dataset source: bundle is set but source is 'csbm'")
        if self.trainer not in TRAINER_KINDS:
            raise ValueError(f"trainer must be one of {TRAINER_KINDS}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.memory_strategy not in MEMORY_STRATEGIES:
            raise ValueError(f"memory_strategy must be one of {MEMORY_STRATEGIES}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split must be three ratios summing to 1")
        if self.csbm_orientation not in ("random", "alternating"):
            raise ValueError("csbm_orientation must be 'random' or 'alternating'")
        if self.layers < 1 or self.hidden < 1:
            raise ValueError("layers and hidden must be >= 1")
        self.ssrm_config()
        return self

    def kernel(self) -> KernelConfig:
        return KernelConfig(alphas=tuple(self.kernel_alphas), norm=self.kernel_norm)

    def ssrm_config(self) -> SSRMConfig:
        return SSRMConfig(
            alpha=self.alpha,
            beta=self.beta,
            memory_budget=self.memory_budget,
            mmd_subsample=self.mmd_subsample,
            kernel=self.kernel(),
            epochs=self.epochs,
            lr=self.lr,
            patience=self.patience,
            min_delta=self.min_delta,
            memory_strategy=self.memory_strategy,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in overrides.items() if v is not None})
        return type(self).from_dict(data)

"""Run configuration shared by the library and the CLI."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError

COV_KINDS = ("diagonal", "full")


@dataclass(frozen=True)
class RunConfig:
    # posterior / vMF temperature (tau = 1 / kappa)
    tau: float = 0.1
    tau_p: float = 0.1
    tau_q: float = 1.0
    lambda_pc: float = 1.0
    alpha: float = 0.5
    beta_p: float = 0.01
    # None means "same as beta_p"
    beta_q: float | None = None
    epsilon_ot: float = 0.05
    k_candidates: tuple[int, ...] = tuple(range(1, 11))
    seed: int = 0
    cov_kind: str = "diagonal"

    # trainer
    epochs: int = 200
    lr: float = 0.5
    batch_size: int = 1024
    init_strategy: str = "kmeans++"

    # optimal transport
    sinkhorn_iters: int = 100
    sinkhorn_tol: float = 1e-6

    # gmm / bic
    gmm_restarts: int = 4
    gmm_max_iters: int = 200
    gmm_tol: float = 1e-6

    # scoring
    shrinkage: float = 1e-3
    cov_floor: float = 1e-8
    conf_source: str = "ema"

    def __post_init__(self):
        object.__setattr__(self, "k_candidates", tuple(int(k) for k in self.k_candidates))
        for name in ("tau", "tau_p", "tau_q", "epsilon_ot"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.lambda_pc < 0:
            raise ConfigError("lambda_pc must be >= 0")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        for name in ("beta_p", "beta_q"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if not self.k_candidates or min(self.k_candidates) < 1:
            raise ConfigError("k_candidates must be non-empty with entries >= 1")
        if self.cov_kind not in COV_KINDS:
            raise ConfigError(f"cov_kind must be one of {COV_KINDS}")
        if self.epochs < 0 or self.lr < 0 or self.batch_size < 1:
            raise ConfigError("epochs and lr must be >= 0, batch_size >= 1")
        if self.init_strategy not in ("kmeans++", "random-unit"):
            raise ConfigError(f"unknown init strategy {self.init_strategy!r}")
        if self.conf_source not in ("ema", "instant"):
            raise ConfigError("conf_source must be 'ema' or 'instant'")
        if self.shrinkage < 0 or self.cov_floor < 0:
            raise ConfigError("shrinkage and cov_floor must be >= 0")

    @property
    def quality_momentum(self) -> float:
        return self.beta_p if self.beta_q is None else self.beta_q

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["k_candidates"] = list(self.k_candidates)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON at line {exc.lineno} column {exc.colno}") from None
        return cls.from_dict(data)

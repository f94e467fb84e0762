"""Experiment configuration: YAML file, validation and hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ..ensemble import MAX_LEVEL

OBSERVABLES = ("spectrum", "vectors", "green", "flow", "stats")
ENSEMBLES = ("ultrametric", "goe")
# full eigendecompositions above this level do not fit a desk machine
VECTOR_LEVEL_CEILING = 12


class ConfigError(ValueError):
    """Invalid configuration; ``violations`` lists every broken constraint."""

    def __init__(self, violations: list[str]):
        super().__init__("invalid configuration:\n  " + "\n  ".join(violations))
        self.violations = violations


@dataclass
class ExperimentConfig:
    """A grid of ``(epsilon, n)`` cells, each run for ``realizations`` independent samples.

    ``alpha`` sets the fine spectral scale ``eta = N**(-1 + alpha)`` and
    ``alpha_tilde`` the coarse one used by flow propagation.
    """

    epsilons: list[float] = field(default_factory=lambda: [-0.75])
    levels: list[int] = field(default_factory=lambda: [8])
    realizations: int = 1
    alpha: float = 0.5
    alpha_tilde: float | None = None
    observables: list[str] = field(default_factory=lambda: ["spectrum"])
    output_dir: str = "results"
    master_seed: int = 0
    ensemble: str = "ultrametric"  # "goe": entry variance (1 + delta) / N, normalization ignored
    normalization: str = "raw"
    window_quantile: float = 0.25
    max_failures: int = 0
    workers: int = 1
    memory_budget_gb: float = 4.0
    # observable knobs
    holder_energies: int = 20
    holder_eta_max: float = 0.1
    holder_eta_points: int = 12
    holder_min_decades: float = 2.0
    flow_grid_points: int = 100
    flow_path_intervals: int = 16
    flow_time: str | float = "top_layer"
    pair_scales: list[float] = field(default_factory=lambda: [0.5, 1.0, 1.5, 2.0, 3.0])

    def violations(self) -> list[str]:
        out = []
        if not self.epsilons:
            out.append("epsilons must not be empty")
        if not self.levels:
            out.append("levels must not be empty")
        for n in self.levels:
            if not isinstance(n, int) or not 0 <= n <= MAX_LEVEL:
                out.append(f"level {n!r} outside [0, {MAX_LEVEL}]")
        if not isinstance(self.realizations, int) or self.realizations < 1:
            out.append("realizations must be a positive integer")
        if not 0 < self.alpha < 1:
            out.append(f"alpha={self.alpha} outside (0, 1)")
        unknown = sorted(set(self.observables) - set(OBSERVABLES))
        if unknown:
            out.append(f"unknown observables {unknown}; choose from {list(OBSERVABLES)}")
        if not self.observables:
            out.append("observables must not be empty")
        if self.ensemble not in ENSEMBLES:
            out.append(f"ensemble must be one of {list(ENSEMBLES)}")
        if self.normalization not in ("raw", "mean_field"):
            out.append("normalization must be 'raw' or 'mean_field'")
        if self.ensemble == "ultrametric" and self.normalization == "raw":
            out.extend(f"raw ensemble needs epsilon > -1, got {e}" for e in self.epsilons if not e > -1)
        if not isinstance(self.master_seed, int) or not 0 <= self.master_seed < 2**64:
            out.append("master_seed must be a 64-bit unsigned integer")
        if not 0 < self.window_quantile < 0.5:
            out.append("window_quantile must lie in (0, 0.5)")
        if self.max_failures < 0:
            out.append("max_failures must be non-negative")
        if self.workers < 1:
            out.append("workers must be at least 1")
        needs_vectors = {"vectors", "green"} & set(self.observables)
        if needs_vectors:
            out.extend(
                f"level {n} exceeds the eigenvector ceiling {VECTOR_LEVEL_CEILING} needed by {sorted(needs_vectors)}"
                for n in self.levels if isinstance(n, int) and n > VECTOR_LEVEL_CEILING
            )
        if {"flow", "stats"} & set(self.observables) and self.ensemble == "ultrametric":
            if self.normalization != "raw":
                out.append("flow and stats observables split off the top layer and need normalization 'raw'")
            out.extend(f"flow and stats observables need n >= 2, got {n}" for n in self.levels if isinstance(n, int) and n < 2)
        if "flow" in self.observables:
            if self.alpha_tilde is None:
                out.append("flow observable needs alpha_tilde")
            else:
                if not self.alpha_tilde > 0.5:
                    out.append(f"alpha_tilde={self.alpha_tilde} must exceed 1/2")
                if self.ensemble == "ultrametric":
                    out.extend(f"alpha_tilde={self.alpha_tilde} must be below -epsilon={-e}" for e in self.epsilons if not self.alpha_tilde < -e)
                if not self.alpha_tilde < 1:
                    out.append("alpha_tilde must be below 1")
            if not (self.flow_time == "top_layer" or (isinstance(self.flow_time, (int, float)) and self.flow_time > 0)):
                out.append("flow_time must be 'top_layer' or a positive number")
            if self.flow_grid_points < 1 or self.flow_path_intervals < 1:
                out.append("flow grid sizes must be positive")
        if self.holder_energies < 1 or self.holder_eta_points < 3:
            out.append("need holder_energies >= 1 and holder_eta_points >= 3")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.violations()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def numeric_dict(self) -> dict:
        """Fields that influence numeric output (execution knobs excluded)."""
        d = self.to_dict()
        for k in ("output_dir", "workers", "memory_budget_gb", "max_failures"):
            d.pop(k)
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.numeric_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown configuration keys {unknown}"])
        data = dict(data)
        for k in ("epsilons", "levels", "observables", "pair_scales"):
            if k in data and not isinstance(data[k], list):
                data[k] = [data[k]]
        if "epsilons" in data:
            data["epsilons"] = [float(e) for e in data["epsilons"]]
        return cls(**data)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError([f"cannot read {path}: {exc}"]) from exc
        if not isinstance(data, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        return cls.from_dict(data)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

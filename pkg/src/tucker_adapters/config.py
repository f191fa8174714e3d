"""Experiment configuration: defaults, validation, file round-trip, hashing.

A config file is a flat JSON object; unknown keys are rejected so typos fail
fast. Every random choice in an experiment is derived from the explicit
seeds recorded here, which is what makes runs reproducible and resumable.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .adapters import ADAPTER_KINDS
from .tasks import WorldConfig

VALID_KINDS = tuple(sorted(ADAPTER_KINDS)) + ("lora_per_task",)


class ConfigError(ValueError):
    """Invalid experiment configuration; message names the offending field."""


@dataclass
class ExperimentConfig:
    # adapter selection (one code path, many adapters)
    adapter_kind: str = "tucker4"
    ranks: tuple[int, ...] = (4, 4, 8, 8)   # tucker cores; first 3 / all 5 as needed
    lora_rank: int = 8
    moe_rank: int = 8
    abc_rank_base: int = 8
    abc_rank_mid: int = 8

    # capacities and stream
    n_scenes: int = 5
    n_envs: int = 4
    n_instr: int = 0
    n_tasks: int = 20
    train_episodes: int = 96
    test_episodes: int = 100

    # consolidation and optimizer
    lam1: float = 0.2
    lam2: float = 0.2
    lam3: float = 0.1
    omega: float = 0.95
    lr: float = 3e-3           # desk-scale recalibration; full-scale value is 1e-4
    epochs: int = 30
    batch_size: int = 2
    fisher_fraction: float = 0.1

    # synthetic world / backbone
    d_f: int = 64
    hidden: int = 64
    horizon: int = 16
    feature_noise: float = 0.15
    scene_scale: float = 1.0
    env_scale: float = 1.0
    instr_scale: float = 0.3

    # metrics
    epsilon: float = 3.0
    spl_literal: bool = False

    # seeds (all explicit)
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        if self.adapter_kind not in VALID_KINDS:
            raise ConfigError(
                f"adapter_kind: {self.adapter_kind!r} is not one of {VALID_KINDS}")
        if self.lam1 + self.lam2 + self.lam3 >= 1.0:
            raise ConfigError("lam1+lam2+lam3: must sum to < 1")
        if min(self.lam1, self.lam2, self.lam3) < 0:
            raise ConfigError("lam1/lam2/lam3: must be >= 0")
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError("omega: must lie in [0, 1]")
        if self.n_scenes < 1 or self.n_envs < 1:
            raise ConfigError("n_scenes/n_envs: must be >= 1")
        if self.n_tasks > self.n_scenes * self.n_envs:
            raise ConfigError(
                f"n_tasks: {self.n_tasks} exceeds scenario capacity "
                f"{self.n_scenes} x {self.n_envs}")
        if self.adapter_kind == "tucker5" and self.n_instr < 1:
            raise ConfigError("n_instr: tucker5 needs at least one instruction type")
        if self.adapter_kind == "tucker4" and len(self.ranks) < 4:
            raise ConfigError("ranks: tucker4 needs four ranks")
        if self.adapter_kind == "tucker5" and len(self.ranks) < 5:
            raise ConfigError("ranks: tucker5 needs five ranks")
        if not 0.0 < self.fisher_fraction <= 1.0:
            raise ConfigError("fisher_fraction: must lie in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs/batch_size: must be >= 1")
        if self.train_episodes < 1 or self.test_episodes < 1:
            raise ConfigError("train_episodes/test_episodes: must be >= 1")
        if self.epsilon <= 0:
            raise ConfigError("epsilon: must be > 0")
        if self.d_f < max(self.n_scenes, self.n_envs):
            raise ConfigError("d_f: needs at least as many dims as expert keys")
        return self

    # -- derived views -------------------------------------------------------

    def world_config(self) -> WorldConfig:
        return WorldConfig(
            d_f=self.d_f, hidden=self.hidden, n_scenes=self.n_scenes,
            n_envs=self.n_envs, n_instr=self.n_instr, horizon=self.horizon,
            feature_noise=self.feature_noise, scene_scale=self.scene_scale,
            env_scale=self.env_scale, instr_scale=self.instr_scale,
            seed=self.seed)

    def config_hash(self) -> str:
        payload = json.dumps(dataclasses.asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    # -- file round-trip -----------------------------------------------------

    def to_file(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path}: invalid JSON ({exc})") from exc
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "ranks" in raw:
            raw = dict(raw, ranks=tuple(raw["ranks"]))
        return cls(**raw).validate()

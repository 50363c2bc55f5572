"""Run configuration: one JSON document drives data generation, training and evaluation."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .scene import GenConfig

SCHEMA_VERSION = 1

ABLATIONS = ("fixed_stride", "no_multiscale", "no_spatial", "no_triad", "no_refinement",
             "supervised")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Seeds:
    train_scenes: int = 100_000
    eval_scenes: int = 900_000
    refiner_scenes: int = 500_000
    embedding: int = 3
    projection: int = 1
    net: int = 0
    rng: int = 0


@dataclass(frozen=True)
class RunConfig:
    seeds: Seeds = field(default_factory=Seeds)
    gen: GenConfig = field(default_factory=GenConfig)
    # state
    M: int = 2
    word_dim: int = 32
    object_dim: int = 16
    visual_dim: int = 64
    grid_sizes: tuple[int, int, int] = (8, 4, 2)
    # MDP
    alpha: float = 0.2
    t_max: int = 20
    min_side_fraction: float = 0.02
    terminal_bonus: bool = False
    regress_penalty: bool = False
    # agent
    gamma: float = 0.9
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    optimizer: str = "adam"
    entropy_coef: float = 0.0
    hidden: tuple[int, ...] = (128, 64)
    activation: str = "tanh"
    critic_input: str = "mean"
    # budget
    episodes: int = 50_000
    train_pool: int = 10_000
    eval_size: int = 500
    log_every: int = 1000
    batch_episodes: int = 1
    value_bound: float = 1e4
    # refiner
    refiner_sigma: float = 5.0
    refiner_scenes: int = 2000
    refiner_steps: int = 6000
    refiner_lr: float = 1e-3
    # supervised baseline
    supervised_samples: int = 10
    supervised_threshold: float = 0.05
    # ablation switches
    fixed_stride: bool = False
    no_multiscale: bool = False
    no_spatial: bool = False
    no_triad: bool = False
    no_refinement: bool = False
    supervised: bool = False
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self) -> None:
        checks = [
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (0.0 < self.gamma <= 1.0, "gamma must lie in (0, 1]"),
            (self.M >= 1, "M must be >= 1"),
            (min(self.word_dim, self.object_dim, self.visual_dim) >= 1, "dimensions must be positive"),
            (len(self.grid_sizes) == 3 and min(self.grid_sizes) >= 1, "three positive grid sizes"),
            (self.t_max >= 1, "t_max must be positive"),
            (0.0 <= self.min_side_fraction < 1.0, "min_side_fraction must lie in [0, 1)"),
            (self.lr_actor >= 0 and self.lr_critic >= 0, "learning rates must be non-negative"),
            (self.episodes >= 0 and self.eval_size >= 1 and self.train_pool >= 1, "bad budget"),
            (self.batch_episodes >= 1, "batch_episodes must be >= 1"),
            (self.optimizer in ("adam", "sgd"), "optimizer must be adam or sgd"),
            (self.critic_input in ("mean", "concat"), "critic_input must be mean or concat"),
            (self.activation in ("tanh", "relu"), "activation must be tanh or relu"),
            (self.schema_version == SCHEMA_VERSION, f"unsupported schema {self.schema_version}"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    @property
    def state_dim(self) -> int:
        return self.M * 3 * self.word_dim + self.visual_dim + 5

    @property
    def scales(self) -> int:
        return 1 if self.no_multiscale else 3

    def variant(self, **switches: bool) -> "RunConfig":
        return dataclasses.replace(self, **switches)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n"

    @property
    def hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_json(cls, d: dict[str, Any]) -> "RunConfig":
        d = dict(d)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "seeds" in d:
            d["seeds"] = _build(Seeds, d["seeds"])
        if "gen" in d:
            d["gen"] = _build(GenConfig, d["gen"])
        for k in ("grid_sizes", "hidden"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


def _build(kind, d: dict):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return kind(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None


def curriculum() -> RunConfig:
    """2-4 objects, attribute and single-relation queries, with the training switches
    the shrinking agent needs to learn within the desk-scale budget."""
    gen = GenConfig(min_objects=2, max_objects=4, templates=("attribute", "relation"),
                    min_side=24.0, max_side=56.0)
    return RunConfig(gen=gen, terminal_bonus=True, regress_penalty=True, activation="relu",
                     entropy_coef=0.01, batch_episodes=4)

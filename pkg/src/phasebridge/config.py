"""Run configuration: one flat, JSON-round-trippable record of every knob.

Defaults follow the synthetic-data training recipe: diffusion scale
g = 0.2, snr 0.15, one Langevin step, trajectory cache 4096, minibatch
256, learning rate 2e-4, EMA decay 0.999. Each field can be overridden
from the command line by a flag of the same name.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid run configuration."""


@dataclass
class RunConfig:
    """Everything a training/sampling/eval run needs, in one record."""

    # dataset: a builtin generator name (gmm | petal | semicircle) or csv
    dataset: str = "gmm"
    csv_paths: list[str] = field(default_factory=list)
    marginal_times: list[float] | None = None
    n_per_marginal: int = 2000
    use_ground_truth_velocity: bool = False
    leave_out_index: int | None = None

    # dynamics
    steps_per_segment: int = 100
    g: float = 0.2

    # training loop
    n_bi: int = 100
    inner_iters: int = 200
    cache_size: int = 4096
    batch_size: int = 256
    lr: float = 2e-4
    weight_decay: float = 0.0
    ema_decay: float = 0.999

    # velocity Langevin refresh
    snr: float = 0.15
    langevin_steps: int = 1

    # architecture
    hidden_width: int = 128
    num_residual_blocks: int = 2
    time_embed_dim: int = 64

    # bookkeeping
    seed: int = 0
    output_dir: str = "runs/default"
    checkpoint_every: int = 10
    eval_every: int = 0
    n_eval_samples: int = 2000
    metric_projections: int = 128
    threads: int = 0

    def validate(self) -> None:
        positive = [
            "n_per_marginal",
            "steps_per_segment",
            "cache_size",
            "batch_size",
            "hidden_width",
            "num_residual_blocks",
            "time_embed_dim",
            "n_eval_samples",
            "metric_projections",
        ]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        non_negative = [
            "n_bi",
            "inner_iters",
            "langevin_steps",
            "checkpoint_every",
            "eval_every",
            "threads",
        ]
        for name in non_negative:
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.g <= 0:
            raise ConfigError(f"g must be > 0, got {self.g}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError(f"ema_decay must be in [0, 1), got {self.ema_decay}")
        if self.snr <= 0:
            raise ConfigError(f"snr must be > 0, got {self.snr}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.marginal_times is not None:
            times = self.marginal_times
            if len(times) < 2 or any(b <= a for a, b in zip(times, times[1:])):
                raise ConfigError(
                    f"marginal_times must be >= 2 strictly increasing values, "
                    f"got {times}"
                )

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config JSON must be an object")
        return cls.from_dict(doc)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json() + "\n", encoding="utf-8")

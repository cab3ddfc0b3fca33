"""Objective and training-run configuration."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml


@dataclass(frozen=True)
class SyncSchedule:
    """When the sync term is active: every step ("all") or from a fraction of the run onward ("mid")."""

    mode: str = "all"
    switch_fraction: float = 0.5

    def __post_init__(self):
        if self.mode not in ("all", "mid"):
            raise ValueError(f"sync schedule mode must be 'all' or 'mid', got {self.mode!r}")
        if self.mode == "mid" and not 0.0 < self.switch_fraction < 1.0:
            raise ValueError(f"switch_fraction must lie in (0, 1), got {self.switch_fraction}")

    def active(self, step: int, total_steps: int) -> bool:
        if self.mode == "all":
            return True
        return step >= self.switch_fraction * total_steps

    @classmethod
    def parse(cls, value) -> "SyncSchedule":
        if isinstance(value, SyncSchedule):
            return value
        if isinstance(value, dict):
            return cls(**value)
        text = str(value).strip().lower()
        if text.startswith("mid"):
            frac = text[3:].strip("():= ")
            return cls("mid", float(frac)) if frac else cls("mid")
        return cls(text)


def _check_weights(obj) -> None:
    for f in fields(obj):
        if f.name.startswith("lambda_") and getattr(obj, f.name) < 0:
            raise ValueError(f"{f.name} must be non-negative, got {getattr(obj, f.name)}")


@dataclass(frozen=True)
class TeacherObjectiveConfig:
    lambda_gan: float = 0.07
    lambda_recon: float = 0.9
    lambda_sync: float = 0.03
    sync_schedule: SyncSchedule = field(default_factory=lambda: SyncSchedule("mid"))

    def __post_init__(self):
        _check_weights(self)
        object.__setattr__(self, "sync_schedule", SyncSchedule.parse(self.sync_schedule))


@dataclass(frozen=True)
class StudentObjectiveConfig:
    lambda_cd: float = 10.0
    lambda_ssim: float = 10.0
    lambda_feature: float = 10.0
    lambda_style: float = 10000.0
    lambda_tv: float = 0.00001
    lambda_sync: float = 3.0
    sync_schedule: SyncSchedule = field(default_factory=lambda: SyncSchedule("mid"))

    def __post_init__(self):
        _check_weights(self)
        object.__setattr__(self, "sync_schedule", SyncSchedule.parse(self.sync_schedule))

    def without_kd(self) -> "StudentObjectiveConfig":
        return StudentObjectiveConfig(0.0, 0.0, 0.0, 0.0, 0.0, self.lambda_sync, self.sync_schedule)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    log_every: int = 50
    snapshot_every: int = 50
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be >= 1")
        object.__setattr__(self, "betas", tuple(self.betas))


def config_to_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_digest(*cfgs) -> str:
    blob = json.dumps([config_to_dict(c) if c is not None else None for c in cfgs], sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def load_run_config(path: str | Path) -> dict:
    """Read a YAML run file with optional ``teacher``, ``student`` and ``train`` sections."""
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    unknown = set(raw) - {"teacher", "student", "train"}
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    out = {}
    if "teacher" in raw:
        out["teacher"] = TeacherObjectiveConfig(**raw["teacher"])
    if "student" in raw:
        out["student"] = StudentObjectiveConfig(**raw["student"])
    if "train" in raw:
        out["train"] = TrainConfig(**raw["train"])
    return out

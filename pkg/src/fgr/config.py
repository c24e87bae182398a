"""Run configuration, loadable from a single JSON document."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .data import CORRUPTIONS, SEVERITIES
from .losses import LossConfig

MODES = ("two-stage", "scratch")


def _default_main() -> LossConfig:
    return LossConfig(kind="dual-focal", gamma=5.0)


def _default_calib() -> LossConfig:
    return LossConfig(kind="soft-ece", bins=15, temperature=0.01)


@dataclass(frozen=True)
class TrainConfig:
    model: str = "tinyconv"
    loss_main: LossConfig = field(default_factory=_default_main)
    loss_calib: LossConfig = field(default_factory=_default_calib)
    rho: float = 0.05
    lambda_set: tuple[int, ...] = (15, 18, 25)
    # stage 1 (and the whole run in scratch mode)
    epochs: int = 10
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_milestones: tuple[int, ...] | None = None  # None: 45% and 75% of epochs
    # stage 2
    finetune_epochs: int = 10
    finetune_lr: float = 0.002
    finetune_weight_decay: float = 0.0
    mode: str = "two-stage"
    filter_start_epoch: int | None = None  # scratch mode; None: 60% of epochs
    seed: int = 0
    eval_bins: int = 15
    # ablation switches
    filtering: bool = True
    rectification: bool = True
    # evaluation grid
    corruptions: tuple[str, ...] = CORRUPTIONS
    severities: tuple[int, ...] = SEVERITIES
    hidden: int = 64
    data_dir: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.rho < 1.0:
            raise ValueError("rho must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.mode == "scratch" and not self.start_epoch < self.epochs:
            raise ValueError("filter_start_epoch must be < epochs in scratch mode")
        if not self.lambda_set:
            raise ValueError("lambda_set is empty")
        unknown = set(self.corruptions) - set(CORRUPTIONS)
        if unknown:
            raise ValueError(f"unknown corruptions {sorted(unknown)}")

    @property
    def milestones(self) -> tuple[int, ...]:
        if self.lr_milestones is not None:
            return tuple(self.lr_milestones)
        return (int(round(0.45 * self.epochs)), int(round(0.75 * self.epochs)))

    @property
    def start_epoch(self) -> int:
        if self.filter_start_epoch is not None:
            return self.filter_start_epoch
        return int(0.6 * self.epochs)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        kw = dict(d)
        for key in ("loss_main", "loss_calib"):
            if key in kw and isinstance(kw[key], dict):
                kw[key] = LossConfig.from_dict(kw[key])
        for key in ("lambda_set", "lr_milestones", "corruptions", "severities"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def load_config(path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


def save_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))

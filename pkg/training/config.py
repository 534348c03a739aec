import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict

from core.constants import (
    LOOKAHEAD_ALPHA,
    LOOKAHEAD_K,
    OPTIMIZER_KINDS,
    PUBLISHED_EPOCHS,
    PUBLISHED_PATIENCE,
    TRAINING_SETTINGS,
)
from core.exceptions import ConfigError

# Desk-scale learning rate; the published 1e-5 is accepted through --lr.
DEFAULT_LR = 1e-3


@dataclass(frozen=True)
class TrainConfig:
    lr: float = DEFAULT_LR
    epochs: int = PUBLISHED_EPOCHS
    patience: int = PUBLISHED_PATIENCE
    batch_size: int = 1
    grad_accum: int = 1
    seed: int = 0
    lookahead_k: int = LOOKAHEAD_K
    lookahead_alpha: float = LOOKAHEAD_ALPHA
    optimizer: str = "radam_lookahead"
    setting: str = "joint_task"
    workers: int = 1
    keep_all_checkpoints: bool = False

    def __post_init__(self):
        problems = []
        if not math.isfinite(self.lr) or self.lr <= 0:
            problems.append("lr must be positive")
        if self.epochs < 1:
            problems.append("epochs must be at least 1")
        if self.patience < 1:
            problems.append("patience must be at least 1")
        if self.batch_size != 1:
            problems.append("batch_size is one bag; use grad_accum to average over several bags")
        if self.grad_accum < 1:
            problems.append("grad_accum must be at least 1")
        if self.lookahead_k < 1:
            problems.append("lookahead_k must be at least 1")
        if not 0.0 <= self.lookahead_alpha <= 1.0:
            problems.append("lookahead_alpha must lie in [0, 1]")
        if self.optimizer not in OPTIMIZER_KINDS:
            problems.append(f"optimizer must be one of {OPTIMIZER_KINDS}")
        if self.setting not in TRAINING_SETTINGS:
            problems.append(f"setting must be one of {TRAINING_SETTINGS}")
        if self.workers < 1:
            problems.append("workers must be at least 1")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "TrainConfig":
        unknown = sorted(set(values) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown training settings: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def evolve(self, **changes: Any) -> "TrainConfig":
        return replace(self, **changes)

import math
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict, Optional

from core.constants import (
    DEFAULT_D_F,
    DEFAULT_D_MODEL,
    DEFAULT_LAYER_NORM_EPS,
    DEFAULT_MAX_DECODE_LEN,
    DEFAULT_MAX_LANDMARKS,
    DEFAULT_PINV_ITERATIONS,
    PROJECTION_KINDS,
    PUBLISHED_BETA,
    PUBLISHED_GAMMA,
    PUBLISHED_HEADS,
    PUBLISHED_LAYERS,
    PUBLISHED_VOCAB_SIZE,
)
from core.exceptions import ConfigError


@dataclass(frozen=True)
class ModelConfig:
    """Every hyperparameter of a model; parameter shapes follow from it alone."""

    d_f: int = DEFAULT_D_F
    d_model: int = DEFAULT_D_MODEL
    encoder_layers: int = PUBLISHED_LAYERS
    decoder_layers: int = PUBLISHED_LAYERS
    heads: int = PUBLISHED_HEADS
    task_count: int = 5
    vocab_size: int = PUBLISHED_VOCAB_SIZE
    category_count: int = 11
    gamma: float = PUBLISHED_GAMMA
    beta: float = PUBLISHED_BETA
    num_landmarks: int = DEFAULT_MAX_LANDMARKS
    pinv_iterations: int = DEFAULT_PINV_ITERATIONS
    max_decode_len: int = DEFAULT_MAX_DECODE_LEN
    pwff_hidden: Optional[int] = None
    projection_kind: str = "ecn"
    use_exact_attention: bool = False
    use_decoder: bool = True
    ecn_literal_scaling: bool = False
    pwff_residual: bool = False
    router_bias: bool = True
    layer_norm_eps: float = DEFAULT_LAYER_NORM_EPS

    def __post_init__(self):
        if self.pwff_hidden is None:
            object.__setattr__(self, "pwff_hidden", 4 * self.d_model)

        problems = []
        for name in ("d_f", "d_model", "heads", "task_count", "category_count",
                     "num_landmarks", "pinv_iterations", "max_decode_len", "pwff_hidden"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        for name in ("encoder_layers", "decoder_layers"):
            if getattr(self, name) < 0:
                problems.append(f"{name} cannot be negative")
        if self.heads >= 1 and self.d_model % self.heads:
            problems.append(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.d_model % 2:
            problems.append(f"d_model {self.d_model} must be even for the positional encoding")
        if self.vocab_size < 3:
            problems.append("vocab_size must cover <BOS>, <EOS> and at least one word")
        for name in ("gamma", "beta"):
            value = getattr(self, name)
            if not math.isfinite(value) or value <= 0:
                problems.append(f"{name} must be finite and positive")
        if self.projection_kind not in PROJECTION_KINDS:
            problems.append(f"projection_kind must be one of {PROJECTION_KINDS}")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def for_task_spec(cls, task_spec, **overrides: Any) -> "ModelConfig":
        return cls(
            task_count=task_spec.task_count,
            vocab_size=task_spec.vocabulary.size,
            category_count=task_spec.category_count,
            **overrides,
        )

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown model settings: {', '.join(unknown)}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def evolve(self, **changes: Any) -> "ModelConfig":
        # a derived hidden width follows d_model
        if "d_model" in changes and "pwff_hidden" not in changes and self.pwff_hidden == 4 * self.d_model:
            changes["pwff_hidden"] = None
        return replace(self, **changes)

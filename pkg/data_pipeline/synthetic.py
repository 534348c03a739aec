"""Seeded multi-task feature bags standing in for extractor output.

Each category owns a prototype vector. A bag of N patches carries ⌈ρN⌉
signal patches (prototype plus Gaussian noise) among background noise
patches, in shuffled order.
"""
import logging
import math
from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from core.constants import FEATURE_EXTRACTOR_DIMS
from core.exceptions import ConfigError
from data_pipeline.bags import FeatureBag
from data_pipeline.taskspec import TaskSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticSpec:
    d_f: Optional[int] = None
    extractor: str = "desk"
    signal_fraction: float = 0.1
    noise: float = 1.0
    prototype_scale: float = 1.0
    bags_per_class: int = 20
    min_patches: int = 50
    max_patches: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.extractor not in FEATURE_EXTRACTOR_DIMS:
            raise ConfigError(f"unknown extractor preset {self.extractor!r}; "
                              f"choose from {sorted(FEATURE_EXTRACTOR_DIMS)}")
        if self.d_f is None:
            object.__setattr__(self, "d_f", FEATURE_EXTRACTOR_DIMS[self.extractor])
        problems = []
        if self.d_f < 1:
            problems.append("d_f must be positive")
        if not 0.0 < self.signal_fraction <= 1.0:
            problems.append("signal_fraction must lie in (0, 1]")
        if self.noise < 0 or not math.isfinite(self.noise):
            problems.append("noise must be finite and non-negative")
        if self.prototype_scale <= 0:
            problems.append("prototype_scale must be positive")
        if self.bags_per_class < 1:
            problems.append("bags_per_class must be at least 1")
        if not 1 <= self.min_patches <= self.max_patches:
            problems.append("patch range must satisfy 1 <= min_patches <= max_patches")
        if problems:
            raise ConfigError("; ".join(problems))

    def signal_patches(self, n: int) -> int:
        return max(1, math.ceil(self.signal_fraction * n))


def class_prototypes(spec: SyntheticSpec, task_spec: TaskSpec) -> np.ndarray:
    """One row per global category, drawn from the synthetic seed."""
    rng = np.random.default_rng([spec.seed, 0])
    prototypes = rng.normal(scale=spec.prototype_scale, size=(task_spec.category_count, spec.d_f))
    if len(np.unique(prototypes, axis=0)) != len(prototypes):
        raise ConfigError("class prototypes collided; choose another seed")
    return prototypes


def generate_synthetic(spec: SyntheticSpec, task_spec: TaskSpec) -> List[FeatureBag]:
    """Class-balanced bags for every category of every task; a pure function of its inputs."""
    prototypes = class_prototypes(spec, task_spec)
    rng = np.random.default_rng([spec.seed, 1])
    bags = []
    for t, task in enumerate(task_spec.tasks):
        for category in task.categories:
            prototype = prototypes[task_spec.global_category(t, category.term)]
            for i in range(spec.bags_per_class):
                n = int(rng.integers(spec.min_patches, spec.max_patches + 1))
                k = spec.signal_patches(n)
                signal = prototype + spec.noise * rng.normal(size=(k, spec.d_f))
                background = spec.noise * rng.normal(size=(n - k, spec.d_f))
                rows = np.concatenate([signal, background])[rng.permutation(n)]
                bags.append(FeatureBag(
                    slide_id=f"{task.name}-{category.name}-{i:04d}",
                    task_id=t,
                    features=rows.astype(np.float32),
                    label_term=category.term,
                ))
    logger.info("generated %d synthetic bags (d_f=%d, seed=%d)", len(bags), spec.d_f, spec.seed)
    return bags

import hashlib
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from core.constants import DEFAULT_SPLIT_FRACTIONS
from core.exceptions import ConfigError, SplitError
from data_pipeline.bags import FeatureBag

logger = logging.getLogger(__name__)

SPLIT_NAMES = ("train", "val", "test")
MIN_BAGS_PER_CATEGORY = 3


@dataclass
class Splits:
    train: List[FeatureBag] = field(default_factory=list)
    val: List[FeatureBag] = field(default_factory=list)
    test: List[FeatureBag] = field(default_factory=list)

    def __getitem__(self, name: str) -> List[FeatureBag]:
        if name not in SPLIT_NAMES:
            raise KeyError(name)
        return getattr(self, name)

    def assignment(self) -> Dict[str, str]:
        return {bag.slide_id: name for name in SPLIT_NAMES for bag in self[name]}

    def for_task(self, task_id: int) -> "Splits":
        return Splits(*([b for b in self[name] if b.task_id == task_id] for name in SPLIT_NAMES))

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for slide_id, name in sorted(self.assignment().items()):
            digest.update(f"{slide_id}:{name}\n".encode("utf-8"))
        return digest.hexdigest()[:16]


def _check_fractions(fractions: Sequence[float]) -> Tuple[float, float, float]:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    return tuple(float(f) for f in fractions)


def split_dataset(
    bags: Sequence[FeatureBag],
    fractions: Sequence[float] = DEFAULT_SPLIT_FRACTIONS,
    seed: int = 0,
) -> Splits:
    """Stratified by (task, category): each cell gets round(f·n) bags of every category."""
    _, val_fraction, test_fraction = _check_fractions(fractions)
    groups: Dict[Tuple[int, str], List[FeatureBag]] = defaultdict(list)
    for bag in bags:
        groups[(bag.task_id, bag.label_term)].append(bag)

    small = [f"task {t} / {term!r} ({len(g)} bags)" for (t, term), g in sorted(groups.items())
             if len(g) < MIN_BAGS_PER_CATEGORY]
    if small:
        raise SplitError(f"categories need at least {MIN_BAGS_PER_CATEGORY} bags to split: {', '.join(small)}")

    rng = np.random.default_rng(seed)
    splits = Splits()
    for key in sorted(groups):
        group = sorted(groups[key], key=lambda b: b.slide_id)
        order = rng.permutation(len(group))
        n_val = int(round(val_fraction * len(group)))
        n_test = int(round(test_fraction * len(group)))
        n_train = max(len(group) - n_val - n_test, 0)
        n_test = len(group) - n_train - n_val
        chosen = [group[i] for i in order]
        splits.train.extend(chosen[:n_train])
        splits.val.extend(chosen[n_train:n_train + n_val])
        splits.test.extend(chosen[n_train + n_val:])
    logger.debug("split %d bags into %d/%d/%d", len(bags), len(splits.train), len(splits.val), len(splits.test))
    return splits


def merge(per_task: Sequence[Splits]) -> Splits:
    """Joins per-task splits into one joint dataset; every bag keeps its task id."""
    merged = Splits()
    for splits in per_task:
        for name in SPLIT_NAMES:
            merged[name].extend(splits[name])
    return merged

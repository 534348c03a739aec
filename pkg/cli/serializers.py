"""Run configurations assembled from a JSON file and command-line flags.

Flags override file values, which override the dataclass defaults. The
validated configuration is what every run dir stores as ``config.json``.
"""
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple

from rest_framework import serializers

from core.constants import DEFAULT_SPLIT_FRACTIONS
from core.serializers import StrictSerializer
from data_pipeline.serializers import FractionsField, SyntheticSpecSerializer, TaskSpecField, resolve_task_spec
from data_pipeline.synthetic import SyntheticSpec
from data_pipeline.taskspec import TaskSpec
from evaluation.ablation import GRIDS, SILHOUETTE_GROUPINGS
from mecformer.config import ModelConfig
from mecformer.serializers import ModelOverridesSerializer
from training.config import TrainConfig
from training.serializers import TrainConfigSerializer

DEFAULT_ABLATION_SEEDS = 3


@dataclass(frozen=True)
class RunConfig:
    data_dir: str
    run_dir: Optional[str] = None
    model: Dict[str, Any] = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    fractions: Optional[Tuple[float, float, float]] = None
    grid: str = "projection"
    seeds: int = DEFAULT_ABLATION_SEEDS
    silhouette_by: str = "task"

    def model_config(self, task_spec: TaskSpec, d_f: int, **changes: Any) -> ModelConfig:
        return ModelConfig.for_task_spec(task_spec, **{**self.model, "d_f": d_f, **changes})

    def seed_list(self) -> List[int]:
        return list(range(self.train.seed, self.train.seed + self.seeds))

    def snapshot(self) -> Dict[str, Any]:
        return {
            "data_dir": self.data_dir,
            "run_dir": self.run_dir,
            "model": dict(self.model),
            "train": self.train.to_dict(),
            "fractions": list(self.fractions) if self.fractions else None,
            "grid": self.grid,
            "seeds": self.seeds,
            "silhouette_by": self.silhouette_by,
        }


class RunConfigSerializer(StrictSerializer):
    data_dir = serializers.CharField()
    run_dir = serializers.CharField(required=False, allow_null=True)
    model = ModelOverridesSerializer(required=False)
    train = TrainConfigSerializer(required=False)
    fractions = FractionsField(required=False, allow_null=True)
    grid = serializers.ChoiceField(choices=sorted(GRIDS), required=False)
    seeds = serializers.IntegerField(required=False, min_value=1)
    silhouette_by = serializers.ChoiceField(choices=SILHOUETTE_GROUPINGS, required=False)

    def create(self, validated_data):
        values = dict(validated_data)
        values["model"] = dict(values.get("model") or {})
        values["train"] = TrainConfig(**(values.get("train") or {}))
        return RunConfig(**values)


@dataclass(frozen=True)
class GenDataConfig:
    synthetic: SyntheticSpec
    task_spec: TaskSpec
    fractions: Tuple[float, float, float] = DEFAULT_SPLIT_FRACTIONS
    split_seed: Optional[int] = None

    @property
    def effective_split_seed(self) -> int:
        return self.synthetic.seed if self.split_seed is None else self.split_seed

    def snapshot(self) -> Dict[str, Any]:
        return {
            "synthetic": asdict(self.synthetic),
            "task_spec": self.task_spec.to_dict(),
            "fractions": list(self.fractions),
            "split_seed": self.effective_split_seed,
        }


class GenDataSerializer(StrictSerializer):
    synthetic = SyntheticSpecSerializer(required=False)
    task_spec = TaskSpecField(required=False)
    tasks = serializers.ListField(child=serializers.CharField(), required=False, allow_empty=False)
    fractions = FractionsField(required=False)
    split_seed = serializers.IntegerField(required=False, allow_null=True, min_value=0)

    def validate(self, attrs):
        attrs["task_spec"] = resolve_task_spec(attrs)
        attrs.pop("tasks", None)
        return attrs

    def create(self, validated_data):
        values = dict(validated_data)
        values["synthetic"] = SyntheticSpec(**(values.get("synthetic") or {}))
        return GenDataConfig(**values)

from pathlib import Path

from rest_framework import serializers

from core.constants import FEATURE_EXTRACTOR_DIMS
from core.exceptions import MecformerError
from core.serializers import ConfigSerializer
from data_pipeline.synthetic import SyntheticSpec
from data_pipeline.taskspec import TaskSpec, default_task_spec


class SyntheticSpecSerializer(ConfigSerializer):
    config_class = SyntheticSpec

    d_f = serializers.IntegerField(required=False, allow_null=True, min_value=1)
    extractor = serializers.ChoiceField(choices=sorted(FEATURE_EXTRACTOR_DIMS), required=False)
    signal_fraction = serializers.FloatField(required=False)
    noise = serializers.FloatField(required=False, min_value=0.0)
    prototype_scale = serializers.FloatField(required=False)
    bags_per_class = serializers.IntegerField(required=False, min_value=1)
    min_patches = serializers.IntegerField(required=False, min_value=1)
    max_patches = serializers.IntegerField(required=False, min_value=1)
    seed = serializers.IntegerField(required=False, min_value=0)


class TaskSpecField(serializers.JSONField):
    """A task spec given inline as an object or as the path of a JSON file."""

    def to_internal_value(self, data):
        data = super().to_internal_value(data)
        try:
            if isinstance(data, str):
                return TaskSpec.load(Path(data))
            if isinstance(data, dict):
                return TaskSpec.from_dict(data)
        except (MecformerError, OSError, ValueError) as exc:
            raise serializers.ValidationError(str(exc))
        raise serializers.ValidationError("Expected a task spec object or the path of one.")

    def to_representation(self, value):
        return value.to_dict()


class FractionsField(serializers.ListField):
    """Train/val/test fractions."""

    child = serializers.FloatField(min_value=0.0)

    def __init__(self, **kwargs):
        super().__init__(min_length=3, max_length=3, **kwargs)

    def to_internal_value(self, data):
        values = super().to_internal_value(data)
        if abs(sum(values) - 1.0) > 1e-9:
            raise serializers.ValidationError(f"Split fractions must sum to 1, got {sum(values):g}.")
        return tuple(values)


def select_tasks(task_spec: TaskSpec, names) -> TaskSpec:
    try:
        return TaskSpec([task_spec.tasks[task_spec.task_index(name)] for name in names])
    except MecformerError as exc:
        raise serializers.ValidationError({"tasks": [str(exc)]})


def resolve_task_spec(attrs) -> TaskSpec:
    task_spec = attrs.get("task_spec") or default_task_spec()
    if attrs.get("tasks"):
        task_spec = select_tasks(task_spec, attrs["tasks"])
    return task_spec

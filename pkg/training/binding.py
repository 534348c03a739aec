"""How bags are presented to a model under each training setting.

``joint_task`` builds one model over every task and hands it the bag's task
index. ``joint`` merges all categories into a single task and always passes
index 0, so the model is never told the task. ``individual`` builds one
single-task model per task.
"""
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence

from core.exceptions import ConfigError
from data_pipeline.bags import FeatureBag
from data_pipeline.taskspec import TaskSpec


@dataclass(frozen=True)
class TaskBinding:
    task_spec: TaskSpec
    setting: str = "joint_task"
    source_task: Optional[int] = None

    @property
    def fixed_task(self) -> Optional[int]:
        return None if self.setting == "joint_task" else 0

    @property
    def label(self) -> str:
        if self.setting == "individual":
            return self.task_spec.tasks[0].name
        return self.setting

    def accepts(self, bag: FeatureBag) -> bool:
        return self.source_task is None or bag.task_id == self.source_task

    def select(self, bags: Sequence[FeatureBag]) -> List[FeatureBag]:
        return [b for b in bags if self.accepts(b)]

    def task_of(self, bag: FeatureBag) -> int:
        fixed = self.fixed_task
        return bag.task_id if fixed is None else fixed

    def target(self, bag: FeatureBag) -> List[int]:
        return self.task_spec.target_ids(bag.label_term)

    def category(self, bag: FeatureBag) -> int:
        return self.task_spec.global_category(self.task_of(bag), bag.label_term)

    def to_dict(self) -> Dict[str, Any]:
        return {"task_spec": self.task_spec.to_dict(), "setting": self.setting, "source_task": self.source_task}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskBinding":
        return cls(TaskSpec.from_dict(data["task_spec"]), data["setting"], data.get("source_task"))


def bindings_for(setting: str, task_spec: TaskSpec) -> List[TaskBinding]:
    if setting == "joint_task":
        return [TaskBinding(task_spec, setting)]
    if setting == "joint":
        return [TaskBinding(task_spec.merged(), setting)]
    if setting == "individual":
        return [TaskBinding(task_spec.single(t), setting, source_task=t) for t in range(task_spec.task_count)]
    raise ConfigError(f"unknown training setting {setting!r}")

"""Per-task classification metrics with out-of-distribution penalisation.

A generated term that matches none of its task's categories is OOD. OOD
predictions count as wrong for accuracy, and every distinct OOD string adds
one to the denominator of the per-task F1, recall and precision averages.
"""
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from core.exceptions import ContractError

METRIC_NAMES = ("accuracy", "f1", "recall", "precision")


@dataclass(frozen=True)
class PredictionRecord:
    slide_id: str
    task: str
    true_term: str
    predicted_term: str
    resolved_term: Optional[str]
    truncated: bool = False

    @property
    def is_ood(self) -> bool:
        return self.resolved_term is None

    @property
    def correct(self) -> bool:
        return self.resolved_term == self.true_term


def resolve(predicted_term: str, categories: Sequence[str]) -> Optional[str]:
    """The matching category term, or None when the prediction is out of distribution."""
    return predicted_term if predicted_term in categories else None


def penalized_overall(scores: Sequence[float], n_categories: int, n_ood: int) -> float:
    """Σ m_i / (N_c + N_o)."""
    if n_categories < 1:
        raise ContractError("penalised average needs at least one ground-truth category")
    if n_ood < 0:
        raise ContractError(f"OOD count cannot be negative, got {n_ood}")
    if len(scores) != n_categories:
        raise ContractError(f"{len(scores)} scores for {n_categories} categories")
    return float(np.sum(scores) / (n_categories + n_ood))


@dataclass
class CategoryMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class TaskMetrics:
    task: str
    accuracy: float
    f1: float
    recall: float
    precision: float
    n_categories: int
    n_ood: int
    ood_terms: List[str]
    per_category: Dict[str, CategoryMetrics]
    count: int
    truncated: int = 0

    def value(self, name: str) -> float:
        return getattr(self, name)


def classification_metrics(records: Sequence[PredictionRecord], categories: Sequence[str]) -> TaskMetrics:
    if not records:
        raise ContractError("classification metrics need at least one record")
    tasks = {r.task for r in records}
    if len(tasks) != 1:
        raise ContractError(f"records span several tasks: {sorted(tasks)}")
    categories = list(categories)
    y_true = [r.true_term for r in records]
    y_pred = [r.resolved_term if r.resolved_term is not None else r.predicted_term for r in records]

    precision, recall, f1, support = precision_recall_fscore_support(
        y_true, y_pred, labels=categories, average=None, zero_division=0
    )
    ood_terms = sorted({r.predicted_term for r in records if r.is_ood})
    n_c, n_o = len(categories), len(ood_terms)
    return TaskMetrics(
        task=records[0].task,
        accuracy=100.0 * float(np.mean([r.correct for r in records])),
        f1=penalized_overall(f1, n_c, n_o),
        recall=penalized_overall(recall, n_c, n_o),
        precision=penalized_overall(precision, n_c, n_o),
        n_categories=n_c,
        n_ood=n_o,
        ood_terms=ood_terms,
        per_category={
            term: CategoryMetrics(float(p), float(r), float(f), int(s))
            for term, p, r, f, s in zip(categories, precision, recall, f1, support)
        },
        count=len(records),
        truncated=sum(r.truncated for r in records),
    )


@dataclass
class MetricReport:
    tasks: Dict[str, TaskMetrics] = field(default_factory=dict)

    def overall(self, name: str) -> float:
        """Mean of one metric over the tasks."""
        return float(np.mean([m.value(name) for m in self.tasks.values()]))

    def merge(self, other: "MetricReport") -> "MetricReport":
        overlap = set(self.tasks) & set(other.tasks)
        if overlap:
            raise ContractError(f"both reports cover tasks {sorted(overlap)}")
        return MetricReport({**self.tasks, **other.tasks})

    def to_dict(self) -> Dict:
        return {
            "tasks": {name: asdict(m) for name, m in self.tasks.items()},
            "overall": {name: self.overall(name) for name in METRIC_NAMES} if self.tasks else {},
        }


def report_from_records(records: Sequence[PredictionRecord], task_spec) -> MetricReport:
    """Groups records by task, in task-spec order."""
    report = MetricReport()
    for task in task_spec.tasks:
        task_records = [r for r in records if r.task == task.name]
        if task_records:
            report.tasks[task.name] = classification_metrics(task_records, task.terms)
    return report


@dataclass
class Summary:
    mean: float
    std: float
    values: List[float]


def summarize(values: Sequence[float]) -> Summary:
    """Mean and population standard deviation of repeated runs."""
    arr = np.asarray(values, dtype=np.float64)
    return Summary(float(arr.mean()), float(arr.std()), [float(v) for v in arr])


def aggregate(reports: Sequence[MetricReport]) -> Dict[str, Dict[str, Summary]]:
    """task (plus ``overall``) → metric → mean ± std across repeated splits."""
    if not reports:
        raise ContractError("nothing to aggregate")
    out: Dict[str, Dict[str, Summary]] = {}
    for task in reports[0].tasks:
        out[task] = {name: summarize([r.tasks[task].value(name) for r in reports]) for name in METRIC_NAMES}
    out["overall"] = {name: summarize([r.overall(name) for r in reports]) for name in METRIC_NAMES}
    return out

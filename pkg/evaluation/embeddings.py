"""Per-bag channel-mean embeddings for cluster analysis and external plotting."""
import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from core.exceptions import ContractError
from data_pipeline.bags import FeatureBag
from mecformer.network import Mecformer
from tensor_core import ops
from tensor_core.tensor import no_grad
from training.binding import TaskBinding

logger = logging.getLogger(__name__)

ID_COLUMNS = ("slide_id", "task", "label")


@dataclass
class EmbeddingTable:
    slide_ids: List[str]
    tasks: List[str]
    labels: List[str]
    matrix: np.ndarray

    def __post_init__(self):
        rows = len(self.slide_ids)
        if not (len(self.tasks) == len(self.labels) == rows == self.matrix.shape[0]):
            raise ContractError("embedding table columns have different lengths")

    def __len__(self) -> int:
        return len(self.slide_ids)

    def labels_by(self, grouping: str) -> List[str]:
        if grouping == "task":
            return list(self.tasks)
        if grouping == "category":
            return [f"{task}/{label}" for task, label in zip(self.tasks, self.labels)]
        raise ContractError(f"unknown silhouette grouping {grouping!r}")


def export_embeddings(model: Mecformer, bags: Sequence[FeatureBag], binding: TaskBinding, task_spec) -> EmbeddingTable:
    """Channel mean of the projected embeddings v⁰ for every accepted bag."""
    bags = binding.select(bags)
    rows = []
    with no_grad():
        for bag in bags:
            v = model.project(bag.tensor(), binding.task_of(bag))
            rows.append(ops.mean(v, axis=0).data)
    matrix = np.stack(rows) if rows else np.zeros((0, model.config.d_model))
    return EmbeddingTable(
        [b.slide_id for b in bags],
        [task_spec.tasks[b.task_id].name for b in bags],
        [b.label_term for b in bags],
        matrix,
    )


def raw_feature_means(bags: Sequence[FeatureBag], task_spec) -> EmbeddingTable:
    matrix = np.stack([b.features.astype(np.float64).mean(axis=0) for b in bags])
    return EmbeddingTable(
        [b.slide_id for b in bags],
        [task_spec.tasks[b.task_id].name for b in bags],
        [b.label_term for b in bags],
        matrix,
    )


def write_embeddings_csv(table: EmbeddingTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    width = table.matrix.shape[1]
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(ID_COLUMNS) + [f"v{j}" for j in range(width)])
        for i, slide_id in enumerate(table.slide_ids):
            values = ["%.9g" % v for v in table.matrix[i]]
            writer.writerow([slide_id, table.tasks[i], table.labels[i]] + values)
    logger.info("wrote %d embeddings to %s", len(table), path)
    return path


def read_embeddings_csv(path: Union[str, Path]) -> EmbeddingTable:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:3]) != ID_COLUMNS:
            raise ContractError(f"{path} is not an embedding table (header {header[:3]})")
        rows = list(reader)
    width = len(header) - len(ID_COLUMNS)
    matrix = np.array([[float(v) for v in row[3:]] for row in rows], dtype=np.float64).reshape(len(rows), width)
    return EmbeddingTable([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows], matrix)

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence

import numpy as np

from data_pipeline.bags import FeatureBag
from data_pipeline.taskspec import TaskSpec
from evaluation.metrics import MetricReport, PredictionRecord, report_from_records, resolve
from mecformer.network import Mecformer
from tensor_core.tensor import no_grad
from training.binding import TaskBinding

logger = logging.getLogger(__name__)


def predict_term(model: Mecformer, bag: FeatureBag, binding: TaskBinding):
    """(term, truncated) for one bag, by greedy decoding or the category head."""
    t = binding.task_of(bag)
    if model.config.use_decoder:
        generation = model.generate(bag.tensor(), t, vocabulary=binding.task_spec.vocabulary)
        return generation.term, generation.truncated
    with no_grad():
        logits = model.classify_headonly(bag.tensor(), t)
    _, term = binding.task_spec.category_from_global(int(np.argmax(logits.data)))
    return term, False


def predict(
    model: Mecformer,
    binding: TaskBinding,
    bags: Sequence[FeatureBag],
    task_spec: TaskSpec,
    workers: int = 1,
) -> List[PredictionRecord]:
    """Predicts every bag the binding accepts and resolves it against the bag's own task."""
    bags = binding.select(bags)

    def one(bag: FeatureBag) -> PredictionRecord:
        term, truncated = predict_term(model, bag, binding)
        task = task_spec.tasks[bag.task_id]
        resolved = resolve(term, task.terms)
        if resolved is None:
            logger.debug("%s: out-of-distribution prediction %r", bag.slide_id, term)
        return PredictionRecord(bag.slide_id, task.name, bag.label_term, term, resolved, truncated)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, bags))
    return [one(bag) for bag in bags]


def evaluate(
    model: Mecformer,
    binding: TaskBinding,
    bags: Sequence[FeatureBag],
    task_spec: TaskSpec,
    workers: int = 1,
) -> MetricReport:
    records = predict(model, binding, bags, task_spec, workers)
    report = report_from_records(records, task_spec)
    ood = sum(m.n_ood for m in report.tasks.values())
    if ood:
        logger.info("%s: %d distinct out-of-distribution terms", binding.label, ood)
    return report

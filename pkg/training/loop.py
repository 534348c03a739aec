"""Per-bag training with validation-loss early stopping."""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from core.exceptions import ContractError, NumericError
from data_pipeline.bags import FeatureBag
from mecformer.checkpoint import save_checkpoint
from mecformer.network import Mecformer
from tensor_core.tensor import backward, current_tape, no_grad
from training.binding import TaskBinding
from training.config import TrainConfig
from training.optim import Optimizer
from training.rundir import RunDir
from training.seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    is_best: bool


@dataclass
class TrainResult:
    history: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = math.inf
    stopped_early: bool = False
    best_checkpoint: Optional[Path] = None

    @property
    def train_losses(self) -> List[float]:
        return [r.train_loss for r in self.history]


def bag_loss(model: Mecformer, bag: FeatureBag, binding: TaskBinding):
    return model.loss(bag.tensor(), binding.task_of(bag), binding.target(bag), binding.category(bag))


def validation_loss(model: Mecformer, bags: Sequence[FeatureBag], binding: TaskBinding, workers: int = 1) -> float:
    """Mean loss over ``bags`` with frozen parameters; workers only read the model."""
    if not bags:
        raise ContractError("validation loss needs at least one bag")

    def one(bag: FeatureBag) -> float:
        with no_grad():
            return bag_loss(model, bag, binding).item()

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            losses = list(pool.map(one, bags))
    else:
        losses = [one(bag) for bag in bags]
    return float(np.mean(losses))


def train(
    model: Mecformer,
    binding: TaskBinding,
    train_bags: Sequence[FeatureBag],
    val_bags: Sequence[FeatureBag],
    cfg: TrainConfig,
    run_dir: Optional[RunDir] = None,
) -> TrainResult:
    """Trains in place and leaves the best-validation parameters loaded in ``model``."""
    train_bags = binding.select(train_bags)
    val_bags = binding.select(val_bags)
    if not train_bags:
        raise ContractError(f"no training bags for {binding.label}")
    if not val_bags:
        logger.warning("%s has no validation bags; early stopping follows the training loss", binding.label)

    rng = np.random.default_rng(derive_seed(cfg.seed, "shuffle"))
    optimizer = Optimizer(model.parameters(), cfg.lr, cfg.optimizer, cfg.lookahead_k, cfg.lookahead_alpha)
    if run_dir is not None:
        run_dir.prepare()

    result = TrainResult()
    best_state = model.state_dict()
    waited = 0
    for epoch in range(1, cfg.epochs + 1):
        train_loss = _run_epoch(model, binding, train_bags, optimizer, rng, cfg.grad_accum, epoch)
        val_loss = validation_loss(model, val_bags, binding, cfg.workers) if val_bags else train_loss
        is_best = val_loss < result.best_val_loss
        if is_best:
            result.best_val_loss, result.best_epoch = val_loss, epoch
            best_state = model.state_dict()
            waited = 0
            if run_dir is not None:
                path = save_checkpoint(run_dir.checkpoint_path(epoch), model, {"binding": binding.to_dict()})
                run_dir.mark_best(path, keep_previous=cfg.keep_all_checkpoints)
                result.best_checkpoint = path
        else:
            waited += 1

        record = EpochRecord(epoch, train_loss, val_loss, is_best)
        result.history.append(record)
        if run_dir is not None:
            run_dir.append_history(asdict(record))
        logger.info("%s epoch %d: train %.6f, val %.6f, best epoch %d",
                    binding.label, epoch, train_loss, val_loss, result.best_epoch)

        if waited >= cfg.patience:
            result.stopped_early = True
            logger.warning("%s stopped early at epoch %d; validation loss last improved at epoch %d",
                           binding.label, epoch, result.best_epoch)
            break

    model.load_state_dict(best_state)
    return result


def _run_epoch(model, binding, bags, optimizer, rng, grad_accum, epoch) -> float:
    order = rng.permutation(len(bags))
    total = 0.0
    pending = 0
    optimizer.zero_grad()
    for position, index in enumerate(order, start=1):
        bag = bags[index]
        try:
            loss = bag_loss(model, bag, binding)
            total += loss.item()
            backward(loss * (1.0 / grad_accum))
            pending += 1
            if pending == grad_accum or position == len(order):
                optimizer.step()
                optimizer.zero_grad()
                pending = 0
        except NumericError as exc:
            current_tape().clear()
            raise NumericError(f"epoch {epoch}, bag {bag.slide_id}: {exc}") from exc
    return total / len(bags)

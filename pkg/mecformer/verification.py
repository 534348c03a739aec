"""Whole-model finite-difference check on a configuration small enough to perturb every entry."""
from typing import Optional

import numpy as np

from core.constants import BOS_ID, EOS_ID
from mecformer.config import ModelConfig
from mecformer.network import Mecformer
from tensor_core.gradcheck import DEFAULT_TOLERANCE, GradCheckReport, check_gradients
from tensor_core.tensor import Tensor

TINY_BAG_SIZE = 4


def tiny_config(**overrides) -> ModelConfig:
    values = dict(
        d_f=6, d_model=8, heads=2, encoder_layers=1, decoder_layers=1,
        task_count=2, vocab_size=6, category_count=4, max_decode_len=4,
    )
    values.update(overrides)
    return ModelConfig(**values)


def model_gradcheck(
    cfg: Optional[ModelConfig] = None,
    seed: int = 0,
    tolerance: float = DEFAULT_TOLERANCE,
    max_entries: Optional[int] = None,
) -> GradCheckReport:
    """Checks the training loss gradient of every parameter group and of the input bag."""
    cfg = cfg or tiny_config()
    rng = np.random.default_rng(seed)
    model = Mecformer(cfg, seed=seed)
    x = Tensor(rng.normal(size=(TINY_BAG_SIZE, cfg.d_f)), requires_grad=True)
    t = cfg.task_count - 1
    target = [BOS_ID] + [int(i) for i in rng.integers(2, cfg.vocab_size, size=2)] + [EOS_ID]
    category = int(rng.integers(cfg.category_count))

    tensors = {"input": x, **model.parameters()}
    return check_gradients(
        lambda: model.loss(x, t, target, category),
        tensors,
        tolerance=tolerance,
        max_entries=max_entries,
        rng=rng,
    )

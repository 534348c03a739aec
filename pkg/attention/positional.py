import numpy as np

from core.exceptions import ConfigError
from tensor_core.tensor import Tensor


def sinusoidal_pe(length: int, d_model: int) -> Tensor:
    """Fixed sine/cosine position table of shape ``(length, d_model)``."""
    if d_model % 2:
        raise ConfigError(f"positional encoding needs an even d_model, got {d_model}")
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    table = np.empty((length, d_model))
    table[:, 0::2] = np.sin(positions / rates)
    table[:, 1::2] = np.cos(positions / rates)
    return Tensor(table)

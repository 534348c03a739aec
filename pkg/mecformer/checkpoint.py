"""Versioned binary checkpoint container.

Layout (little-endian): magic ``MECK``, u32 version, u32 length of a UTF-8
block of ``key=value`` lines with JSON values, u32 tensor count, then per
tensor the u32-prefixed UTF-8 name, u32 ndim, ndim u32 dims and the raw
float64 payload.
"""
import json
import logging
import struct
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

from core.constants import CHECKPOINT_FORMAT_VERSION, CHECKPOINT_MAGIC
from core.exceptions import BadMagicError, IncompatibilityError, TruncatedPayloadError
from mecformer.config import ModelConfig
from mecformer.network import Mecformer

logger = logging.getLogger(__name__)

_U32 = struct.Struct("<I")


def _config_text(cfg: ModelConfig, metadata: Mapping[str, Any]) -> bytes:
    lines = [f"{key}={json.dumps(value, sort_keys=True)}" for key, value in cfg.to_dict().items()]
    for key, value in metadata.items():
        lines.append(f"meta.{key}={json.dumps(value, sort_keys=True)}")
    return "\n".join(lines).encode("utf-8")


def _parse_config_text(text: str) -> Tuple[ModelConfig, Dict[str, Any]]:
    model_keys = {f.name for f in fields(ModelConfig)}
    values, metadata = {}, {}
    for line in text.splitlines():
        if not line:
            continue
        key, _, raw = line.partition("=")
        if key.startswith("meta."):
            metadata[key[len("meta."):]] = json.loads(raw)
        elif key in model_keys:
            values[key] = json.loads(raw)
        else:
            raise IncompatibilityError(f"checkpoint carries an unknown setting {key!r}")
    return ModelConfig.from_dict(values), metadata


def save_checkpoint(path: Union[str, Path], model: Mecformer, metadata: Mapping[str, Any] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = _config_text(model.config, metadata or {})
    state = model.state_dict()

    chunks = [CHECKPOINT_MAGIC, _U32.pack(CHECKPOINT_FORMAT_VERSION), _U32.pack(len(text)), text,
              _U32.pack(len(state))]
    for name, array in state.items():
        encoded = name.encode("utf-8")
        chunks.append(_U32.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_U32.pack(array.ndim))
        chunks.extend(_U32.pack(dim) for dim in array.shape)
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())

    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    logger.debug("wrote checkpoint %s (%d tensors)", path, len(state))
    return path


class _Reader:
    def __init__(self, payload: bytes, source: Path):
        self.payload, self.offset, self.source = payload, 0, source

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise TruncatedPayloadError(
                f"{self.source}: needed {size} bytes at offset {self.offset}, file has {len(self.payload)}"
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_checkpoint(path: Union[str, Path]) -> Tuple[ModelConfig, "Dict[str, np.ndarray]", Dict[str, Any]]:
    """Returns (config, state dict, metadata)."""
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    magic = reader.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: expected magic {CHECKPOINT_MAGIC!r}, found {magic!r}")
    version = reader.u32()
    if version != CHECKPOINT_FORMAT_VERSION:
        raise IncompatibilityError(f"{path}: checkpoint version {version} is not supported")
    cfg, metadata = _parse_config_text(reader.take(reader.u32()).decode("utf-8"))

    state = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        shape = tuple(reader.u32() for _ in range(reader.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(reader.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    return cfg, state, metadata


def load_model(path: Union[str, Path]) -> Tuple[Mecformer, Dict[str, Any]]:
    cfg, state, metadata = read_checkpoint(path)
    model = Mecformer(cfg)
    model.load_state_dict(state)
    return model, metadata

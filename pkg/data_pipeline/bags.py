"""Feature bags and their binary file format.

Layout (little-endian): magic ``MECB`` | u32 version | u32 N | u32 d_f |
u32 task id | u32 length + UTF-8 label term | u32 length + UTF-8 slide id |
N·d_f float32 row-major.
"""
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from core.constants import BAG_FORMAT_VERSION, BAG_MAGIC
from core.exceptions import (
    BadMagicError,
    BagFormatError,
    DimensionError,
    IngestionError,
    ShapeOverflowError,
    TruncatedPayloadError,
)
from data_pipeline.taskspec import TaskSpec
from tensor_core.tensor import Tensor

_U32 = struct.Struct("<I")
MAX_PAYLOAD_BYTES = 1 << 34


@dataclass(frozen=True, eq=False)
class FeatureBag:
    slide_id: str
    task_id: int
    features: np.ndarray
    label_term: str

    def __post_init__(self):
        features = np.asarray(self.features, dtype=np.float32)
        if features.ndim != 2 or features.shape[0] < 1 or features.shape[1] < 1:
            raise DimensionError(f"bag {self.slide_id}: features must be a non-empty (N, d_f) matrix, "
                                 f"got {features.shape}")
        features.setflags(write=False)
        object.__setattr__(self, "features", features)

    @property
    def n_patches(self) -> int:
        return self.features.shape[0]

    @property
    def d_f(self) -> int:
        return self.features.shape[1]

    def tensor(self) -> Tensor:
        return Tensor(self.features)

    def check_against(self, task_spec: TaskSpec) -> None:
        if not 0 <= self.task_id < task_spec.task_count:
            raise IngestionError(f"bag {self.slide_id}: task id {self.task_id} is not in the task spec")
        task_spec.category_index(self.task_id, self.label_term)

    def same_as(self, other: "FeatureBag") -> bool:
        return (
            self.slide_id == other.slide_id
            and self.task_id == other.task_id
            and self.label_term == other.label_term
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


def write_bag_file(bag: FeatureBag, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    label = bag.label_term.encode("utf-8")
    slide = bag.slide_id.encode("utf-8")
    header = b"".join([
        BAG_MAGIC,
        _U32.pack(BAG_FORMAT_VERSION),
        _U32.pack(bag.n_patches),
        _U32.pack(bag.d_f),
        _U32.pack(bag.task_id),
        _U32.pack(len(label)), label,
        _U32.pack(len(slide)), slide,
    ])
    path.write_bytes(header + np.ascontiguousarray(bag.features, dtype="<f4").tobytes())
    return path


def read_bag_file(path: Union[str, Path], expected_d_f: Optional[int] = None) -> FeatureBag:
    path = Path(path)
    payload = path.read_bytes()
    offset = 0

    def take(size: int) -> bytes:
        nonlocal offset
        if offset + size > len(payload):
            raise TruncatedPayloadError(
                f"{path}: needed {size} bytes at offset {offset}, file has {len(payload)}"
            )
        chunk = payload[offset:offset + size]
        offset += size
        return chunk

    def u32() -> int:
        return _U32.unpack(take(4))[0]

    def text(field: str) -> str:
        start = offset
        try:
            return take(u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise BagFormatError(f"{path}: {field} at offset {start} is not valid UTF-8 ({exc.reason})") from exc

    magic = take(len(BAG_MAGIC))
    if magic != BAG_MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}, expected {BAG_MAGIC!r}")
    version = u32()
    if version != BAG_FORMAT_VERSION:
        raise BagFormatError(f"{path}: unsupported bag format version {version}")
    n, d_f, task_id = u32(), u32(), u32()
    if n == 0 or d_f == 0 or 4 * n * d_f > MAX_PAYLOAD_BYTES:
        raise ShapeOverflowError(f"{path}: header shape {n}x{d_f} is empty or too large")
    if expected_d_f is not None and d_f != expected_d_f:
        raise IngestionError(f"{path}: bag has d_f={d_f} but the run expects d_f={expected_d_f}")
    label = text("label")
    slide_id = text("slide id")
    body = take(4 * n * d_f)
    if offset != len(payload):
        raise BagFormatError(f"{path}: {len(payload) - offset} unexpected bytes after the payload")
    features = np.frombuffer(body, dtype="<f4").reshape(n, d_f).astype(np.float32)
    return FeatureBag(slide_id=slide_id, task_id=task_id, features=features, label_term=label)

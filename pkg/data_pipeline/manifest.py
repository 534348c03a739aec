"""On-disk datasets: one bag file per slide, a JSON-lines manifest and the task spec."""
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

from core.exceptions import ConfigError, IngestionError
from data_pipeline.bags import FeatureBag, read_bag_file, write_bag_file
from data_pipeline.splits import SPLIT_NAMES, Splits
from data_pipeline.taskspec import TaskSpec

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"
TASK_SPEC_NAME = "task_spec.json"
BAG_DIR = "bags"


@dataclass(frozen=True)
class ManifestEntry:
    slide_id: str
    task: str
    path: str
    label_term: str
    split: str


def write_manifest(entries: List[ManifestEntry], path: Union[str, Path]) -> Path:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for entry in entries:
            fh.write(json.dumps(asdict(entry), sort_keys=True) + "\n")
    return path


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    entries = []
    with Path(path).open(encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(ManifestEntry(**json.loads(line)))
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{path}:{number}: malformed manifest line ({exc})") from exc
    return entries


def save_dataset(root: Union[str, Path], splits: Splits, task_spec: TaskSpec) -> Path:
    root = Path(root)
    (root / BAG_DIR).mkdir(parents=True, exist_ok=True)
    task_spec.save(root / TASK_SPEC_NAME)
    entries = []
    for name in SPLIT_NAMES:
        for bag in splits[name]:
            relative = Path(BAG_DIR) / f"{bag.slide_id}.bag"
            write_bag_file(bag, root / relative)
            entries.append(ManifestEntry(
                slide_id=bag.slide_id,
                task=task_spec.tasks[bag.task_id].name,
                path=relative.as_posix(),
                label_term=bag.label_term,
                split=name,
            ))
    write_manifest(entries, root / MANIFEST_NAME)
    logger.info("wrote %d bags to %s", len(entries), root)
    return root


def load_dataset(root: Union[str, Path], expected_d_f: Optional[int] = None) -> Tuple[TaskSpec, Splits]:
    """Reads a dataset directory; every bag is checked against the stored task spec."""
    root = Path(root)
    if not (root / MANIFEST_NAME).exists():
        raise IngestionError(f"{root} has no {MANIFEST_NAME}")
    task_spec = TaskSpec.load(root / TASK_SPEC_NAME)
    splits = Splits()
    d_f = expected_d_f
    for entry in read_manifest(root / MANIFEST_NAME):
        if entry.split not in SPLIT_NAMES:
            raise IngestionError(f"{entry.slide_id}: unknown split {entry.split!r}")
        bag = read_bag_file(root / entry.path, expected_d_f=d_f)
        d_f = bag.d_f
        if bag.task_id >= task_spec.task_count or task_spec.tasks[bag.task_id].name != entry.task:
            raise IngestionError(f"{entry.slide_id}: manifest task {entry.task!r} disagrees with the bag header")
        bag.check_against(task_spec)
        splits[entry.split].append(bag)
    return task_spec, splits

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from django.conf import settings

logger = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
HISTORY_NAME = "history.jsonl"
CHECKPOINT_DIR = "checkpoints"
BEST_MARKER = "BEST"
REPORT_JSON = "report.json"
REPORT_TEXT = "report.txt"


def config_fingerprint(config: Mapping[str, Any]) -> str:
    encoded = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()[:12]


def runs_root() -> Path:
    return Path(settings.MECFORMER_RUNS_ROOT)


class RunDir:
    """Directory holding one run: config snapshot, history, checkpoints and reports."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)

    @classmethod
    def for_config(cls, config: Mapping[str, Any], base: Optional[Path] = None) -> "RunDir":
        return cls((base or runs_root()) / f"run-{config_fingerprint(config)}")

    @property
    def config_path(self) -> Path:
        return self.root / CONFIG_NAME

    @property
    def history_path(self) -> Path:
        return self.root / HISTORY_NAME

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / CHECKPOINT_DIR

    def child(self, name: str) -> "RunDir":
        return RunDir(self.root / "tasks" / name)

    def prepare(self) -> "RunDir":
        self.checkpoint_dir.mkdir(parents=True, exist_ok=True)
        if self.history_path.exists():
            self.history_path.unlink()
        return self

    def write_config(self, config: Mapping[str, Any]) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(json.dumps(config, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        return self.config_path

    def read_config(self) -> Dict[str, Any]:
        return json.loads(self.config_path.read_text(encoding="utf-8"))

    def append_history(self, record: Mapping[str, Any]) -> None:
        with self.history_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def read_history(self) -> List[Dict[str, Any]]:
        if not self.history_path.exists():
            return []
        with self.history_path.open(encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]

    def checkpoint_path(self, epoch: int) -> Path:
        return self.checkpoint_dir / f"epoch_{epoch:04d}.ckpt"

    def mark_best(self, path: Path, keep_previous: bool = True) -> None:
        marker = self.checkpoint_dir / BEST_MARKER
        if not keep_previous and marker.exists():
            previous = self.checkpoint_dir / marker.read_text(encoding="utf-8").strip()
            if previous != path and previous.exists():
                previous.unlink()
        marker.write_text(path.name + "\n", encoding="utf-8")

    def best_checkpoint(self) -> Path:
        marker = self.checkpoint_dir / BEST_MARKER
        if not marker.exists():
            raise FileNotFoundError(f"{self.root} has no best checkpoint marker")
        return self.checkpoint_dir / marker.read_text(encoding="utf-8").strip()

    def write_report(self, data: Mapping[str, Any], text: str) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / REPORT_JSON).write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
        (self.root / REPORT_TEXT).write_text(text, encoding="utf-8")
        logger.info("wrote report to %s", self.root)

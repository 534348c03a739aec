"""Projection-layer and decoder ablations over shared splits and seeds.

Every cell trains the same way and differs only in the ablated component.
A cell that fails is logged and recorded; the other cells still run.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from core.constants import DEFAULT_SPLIT_FRACTIONS
from core.exceptions import ConfigError, ContractError
from data_pipeline.bags import FeatureBag
from data_pipeline.splits import Splits, split_dataset
from data_pipeline.taskspec import TaskSpec
from evaluation.embeddings import export_embeddings, raw_feature_means, write_embeddings_csv
from evaluation.metrics import MetricReport, Summary, aggregate, summarize
from evaluation.predict import evaluate
from evaluation.reports import format_table, render_metric_report, render_summary, summary_to_dict
from evaluation.silhouette import silhouette
from mecformer.config import ModelConfig
from mecformer.network import Mecformer
from training.binding import TaskBinding
from training.config import TrainConfig
from training.loop import train
from training.rundir import RunDir
from training.seeding import derive_seed

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Cell:
    projection_kind: str
    use_decoder: bool = True

    @property
    def name(self) -> str:
        return f"{self.projection_kind}-{'decoder' if self.use_decoder else 'head'}"


GRIDS: Dict[str, Tuple[Cell, ...]] = {
    "projection": (Cell("p1"), Cell("pt"), Cell("ecn")),
    "decoder": (Cell("ecn", True), Cell("ecn", False)),
    "full": tuple(Cell(kind, dec) for kind in ("p1", "pt", "ecn") for dec in (True, False)),
}
SILHOUETTE_GROUPINGS = ("task", "category")


def grid_cells(grid: str) -> Tuple[Cell, ...]:
    try:
        return GRIDS[grid]
    except KeyError:
        raise ConfigError(f"unknown ablation grid {grid!r}; choose from {sorted(GRIDS)}") from None


@dataclass
class CellRun:
    cell: Cell
    seed: int
    split_fingerprint: str
    report: Optional[MetricReport] = None
    silhouette: Optional[float] = None
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


@dataclass
class AblationReport:
    grid: str
    seeds: List[int]
    silhouette_by: str
    runs: List[CellRun] = field(default_factory=list)
    raw_silhouette: Dict[int, Optional[float]] = field(default_factory=dict)
    split_fingerprints: Dict[int, str] = field(default_factory=dict)

    def cells(self) -> List[Cell]:
        seen: List[Cell] = []
        for run in self.runs:
            if run.cell not in seen:
                seen.append(run.cell)
        return seen

    def runs_for(self, cell: Cell) -> List[CellRun]:
        return [r for r in self.runs if r.cell == cell]

    def summary(self, cell: Cell) -> Optional[Dict[str, Dict[str, Summary]]]:
        reports = [r.report for r in self.runs_for(cell) if r.ok]
        return aggregate(reports) if reports else None

    def silhouette_summary(self, cell: Cell) -> Optional[Summary]:
        values = [r.silhouette for r in self.runs_for(cell) if r.ok and r.silhouette is not None]
        return summarize(values) if values else None

    def raw_silhouette_summary(self) -> Optional[Summary]:
        values = [v for v in self.raw_silhouette.values() if v is not None]
        return summarize(values) if values else None

    def to_dict(self) -> Dict:
        cells = {}
        for cell in self.cells():
            summary = self.summary(cell)
            sil = self.silhouette_summary(cell)
            cells[cell.name] = {
                "projection_kind": cell.projection_kind,
                "use_decoder": cell.use_decoder,
                "metrics": summary_to_dict(summary) if summary else None,
                "silhouette": None if sil is None else {"mean": sil.mean, "std": sil.std, "values": sil.values},
                "errors": {str(r.seed): r.error for r in self.runs_for(cell) if not r.ok},
            }
        raw = self.raw_silhouette_summary()
        return {
            "grid": self.grid,
            "seeds": self.seeds,
            "silhouette_by": self.silhouette_by,
            "split_fingerprints": {str(k): v for k, v in self.split_fingerprints.items()},
            "raw_feature_silhouette": None if raw is None else {"mean": raw.mean, "std": raw.std},
            "cells": cells,
        }

    def render(self) -> str:
        rows = []
        raw = self.raw_silhouette_summary()
        if raw is not None:
            rows.append(["raw features", "", "", f"{raw.mean:.4f} ± {raw.std:.4f}", ""])
        for cell in self.cells():
            summary = self.summary(cell)
            sil = self.silhouette_summary(cell)
            failed = sum(not r.ok for r in self.runs_for(cell))
            overall = summary["overall"] if summary else None
            rows.append([
                cell.name,
                f"{overall['accuracy'].mean:.2f} ± {overall['accuracy'].std:.2f}" if overall else "failed",
                f"{overall['f1'].mean:.4f} ± {overall['f1'].std:.4f}" if overall else "",
                f"{sil.mean:.4f} ± {sil.std:.4f}" if sil else "",
                str(failed) if failed else "",
            ])
        text = f"Ablation '{self.grid}' over seeds {self.seeds} (silhouette by {self.silhouette_by})\n"
        text += format_table(("Cell", "Acc", "F1", "Silhouette", "Failed"), rows)
        for cell in self.cells():
            summary = self.summary(cell)
            if summary:
                text += f"\n[{cell.name}]\n" + render_summary(summary)
        return text


def _silhouette_or_none(table, grouping: str, what: str) -> Optional[float]:
    try:
        return silhouette(table.matrix, table.labels_by(grouping))
    except ContractError as exc:
        logger.warning("no silhouette for %s: %s", what, exc)
        return None


def run_cell(
    cell: Cell,
    seed: int,
    splits: Splits,
    task_spec: TaskSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    silhouette_by: str = "task",
    run_dir: Optional[RunDir] = None,
) -> CellRun:
    """Trains and evaluates one cell on one split; failures are captured, not raised."""
    run = CellRun(cell, seed, splits.fingerprint())
    label = f"{cell.name} seed {seed}"
    try:
        cfg = model_cfg.evolve(projection_kind=cell.projection_kind, use_decoder=cell.use_decoder)
        binding = TaskBinding(task_spec)
        model = Mecformer(cfg, seed=derive_seed(seed, "init"))
        train(model, binding, splits.train, splits.val, train_cfg.evolve(seed=seed, workers=1), run_dir)
        run.report = evaluate(model, binding, splits.test, task_spec)
        table = export_embeddings(model, splits.test, binding, task_spec)
        run.silhouette = _silhouette_or_none(table, silhouette_by, label)
        if run_dir is not None:
            write_embeddings_csv(table, run_dir.root / "embeddings.csv")
            run_dir.write_report(run.report.to_dict(), render_metric_report(run.report))
        logger.info("%s: overall F1 %.4f", label, run.report.overall("f1"))
    except Exception as exc:
        logger.exception("ablation cell %s failed", label)
        run.error = f"{type(exc).__name__}: {exc}"
    return run


def run_ablation(
    bags: Sequence[FeatureBag],
    task_spec: TaskSpec,
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    seeds: Sequence[int],
    grid: str = "projection",
    cells: Optional[Sequence[Cell]] = None,
    fractions: Optional[Sequence[float]] = None,
    silhouette_by: str = "task",
    run_dir: Optional[RunDir] = None,
    workers: int = 1,
) -> AblationReport:
    """Every cell sees the same split for a given seed; one split per seed."""
    if silhouette_by not in SILHOUETTE_GROUPINGS:
        raise ConfigError(f"silhouette grouping must be one of {SILHOUETTE_GROUPINGS}, got {silhouette_by!r}")
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    cells = tuple(cells) if cells is not None else grid_cells(grid)
    report = AblationReport(grid, list(seeds), silhouette_by)

    jobs = []
    for seed in seeds:
        splits = split_dataset(bags, fractions or DEFAULT_SPLIT_FRACTIONS, seed=seed)
        report.split_fingerprints[seed] = splits.fingerprint()
        raw = raw_feature_means(splits.test, task_spec)
        report.raw_silhouette[seed] = _silhouette_or_none(raw, silhouette_by, f"raw features seed {seed}")
        if run_dir is not None:
            write_embeddings_csv(raw, run_dir.root / f"raw_features_seed_{seed}.csv")
        for cell in cells:
            cell_dir = RunDir(run_dir.root / "cells" / cell.name / f"seed_{seed}") if run_dir is not None else None
            jobs.append((cell, seed, splits, cell_dir))

    def one(job) -> CellRun:
        cell, seed, splits, cell_dir = job
        return run_cell(cell, seed, splits, task_spec, model_cfg, train_cfg, silhouette_by, cell_dir)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            report.runs = list(pool.map(one, jobs))
    else:
        report.runs = [one(job) for job in jobs]

    mismatched = [r for r in report.runs if r.split_fingerprint != report.split_fingerprints[r.seed]]
    if mismatched:
        raise ContractError(f"cells {[r.cell.name for r in mismatched]} saw different splits")
    if run_dir is not None:
        run_dir.write_report(report.to_dict(), report.render())
    return report


def compare(report: AblationReport, metric: str = "f1") -> List[Tuple[str, float]]:
    """Cells ranked by mean overall ``metric``, best first."""
    ranked = []
    for cell in report.cells():
        summary = report.summary(cell)
        if summary:
            ranked.append((cell.name, summary["overall"][metric].mean))
    return sorted(ranked, key=lambda item: -item[1])

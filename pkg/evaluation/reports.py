import json
from typing import Any, Dict, List, Mapping, Sequence

from evaluation.metrics import METRIC_NAMES, MetricReport, Summary

HEADERS = ("Acc", "F1", "Recall", "Precision")


def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    """Left-aligned first column, right-aligned numbers."""
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = []
    for row in [header, *rows]:
        cells = [str(row[0]).ljust(widths[0])] + [str(c).rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(name: str, value: float) -> str:
    return f"{value:.2f}" if name == "accuracy" else f"{value:.4f}"


def render_metric_report(report: MetricReport) -> str:
    rows: List[List[str]] = []
    for task, m in report.tasks.items():
        rows.append([task] + [_cell(n, m.value(n)) for n in METRIC_NAMES] + [str(m.n_categories), str(m.n_ood)])
    if report.tasks:
        rows.append(["overall"] + [_cell(n, report.overall(n)) for n in METRIC_NAMES] + ["", ""])
    text = format_table(("Task",) + HEADERS + ("N_c", "N_o"), rows)
    ood = {task: m.ood_terms for task, m in report.tasks.items() if m.ood_terms}
    for task, terms in ood.items():
        text += f"OOD terms for {task}: " + ", ".join(repr(t) for t in terms) + "\n"
    return text


def render_summary(summary: Mapping[str, Mapping[str, Summary]]) -> str:
    rows = [
        [task] + [f"{_cell(n, s[n].mean)} ± {_cell(n, s[n].std)}" for n in METRIC_NAMES]
        for task, s in summary.items()
    ]
    return format_table(("Task",) + HEADERS, rows)


def summary_to_dict(summary: Mapping[str, Mapping[str, Summary]]) -> Dict[str, Any]:
    return {
        task: {n: {"mean": s.mean, "std": s.std, "values": s.values} for n, s in metrics.items()}
        for task, metrics in summary.items()
    }


def to_json(data: Mapping[str, Any]) -> str:
    return json.dumps(data, sort_keys=True, indent=2) + "\n"

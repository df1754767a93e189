"""Cross-run comparison tables and figures.

Rows come from saved metric reports. Missing benchmark cells are written as
``NA`` and never enter an average as zero.
"""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from . import metrics as M
from .benchgen.suite import BENCHMARKS, CATEGORIES, FLIP_BENCHMARKS
from .errors import ContractError
from .evaluate import BENCHMARK_ORDER, ROBUST_BENCHMARKS, MetricReport

ABSENT = "NA"
MODE_ORDER = ("clean", "gaussian", "pgd", "mango")
REPORT_NAME = "report.json"
LOG_NAME = "train_log.jsonl"


@dataclass
class ReportRow:
    label: str
    scores: dict[str, float]
    mode: str | None = None
    seed: int | None = None
    history: list[dict] = field(default_factory=list)

    def meta_average(self, names=BENCHMARK_ORDER) -> float | None:
        present = [b for b in names if b in self.scores]
        if not present:
            return None
        return M.meta_average([self.scores[b] for b in present], [b in FLIP_BENCHMARKS for b in present])

    def category_scores(self) -> dict[str, float | None]:
        return {c: self.meta_average([b for b in ROBUST_BENCHMARKS if BENCHMARKS[b] == c]) for c in CATEGORIES}

    def polygon(self) -> dict[str, float]:
        return MetricReport({}, self.scores).polygon()


def row_from_values(label: str, values, mode: str | None = None) -> ReportRow:
    """A row from benchmark scores listed in table column order."""
    values = list(values)
    if len(values) != len(BENCHMARK_ORDER):
        raise ContractError(f"expected {len(BENCHMARK_ORDER)} values, got {len(values)}")
    return ReportRow(label, dict(zip(BENCHMARK_ORDER, map(float, values))), mode)


def _read_history(run_dir: Path) -> list[dict]:
    path = run_dir / LOG_NAME
    if not path.exists():
        return []
    out = []
    for line in path.read_text().splitlines():
        rec = json.loads(line)
        if "step" in rec:
            out.append(rec)
    return out


def load_row(path) -> ReportRow:
    """Row from a report file or from a run directory holding ``report.json``."""
    path = Path(path)
    run_dir = path if path.is_dir() else path.parent
    report_path = path / REPORT_NAME if path.is_dir() else path
    if not report_path.exists():
        raise ContractError(f"no metric report at {report_path}")
    data = json.loads(report_path.read_text())
    mode = data.get("mode")
    if mode is None:
        cfg = run_dir / "config.json"
        if cfg.exists():
            mode = json.loads(cfg.read_text()).get("train", {}).get("mode")
    label = data.get("label") or run_dir.name
    return ReportRow(label, data["scores"], mode, data.get("seed"), _read_history(run_dir))


def aggregate_by_mode(rows: list[ReportRow]) -> list[ReportRow]:
    """One row per mode holding the per-benchmark median over its runs."""
    groups: dict[str, list[ReportRow]] = {}
    for r in rows:
        groups.setdefault(r.mode or r.label, []).append(r)
    order = [m for m in MODE_ORDER if m in groups] + sorted(set(groups) - set(MODE_ORDER))
    out = []
    for mode in order:
        members = groups[mode]
        scores = {}
        for b in BENCHMARK_ORDER:
            vals = [r.scores[b] for r in members if b in r.scores]
            if vals:
                scores[b] = statistics.median(vals)
        out.append(ReportRow(f"{mode} (median of {len(members)})", scores, mode))
    return out


# ---------------------------------------------------------------- tables


def table_header() -> list[str]:
    return ["label", *BENCHMARK_ORDER, "meta_ave", "meta_ave_robust", *[f"cat_{c}" for c in CATEGORIES]]


def _fmt(v) -> str:
    if v is None:
        return ABSENT
    return f"{v:.2f}"


def table_rows(rows: list[ReportRow]) -> list[list[str]]:
    out = []
    for r in rows:
        cats = r.category_scores()
        out.append(
            [
                r.label,
                *[_fmt(r.scores.get(b)) for b in BENCHMARK_ORDER],
                _fmt(r.meta_average()),
                _fmt(r.meta_average(ROBUST_BENCHMARKS)),
                *[_fmt(cats[c]) for c in CATEGORIES],
            ]
        )
    return out


def to_csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def to_text(header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    lines = ["  ".join(str(x).rjust(n) if i else str(x).ljust(n) for i, (x, n) in enumerate(zip(line, widths)))
             for line in [header, *rows]]
    lines.insert(1, "  ".join("-" * n for n in widths))
    return "\n".join(lines) + "\n"


def polygon_header() -> list[str]:
    return ["label", *[b for b in M.POLYGON_BENCHMARKS if b not in ("lol_comp", "lol_supp")]]


def polygon_rows(rows: list[ReportRow]) -> list[list[str]]:
    names = polygon_header()[1:]
    out = []
    for r in rows:
        poly = r.polygon()
        out.append([r.label, *[_fmt(poly.get(b)) for b in names]])
    return out


# ---------------------------------------------------------------- figures


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def plot_meta_average(rows: list[ReportRow], path) -> Path:
    plt = _pyplot()
    labels = [r.label for r in rows]
    vals = [r.meta_average(ROBUST_BENCHMARKS) or 0.0 for r in rows]
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(rows)), 3.2))
    ax.bar(range(len(rows)), vals, color="tab:blue")
    ax.set_xticks(range(len(rows)), labels, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("Meta-Ave (robustness benchmarks)")
    ax.axhline(0, color="black", linewidth=0.6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_categories(rows: list[ReportRow], path) -> Path:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.4))
    width = 0.8 / max(1, len(rows))
    for i, r in enumerate(rows):
        cats = r.category_scores()
        xs = [j + i * width for j in range(len(CATEGORIES))]
        ax.bar(xs, [cats[c] or 0.0 for c in CATEGORIES], width, label=r.label)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(CATEGORIES))], CATEGORIES)
    ax.set_ylabel("category score")
    ax.axhline(0, color="black", linewidth=0.6)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def plot_loss_curves(rows: list[ReportRow], path) -> Path | None:
    with_history = [r for r in rows if r.history]
    if not with_history:
        return None
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.2))
    for r in with_history:
        steps = [h["step"] for h in r.history]
        axes[0].plot(steps, [h["loss_clean"] for h in r.history], label=r.label, linewidth=1)
        adv = [(h["step"], h["loss_adv"]) for h in r.history if h.get("loss_adv") is not None]
        if adv:
            axes[1].plot(*zip(*adv), label=r.label, linewidth=1)
    axes[0].set_title("clean loss")
    axes[1].set_title("perturbed loss")
    for ax in axes:
        ax.set_xlabel("step")
    axes[0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------- driver


def write_report(rows: list[ReportRow], out_dir, aggregate: bool = True, figures: bool = True) -> dict[str, Path]:
    """Write per-run and per-mode tables as CSV and text, plus PNG figures."""
    if not rows:
        raise ContractError("no reports to compare")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: dict[str, Path] = {}
    header = table_header()
    tables = {"runs": rows}
    if aggregate and any(r.mode for r in rows):
        tables["modes"] = aggregate_by_mode(rows)
    for name, table in tables.items():
        body = table_rows(table)
        written[f"{name}.csv"] = out_dir / f"{name}.csv"
        written[f"{name}.csv"].write_text(to_csv(header, body))
        written[f"{name}.txt"] = out_dir / f"{name}.txt"
        written[f"{name}.txt"].write_text(to_text(header, body))
    poly_rows = tables.get("modes", rows)
    written["polygon.csv"] = out_dir / "polygon.csv"
    written["polygon.csv"].write_text(to_csv(polygon_header(), polygon_rows(poly_rows)))
    if figures:
        summary = tables.get("modes", rows)
        written["meta_ave.png"] = plot_meta_average(summary, out_dir / "meta_ave.png")
        written["categories.png"] = plot_categories(summary, out_dir / "categories.png")
        curves = plot_loss_curves(rows, out_dir / "loss_curves.png")
        if curves:
            written["loss_curves.png"] = curves
    return written

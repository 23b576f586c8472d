"""Report rendering: delimited tables, markdown tables, and plot-data files.

Percentages and F1 scores are displayed to two decimals; anything a report
cell shows is traceable to a results-file row, a statistical-best summary,
or the shipped reference data.  The ``refdata`` directory carries
previously reported benchmark numbers (baseline methods and the
loss-by-dataset accuracy grid) that enter reports purely as comparison
data.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .encoder import EmbeddingSet
from .engine import (
    ExperimentResult,
    compute_mar,
    f1_macro,
    f1_weighted,
    rank_cells,
    results_accuracy_grid,
    statistical_best,
    statistical_best_counts,
)
from .errors import DataError
from .losses import LossConfig

_PRIMARY_LABEL = "lc(0.001)"


@dataclass(frozen=True)
class BaselineRow:
    method: str
    dataset: str
    acc_pct: float
    f1: float


@dataclass(frozen=True)
class StatisticalBestRow:
    """Majority-predictor metrics under all three F1 conventions."""

    dataset: str
    majority: int
    acc_sb: float
    f1_plain: float
    f1_macro: float
    f1_weighted: float


def _refdata_text(name: str) -> str:
    return resources.files("xdtbench").joinpath("refdata", name).read_text(encoding="utf-8")


def _parse_table(text: str, expected_header: tuple[str, ...], origin: str) -> list[list[str]]:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or tuple(lines[0].split("\t")) != expected_header:
        raise DataError(f"{origin}: missing or wrong header (expected {expected_header})")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(expected_header):
            raise DataError(f"{origin}:{lineno}: expected {len(expected_header)} columns")
        rows.append(fields)
    return rows


def load_baselines(path: str | Path | None = None) -> list[BaselineRow]:
    """Baseline method rows; defaults to the shipped reference data."""
    if path is None:
        text, origin = _refdata_text("reported_baselines.tsv"), "reported_baselines.tsv"
    else:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"baselines file not found: {p}")
        text, origin = p.read_text(encoding="utf-8"), str(p)
    rows = _parse_table(text, ("method", "dataset", "acc_pct", "f1"), origin)
    return [BaselineRow(m, d, float(a), float(f)) for m, d, a, f in rows]


def load_reference_grid(
    path: str | Path | None = None,
) -> dict[str, dict[tuple[str, str], float]]:
    """Reported accuracy grid as (loss label -> (train, eval) -> accuracy %)."""
    if path is None:
        text, origin = _refdata_text("reported_results.tsv"), "reported_results.tsv"
    else:
        p = Path(path)
        if not p.is_file():
            raise DataError(f"reference results file not found: {p}")
        text, origin = p.read_text(encoding="utf-8"), str(p)
    rows = _parse_table(text, ("loss", "lambda", "train_ds", "eval_ds", "acc_pct", "f1"), origin)
    grid: dict[str, dict[tuple[str, str], float]] = {}
    for loss, lam, train_ds, eval_ds, acc_pct, _ in rows:
        label = LossConfig(kind=loss, ce_weight=float(lam)).label()
        grid.setdefault(label, {})[(train_ds, eval_ds)] = float(acc_pct)
    return grid


_SB_COLUMNS = ("dataset", "majority", "acc_sb", "f1_plain", "f1_macro", "f1_weighted")


def write_statistical_best(rows: Sequence[StatisticalBestRow], path: str | Path) -> None:
    """Full-precision statistical-best summary, one row per dataset."""
    lines = ["\t".join(_SB_COLUMNS)]
    for r in rows:
        lines.append(
            "\t".join(
                [
                    r.dataset,
                    "pos" if r.majority == 1 else "neg",
                    repr(r.acc_sb),
                    repr(r.f1_plain),
                    repr(r.f1_macro),
                    repr(r.f1_weighted),
                ]
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_statistical_best(path: str | Path) -> list[StatisticalBestRow]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"statistical-best file not found: {p}")
    rows = _parse_table(p.read_text(encoding="utf-8"), _SB_COLUMNS, str(p))
    out = []
    for dataset, majority, acc_sb, f1_plain, f1_m, f1_w in rows:
        if majority not in ("pos", "neg"):
            raise DataError(f"{p}: majority must be pos|neg, got {majority!r}")
        out.append(
            StatisticalBestRow(
                dataset=dataset,
                majority=1 if majority == "pos" else 0,
                acc_sb=float(acc_sb),
                f1_plain=float(f1_plain),
                f1_macro=float(f1_m),
                f1_weighted=float(f1_w),
            )
        )
    return out


def statistical_best_rows(eval_sets: Sequence[EmbeddingSet]) -> list[StatisticalBestRow]:
    """Majority-predictor summary for each evaluation set."""
    rows = []
    for s in eval_sets:
        acc_sb, f1_plain, majority = statistical_best(s.labels)
        counts = statistical_best_counts(s.labels)
        rows.append(
            StatisticalBestRow(
                dataset=s.dataset_name,
                majority=majority,
                acc_sb=acc_sb,
                f1_plain=f1_plain,
                f1_macro=f1_macro(counts),
                f1_weighted=f1_weighted(counts),
            )
        )
    return rows


# --------------------------------------------------------------------------
# Table rendering
# --------------------------------------------------------------------------


def _pct(fraction: float) -> str:
    return f"{100.0 * fraction:.2f}"


def _two(x: float) -> str:
    return f"{x:.2f}"


def _write_tsv(path: Path, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    lines = ["\t".join(header)]
    lines.extend("\t".join(row) for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _write_markdown(path: Path, title: str, header: Sequence[str], rows: Sequence[Sequence[str]]) -> None:
    lines = [f"# {title}", "", "| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines.extend("| " + " | ".join(row) + " |" for row in rows)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _dataset_order(results: Sequence[ExperimentResult]) -> list[str]:
    seen: list[str] = []
    for r in results:
        if r.eval_dataset not in seen:
            seen.append(r.eval_dataset)
    return seen


def _loss_order(results: Sequence[ExperimentResult]) -> list[str]:
    seen: list[str] = []
    for r in results:
        label = LossConfig(kind=r.loss_kind, ce_weight=r.ce_weight).label()
        if label not in seen:
            seen.append(label)
    return seen


def _primary_label(loss_labels: Sequence[str]) -> str:
    return _PRIMARY_LABEL if _PRIMARY_LABEL in loss_labels else loss_labels[0]


def _cell_index(results: Sequence[ExperimentResult]) -> dict[tuple[str, str, str], ExperimentResult]:
    index = {}
    for r in results:
        label = LossConfig(kind=r.loss_kind, ce_weight=r.ce_weight).label()
        index[(label, r.train_dataset, r.eval_dataset)] = r
    return index


def write_report_bundle(
    results: Sequence[ExperimentResult],
    out_dir: str | Path,
    baselines: Sequence[BaselineRow] | None = None,
    sb_rows: Sequence[StatisticalBestRow] | None = None,
    reference_grid: Mapping[str, Mapping[tuple[str, str], float]] | None = None,
) -> list[Path]:
    """Render every report table and plot-data file into ``out_dir``."""
    if not results:
        raise DataError("no results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    datasets = _dataset_order(results)
    loss_labels = _loss_order(results)
    primary = _primary_label(loss_labels)
    index = _cell_index(results)

    def emit(stem: str, title: str, header: list[str], rows: list[list[str]]) -> None:
        tsv = out / f"{stem}.tsv"
        md = out / f"{stem}.md"
        _write_tsv(tsv, header, rows)
        _write_markdown(md, title, header, rows)
        written.extend([tsv, md])

    # Supervised table: the primary loss on each dataset's own test split.
    header = ["loss"] + [f"{d}:{m}" for d in datasets for m in ("acc", "f1")]
    row = [primary]
    for d in datasets:
        r = index.get((primary, d, d))
        row.extend([_pct(r.metrics.acc), _two(r.metrics.f1)] if r else ["x", "x"])
    emit("supervised_table", "Supervised evaluation on each dataset's own test split", header, [row])

    # Zero-shot matrix including ingested baseline rows.
    header = ["method"] + [f"{d}:{m}" for d in datasets for m in ("acc", "f1")]
    rows = []
    if baselines:
        method_order: list[str] = []
        for b in baselines:
            if b.method not in method_order:
                method_order.append(b.method)
        by_method = {(b.method, b.dataset): b for b in baselines}
        for method in method_order:
            row = [method]
            for d in datasets:
                b = by_method.get((method, d))
                row.extend([_two(b.acc_pct), _two(b.f1)] if b else ["x", "x"])
            rows.append(row)
    for train_ds in datasets:
        row = [f"ours[{primary}] trained on {train_ds}"]
        for eval_ds in datasets:
            r = index.get((primary, train_ds, eval_ds))
            if r is None or r.mode == "supervised":
                row.extend(["x", "x"])
            else:
                row.extend([_pct(r.metrics.acc), _two(r.metrics.f1)])
        rows.append(row)
    emit("zero_shot_table", "Zero-shot evaluation on other datasets' test splits", header, rows)

    # Loss comparison, supervised diagonal.
    header = ["loss"] + [f"{d}:{m}" for d in datasets for m in ("acc", "f1")]
    rows = []
    for label in loss_labels:
        row = [label]
        for d in datasets:
            r = index.get((label, d, d))
            row.extend([_pct(r.metrics.acc), _two(r.metrics.f1)] if r else ["x", "x"])
        rows.append(row)
    emit("loss_comparison_supervised", "Loss comparison on own test splits", header, rows)

    # Loss comparison, zero-shot cells.
    header = ["loss", "train_ds"] + [f"{d}:{m}" for d in datasets for m in ("acc", "f1")]
    rows = []
    for label in loss_labels:
        for train_ds in datasets:
            row = [label, train_ds]
            for eval_ds in datasets:
                r = index.get((label, train_ds, eval_ds))
                if r is None or r.mode == "supervised":
                    row.extend(["x", "x"])
                else:
                    row.extend([_pct(r.metrics.acc), _two(r.metrics.f1)])
            rows.append(row)
    emit("loss_comparison_zeroshot", "Loss comparison on cross-dataset test splits", header, rows)

    # Rank and mean-average-rank tables over this run's grid.
    grid = results_accuracy_grid(results)
    try:
        ranks = rank_cells(grid)
        mars = compute_mar(grid)
    except DataError:
        ranks = mars = None
    if ranks is not None and mars is not None:
        cells = sorted(next(iter(ranks.values()))) if ranks else []
        header = ["loss"] + [f"{t}->{e}" for t, e in cells]
        rows = [[label] + [f"{ranks[label][c]:g}" for c in cells] for label in ranks]
        emit("rank_table", "Per-cell accuracy ranks (1 = best, self-cells 0)", header, rows)
        rows = [[label, _two(mars[label])] for label in mars]
        emit("mar_table", "Mean average rank over cross-dataset cells", ["loss", "mar"], rows)

    # Reference rank analysis from the shipped reported grid.
    ref_grid = reference_grid if reference_grid is not None else load_reference_grid()
    ref_ranks = rank_cells(ref_grid)
    ref_mars = compute_mar(ref_grid)
    cells = sorted(next(iter(ref_ranks.values())))
    header = ["loss"] + [f"{t}->{e}" for t, e in cells]
    rows = [[label] + [f"{ref_ranks[label][c]:g}" for c in cells] for label in ref_ranks]
    emit("rank_table_reference", "Reported grid: per-cell accuracy ranks", header, rows)
    rows = [[label, _two(ref_mars[label])] for label in ref_mars]
    emit("mar_table_reference", "Reported grid: mean average rank", ["loss", "mar"], rows)

    # Statistical-best conventions table.
    if sb_rows:
        header = ["dataset", "majority", "acc_sb", "f1_plain", "f1_macro", "f1_weighted"]
        rows = [
            [
                s.dataset,
                "pos" if s.majority == 1 else "neg",
                _pct(s.acc_sb),
                _two(s.f1_plain),
                _two(s.f1_macro),
                _two(s.f1_weighted),
            ]
            for s in sb_rows
        ]
        emit("statistical_best_table", "Majority predictor under three F1 conventions", header, rows)

    # Radar plot data: one accuracy per (series, dataset).
    header = ["series", "dataset", "acc_pct"]
    rows = []
    if baselines:
        for b in baselines:
            rows.append([b.method, b.dataset, _two(b.acc_pct)])
    for train_ds in datasets:
        for eval_ds in datasets:
            r = index.get((primary, train_ds, eval_ds))
            if r is not None:
                rows.append([f"ours({train_ds})", eval_ds, _pct(r.metrics.acc)])
    radar = out / "radar_data.tsv"
    _write_tsv(radar, header, rows)
    written.append(radar)

    # Scatter plot data: relative accuracy against test/train size ratio.
    header = ["size_ratio", "acc_rel", "train_ds", "eval_ds"]
    rows = [
        [repr(r.size_ratio), repr(r.metrics.acc_rel), r.train_dataset, r.eval_dataset]
        for r in results
        if r.mode == "zeroshot"
    ]
    scatter = out / "scatter_data.tsv"
    _write_tsv(scatter, header, rows)
    written.append(scatter)

    return written

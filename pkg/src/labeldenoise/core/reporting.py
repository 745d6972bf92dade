"""Export helpers for writing evaluation report directories."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import InputError, LabelDenoiseError  # noqa: E402
from .evaluation import EvalReport  # noqa: E402
from .utils import ensure_directory  # noqa: E402

_PNG_METADATA = {"Software": None}


@dataclass(slots=True)
class MethodRow:
    method: str
    report: EvalReport
    gain: float | None = None


@dataclass(slots=True)
class ReportFiles:
    out_dir: Path
    files: Dict[str, Path] = field(default_factory=dict)


def _iou_cells(report: EvalReport) -> List[str]:
    return ["n/a" if math.isnan(value) else f"{100.0 * value:.2f}" for value in report.per_class_iou]


def build_rows(
    reports: Mapping[str, EvalReport],
    reference: EvalReport | None = None,
) -> List[MethodRow]:
    return [
        MethodRow(method=method, report=report, gain=None if reference is None else report.miou - reference.miou)
        for method, report in reports.items()
    ]


def _write_iou_tables(
    out_dir: Path,
    rows: Sequence[MethodRow],
    class_names: Sequence[str],
    stem: str = "per_class_iou",
) -> tuple[Path, Path]:
    header = ["method", *class_names, "mIoU", "gain"]
    body = [
        [
            row.method,
            *_iou_cells(row.report),
            f"{100.0 * row.report.miou:.2f}",
            "" if row.gain is None else f"{100.0 * row.gain:+.2f}",
        ]
        for row in rows
    ]
    csv_path = out_dir / f"{stem}.csv"
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(body)

    widths = [max(len(str(line[column])) for line in [header, *body]) for column in range(len(header))]
    lines = ["  ".join(str(cell).rjust(width) for cell, width in zip(line, widths)) for line in [header, *body]]
    excluded = sorted({cls for row in rows for cls in row.report.excluded_classes})
    if excluded:
        lines.append(f"excluded from mIoU: {', '.join(class_names[cls] for cls in excluded)}")
    txt_path = out_dir / f"{stem}.txt"
    txt_path.write_text("\n".join(lines) + "\n")
    return txt_path, csv_path


def _write_class_mass(out_dir: Path, reports: Sequence[EvalReport], class_names: Sequence[str]) -> tuple[Path, Path]:
    masses = np.array(
        [
            report.per_class_prediction_mass
            if report.per_class_prediction_mass is not None
            else np.full(len(class_names), np.nan)
            for report in reports
        ]
    )
    csv_path = out_dir / "class_mass.csv"
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", *class_names])
        for epoch, row in enumerate(masses, start=1):
            writer.writerow([epoch, *(f"{value:.6f}" for value in row)])

    figure, axis = plt.subplots(figsize=(7, 4))
    epochs = np.arange(1, len(reports) + 1)
    for column, name in enumerate(class_names):
        axis.plot(epochs, masses[:, column], marker="o", markersize=3, label=name)
    axis.set_xlabel("epoch")
    axis.set_ylabel("predicted pixel mass")
    axis.set_title("Predicted class mass per epoch")
    axis.legend(fontsize="small", ncol=2)
    figure.tight_layout()
    png_path = out_dir / "class_mass.png"
    figure.savefig(png_path, dpi=100, metadata=_PNG_METADATA)
    plt.close(figure)
    return csv_path, png_path


def _write_rank_histogram(out_dir: Path, histogram: np.ndarray) -> tuple[Path, Path]:
    csv_path = out_dir / "rank_hist.csv"
    with csv_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["rank", "count"])
        for rank, count in enumerate(histogram, start=1):
            writer.writerow([rank, int(count)])

    figure, axis = plt.subplots(figsize=(6, 4))
    ranks = np.arange(1, len(histogram) + 1)
    axis.bar(ranks, np.maximum(histogram, 1), color="tab:blue")
    axis.set_yscale("log")
    axis.set_xticks(ranks)
    axis.set_xlabel("softmax rank of the true class")
    axis.set_ylabel("pixels")
    axis.set_title("Rank of the true class in the sorted softmax output")
    figure.tight_layout()
    png_path = out_dir / "rank_hist.png"
    figure.savefig(png_path, dpi=100, metadata=_PNG_METADATA)
    plt.close(figure)
    return csv_path, png_path


def _json_ready(values: np.ndarray) -> List[float | None]:
    return [None if math.isnan(value) else round(float(value), 6) for value in values]


def emit_report(
    reports: Sequence[EvalReport],
    out_dir: Path,
    *,
    method: str = "ld",
    config_hash: str = "",
    reference: EvalReport | None = None,
    comparison: Mapping[str, EvalReport] | None = None,
    class_names: Sequence[str] | None = None,
) -> ReportFiles:
    """Write IoU tables, the class-mass trajectory, the rank histogram and a JSON summary.

    ``reports`` is the per-epoch history of one run (the last entry is the final result).
    ``comparison`` adds further method rows to the IoU table; ``reference`` (usually the
    source-only model) fills the gain column.
    """
    if not reports:
        raise InputError("emit_report needs at least one report")
    final = reports[-1]
    names = list(class_names) if class_names is not None else [f"class_{index}" for index in range(len(final.per_class_iou))]
    try:
        ensure_directory(out_dir)
    except OSError as exc:
        raise LabelDenoiseError(f"cannot create report directory '{out_dir}': {exc}") from exc

    rows = build_rows({method: final, **(comparison or {})}, reference)
    result = ReportFiles(out_dir=out_dir)
    try:
        result.files["per_class_iou.txt"], result.files["per_class_iou.csv"] = _write_iou_tables(out_dir, rows, names)
        result.files["class_mass.csv"], result.files["class_mass.png"] = _write_class_mass(out_dir, reports, names)
        if final.rank_histogram is not None:
            result.files["rank_hist.csv"], result.files["rank_hist.png"] = _write_rank_histogram(
                out_dir, final.rank_histogram
            )
        summary = {
            "method": method,
            "config_hash": config_hash,
            "miou": round(final.miou, 6),
            "gain": None if rows[0].gain is None else round(rows[0].gain, 6),
            "per_class_iou": _json_ready(final.per_class_iou),
            "excluded_classes": list(final.excluded_classes),
            "methods": {
                row.method: {
                    "miou": round(row.report.miou, 6),
                    "gain": None if row.gain is None else round(row.gain, 6),
                }
                for row in rows
            },
        }
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        result.files["summary.json"] = summary_path
    except OSError as exc:
        raise LabelDenoiseError(f"cannot write report into '{out_dir}': {exc}") from exc
    return result


def emit_comparison(
    reports: Mapping[str, EvalReport],
    out_dir: Path,
    *,
    reference_name: str = "source_only",
    config_hash: str = "",
    class_names: Sequence[str] | None = None,
) -> ReportFiles:
    """One row per method with its gain over ``reference_name``; writes ``comparison.*`` and ``summary.json``."""
    if reference_name not in reports:
        raise InputError(f"comparison needs a '{reference_name}' row to compute gains against")
    reference = reports[reference_name]
    names = list(class_names) if class_names is not None else [f"class_{index}" for index in range(len(reference.per_class_iou))]
    rows = build_rows(reports, reference)
    result = ReportFiles(out_dir=out_dir)
    try:
        ensure_directory(out_dir)
        result.files["comparison.txt"], result.files["comparison.csv"] = _write_iou_tables(
            out_dir, rows, names, stem="comparison"
        )
        summary = {
            "config_hash": config_hash,
            "reference": reference_name,
            "methods": {
                row.method: {
                    "miou": round(row.report.miou, 6),
                    "gain": round(row.gain, 6),
                    "per_class_iou": _json_ready(row.report.per_class_iou),
                }
                for row in rows
            },
        }
        summary_path = out_dir / "summary.json"
        summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        result.files["summary.json"] = summary_path
    except OSError as exc:
        raise LabelDenoiseError(f"cannot write comparison into '{out_dir}': {exc}") from exc
    return result

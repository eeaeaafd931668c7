import csv
import hashlib
import json
import os
import re
from datetime import datetime, timezone
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np

from app.models.experiments import METHODS, PredictionSet, RunReport
from app.utils.pose_geometry import ErrorPair

# Run archive layout: table names and headers
ARCHIVE_DEFINITIONS: List[Dict[str, Any]] = [
    {
        "title": "medians.csv",
        "headers": [
            "task_id", "method", "nu", "seed", "mode",
            "target_position_m", "target_orientation_deg",
            "source_position_m", "source_orientation_deg",
        ],
    },
    {
        "title": "predictions",
        "headers": [
            "image_id",
            "pred_tx", "pred_ty", "pred_tz", "pred_qw", "pred_qx", "pred_qy", "pred_qz",
            "true_tx", "true_ty", "true_tz", "true_qw", "true_qx", "true_qy", "true_qz",
        ],
    },
]

MEDIANS_HEADERS = ARCHIVE_DEFINITIONS[0]["headers"]
PREDICTION_HEADERS = ARCHIVE_DEFINITIONS[1]["headers"]


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else repr(float(value))


def _safe_name(run_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.=+-]+", "_", run_id)


def content_hash(*parts: str) -> str:
    digest = hashlib.sha256()
    for part in parts:
        digest.update(part.encode("utf-8"))
        digest.update(b"\0")
    return digest.hexdigest()


def run_directory(out_dir: str, snapshot: str, label: str = "run") -> str:
    """``<out_dir>/<label>-<UTC timestamp>-<config hash prefix>``, created on demand."""
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    path = os.path.join(out_dir, f"{label}-{stamp}-{content_hash(snapshot)[:10]}")
    os.makedirs(path, exist_ok=True)
    return path


# Basic table helpers

def write_rows(path: str, headers: Sequence[str], rows: Iterable[Sequence[Any]]) -> None:
    folder = os.path.dirname(path)
    if folder:
        os.makedirs(folder, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(headers)
        for row in rows:
            writer.writerow(row)


def get_rows(path: str) -> List[Dict[str, str]]:
    with open(path, "r", newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


# Reports

def medians_row(report: RunReport) -> List[str]:
    source = report.source
    return [
        report.task_id, report.method, _fmt(report.nu), str(report.seed), report.mode,
        _fmt(report.target.position_error), _fmt(report.target.orientation_error),
        _fmt(source.position_error if source else None), _fmt(source.orientation_error if source else None),
    ]


def _prediction_rows(predictions: PredictionSet) -> List[List[str]]:
    return [
        [image_id] + [_fmt(v) for v in pred] + [_fmt(v) for v in truth]
        for image_id, pred, truth in zip(predictions.image_ids, predictions.predicted, predictions.truth)
    ]


def _read_predictions(path: str) -> PredictionSet:
    rows = get_rows(path)
    pred = np.array([[float(r[h]) for h in PREDICTION_HEADERS[1:8]] for r in rows]).reshape(-1, 7)
    truth = np.array([[float(r[h]) for h in PREDICTION_HEADERS[8:]] for r in rows]).reshape(-1, 7)
    return PredictionSet([r["image_id"] for r in rows], pred, truth)


def emit_report(reports: Sequence[RunReport], path: str, snapshot: str = "") -> str:
    """Write the run archive; returns the provenance hash recorded in it."""
    try:
        os.makedirs(os.path.join(path, "predictions"), exist_ok=True)
    except OSError as e:
        raise ValueError(f"cannot write run archive under {path}: {e}") from e
    provenance = content_hash(snapshot, *(r.run_id for r in reports))
    with open(os.path.join(path, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# provenance sha256={provenance}\n")
        fh.write(snapshot)
    with open(os.path.join(path, "report.jsonl"), "w", encoding="utf-8") as fh:
        for report in reports:
            record = report.to_record()
            record["provenance"] = provenance
            record["predictions"] = f"predictions/{_safe_name(report.run_id)}"
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    for report in reports:
        stem = os.path.join(path, "predictions", _safe_name(report.run_id))
        write_rows(stem + ".target.csv", PREDICTION_HEADERS, _prediction_rows(report.target_predictions))
        if report.source_predictions is not None:
            write_rows(stem + ".source.csv", PREDICTION_HEADERS, _prediction_rows(report.source_predictions))
    write_rows(os.path.join(path, "medians.csv"), MEDIANS_HEADERS, [medians_row(r) for r in reports])
    return provenance


def load_archive(path: str) -> List[RunReport]:
    report_path = os.path.join(path, "report.jsonl")
    if not os.path.exists(report_path):
        raise ValueError(f"no run archive at {path} (missing report.jsonl)")
    reports = []
    with open(report_path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            record = json.loads(line)
            stem = os.path.join(path, record["predictions"])
            source_predictions = _read_predictions(stem + ".source.csv") if os.path.exists(stem + ".source.csv") else None
            reports.append(RunReport(
                task_id=record["task_id"],
                method=record["method"],
                nu=record["nu"],
                seed=record["seed"],
                mode=record["mode"],
                target=ErrorPair(**record["target"]),
                target_predictions=_read_predictions(stem + ".target.csv"),
                source=ErrorPair(**record["source"]) if record["source"] else None,
                source_predictions=source_predictions,
                curves=record["curves"],
                probe_accuracy=record["probe_accuracy"],
                wall_clock=record["wall_clock"],
                config=record["config"],
            ))
    return reports


def read_medians(path: str) -> List[Dict[str, str]]:
    return get_rows(os.path.join(path, "medians.csv"))


def render_tables(reports: Sequence[RunReport]) -> Dict[str, str]:
    """Method-by-task tables with ``pos/orient`` cells.

    The markdown table shows the median over seeds to two decimals. The CSV
    table has one row per seed and the stored errors at full precision.
    """
    grouped: Dict[tuple, List[ErrorPair]] = {}
    per_seed: Dict[tuple, ErrorPair] = {}
    for r in reports:
        grouped.setdefault((r.task_id, r.method, r.nu), []).append(r.target)
        per_seed[(r.task_id, r.method, r.nu, r.seed)] = r.target
    medians = {
        key: ErrorPair(float(np.median([e.position_error for e in errs])),
                       float(np.median([e.orientation_error for e in errs])))
        for key, errs in grouped.items()
    }
    tasks = sorted({key[0] for key in medians})
    order = {m: i for i, m in enumerate(METHODS)}

    def rank(key: tuple) -> tuple:
        return (order.get(key[0], len(order)),) + key[1:]

    rows = sorted({(key[1], key[2]) for key in medians}, key=rank)
    seed_rows = sorted({key[1:] for key in per_seed}, key=rank)

    def label(method: str, nu: float) -> str:
        return method if method in ("no_adaptation", "joint") else f"{method}, nu={nu:g}"

    md = ["| method | " + " | ".join(tasks) + " |", "|---|" + "---|" * len(tasks)]
    for method, nu in rows:
        cells = []
        for task in tasks:
            err = medians.get((task, method, nu))
            cells.append(f"{err.position_error:.2f}/{err.orientation_error:.2f}" if err else "-")
        md.append(f"| {label(method, nu)} | " + " | ".join(cells) + " |")

    csv_lines = [",".join(["method", "nu", "seed"] + tasks)]
    for method, nu, seed in seed_rows:
        cells = []
        for task in tasks:
            err = per_seed.get((task, method, nu, seed))
            cells.append(f"{_fmt(err.position_error)}/{_fmt(err.orientation_error)}" if err else "-")
        csv_lines.append(",".join([method, _fmt(nu), str(seed)] + cells))
    return {"markdown": "\n".join(md) + "\n", "csv": "\n".join(csv_lines) + "\n"}


def write_tables(reports: Sequence[RunReport], path: str) -> Dict[str, str]:
    tables = render_tables(reports)
    with open(os.path.join(path, "tables.md"), "w", encoding="utf-8") as fh:
        fh.write(tables["markdown"])
    with open(os.path.join(path, "tables.csv"), "w", encoding="utf-8") as fh:
        fh.write(tables["csv"])
    return tables


def write_summary(summary: Dict[str, Any], path: str) -> None:
    """Key=value text plus a one-row CSV of the same fields."""
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "summary.txt"), "w", encoding="utf-8") as fh:
        for key, value in summary.items():
            fh.write(f"{key}={value}\n")
    write_rows(os.path.join(path, "summary.csv"), list(summary.keys()), [list(summary.values())])

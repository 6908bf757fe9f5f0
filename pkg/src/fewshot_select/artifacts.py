"""Stable on-disk layout for reports: digest-stamped JSON plus flat CSV files."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path
from typing import Any, Iterable, Sequence

from .errors import DigestMismatchError
from .harness import ReliabilityReport, RunRecord

REPORT_FORMAT = "fewshot-report"


def _digest(body: dict) -> str:
    payload = {k: v for k, v in body.items() if k != "digest"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def write_report(path: str | Path, kind: str, body: dict) -> Path:
    """Write ``body`` as a ``kind`` report with a content digest."""
    doc = {"format": REPORT_FORMAT, "kind": kind, **body}
    doc["digest"] = _digest(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def read_artifact(path: str | Path) -> dict:
    """Parse any JSON artifact and verify its digest."""
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DigestMismatchError(f"{path}: truncated or corrupt artifact ({exc.msg})") from exc
    if not isinstance(doc, dict) or "digest" not in doc:
        raise DigestMismatchError(f"{path}: artifact carries no digest")
    if doc.get("format") == REPORT_FORMAT and _digest(doc) != doc["digest"]:
        raise DigestMismatchError(f"{path}: report digest mismatch")
    return doc


def write_csv(path: str | Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


RUN_HEADER = ("task", "model", "axis", "value", "seed", "rule", "chosen", "chosen_accuracy", "raw_gain", "normalized_gain", "best", "mean", "worst")


def run_rows(records: Iterable[RunRecord]) -> list[list[Any]]:
    rows = []
    for r in sorted(records, key=RunRecord.sort_key):
        for rule in sorted(r.chosen):
            if r.valid(rule):
                raw, norm = r.gains(rule)
                rows.append([r.task, r.model, r.axis, r.value, r.seed, rule, r.chosen[rule], r.chosen_accuracy(rule), raw, norm, r.best, r.mean, r.worst])
            else:
                rows.append([r.task, r.model, r.axis, r.value, r.seed, rule, None, None, None, None, r.best, r.mean, r.worst])
    return rows


SUMMARY_HEADER = (
    "task", "model", "axis", "value", "rule", "runs", "invalid_runs",
    "accuracy_mean", "accuracy_stderr", "normalized_gain_mean", "normalized_gain_stderr",
    "raw_gain_mean", "raw_gain_stderr", "best_selection_rate", "best_selection_stderr", "p_gain_below_zero",
)


def summary_rows(report: ReliabilityReport) -> list[list[Any]]:
    rows = []
    for rule, s in sorted(report.rules.items()):
        def ms(x):
            return (None, None) if x is None else (x.mean, x.stderr)

        rate = (None, None) if s.best_rate is None else s.best_rate
        rows.append([
            report.task, report.model, report.axis, report.value, rule, s.runs, s.invalid_runs,
            *ms(s.accuracy), *ms(s.normalized_gain), *ms(s.raw_gain), *rate, s.p_gain_below_zero,
        ])
    return rows


CDF_HEADER = ("task", "model", "axis", "value", "rule", "gain", "cumulative_probability")


def cdf_rows(report: ReliabilityReport) -> list[list[Any]]:
    return [
        [report.task, report.model, report.axis, report.value, rule, g, p]
        for rule, s in sorted(report.rules.items())
        for g, p in s.cdf
    ]


TRANSFER_HEADER = ("task", "axis", "value", "rule", "chooser", "target", "normalized_gain")


def transfer_rows(task: str, axis: str | None, value: Any, transfer: dict) -> list[list[Any]]:
    return [
        [task, axis, value, rule, chooser, target, gain]
        for rule, matrix in sorted(transfer.items())
        for chooser, row in sorted(matrix.items())
        for target, gain in sorted(row.items())
    ]

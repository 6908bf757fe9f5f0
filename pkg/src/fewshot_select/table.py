"""Per-candidate score tables: the single source every criterion reads from.

A table has one row per ordering of the training units and one column per
position.  ``label_nll[p, k]`` is the NLL (nats) of the gold label(s) of the
unit at position ``k`` given the units before it under ordering ``p``.  Units
are single examples for leave-one-out plans, or whole folds otherwise, in
which case an entry is the summed NLL over the fold's examples.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from ._seeding import rng_for
from .errors import BudgetExhausted, DigestMismatchError, FewShotError, IncompleteTableError
from .plans import FoldPlan, PermutationPlan
from .scoring.base import CRITERION, EPSILON, MODES, SEQUENCE_MODE, ScoringBackend, smooth_probability
from .task import LabelSpace, PromptCandidate, TrainSet, render_sequence

FORMAT = "fewshot-score-table"
VERSION = 1


@dataclass(frozen=True)
class TestRecord:
    ordering: int
    example_id: str
    predicted: str
    correct: bool


@dataclass(frozen=True, eq=False)
class ScoreTable:
    candidate_id: str
    train_ids: tuple[str, ...]
    units: tuple[tuple[str, ...], ...]
    orderings: np.ndarray
    label_nll: np.ndarray
    full_nll: np.ndarray | None = None
    uniform_nll: tuple[float, ...] | None = None
    mode: str = SEQUENCE_MODE
    plan_seed: int = 0
    passes: int = 0
    channel: str = "label"
    backend: dict | None = None
    test_records: tuple[TestRecord, ...] | None = None

    @property
    def n(self) -> int:
        return int(self.orderings.shape[1])

    @property
    def n_orderings(self) -> int:
        return int(self.orderings.shape[0])

    @property
    def unit_sizes(self) -> np.ndarray:
        return np.array([len(u) for u in self.units])

    @property
    def complete(self) -> bool:
        return bool(np.all(np.isfinite(self.label_nll)))

    def require_complete(self) -> None:
        if not self.complete:
            raise IncompleteTableError(f"score table for {self.candidate_id} is incomplete")

    def key(self) -> str:
        """Digest of what determines the table's content."""
        payload = {
            "candidate": self.candidate_id,
            "train": list(self.train_ids),
            "units": [list(u) for u in self.units],
            "plan_seed": self.plan_seed,
            "mode": self.mode,
            "backend": self.backend or {},
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _training_units(train: TrainSet, folds: FoldPlan | None) -> tuple[tuple[str, ...], ...]:
    if folds is None or folds.is_loo:
        return tuple((ex.id,) for ex in train.examples)
    if set(folds.assignment) != set(train.ids):
        raise ValueError("fold plan does not cover the training set")
    return folds.folds


def _note_context(exc: Exception, context: str) -> None:
    if exc.args:
        exc.args = (f"{context}: {exc.args[0]}",) + tuple(exc.args[1:])
    else:
        exc.args = (context,)


def build_score_table(
    candidate: PromptCandidate,
    train: TrainSet,
    plan: PermutationPlan,
    backend: ScoringBackend,
    mode: str = SEQUENCE_MODE,
    want_joint: bool = False,
    *,
    label_space: LabelSpace,
    folds: FoldPlan | None = None,
    epsilon: float = EPSILON,
    max_workers: int | None = None,
    purpose: str = CRITERION,
) -> ScoreTable:
    """Score every ordering in ``plan`` and collect the table.

    Sequence mode spends one pass per ordering.  Class-normalised mode calls
    ``score_labels`` at every position and smooths the gold probability.
    On budget exhaustion :class:`BudgetExhausted` carries the partial table.
    """
    if mode not in MODES:
        raise ValueError(f"unknown scoring mode {mode!r}")
    if want_joint and mode != SEQUENCE_MODE:
        raise ValueError("joint log-probabilities need sequence mode")
    units = _training_units(train, folds)
    if plan.n != len(units):
        raise ValueError(f"plan orders {plan.n} units but the training set has {len(units)}")
    by_id = {ex.id: ex for ex in train.examples}
    uniform = tuple(
        float(sum(math.log(len(label_space.label_ids_for(by_id[e]))) for e in unit)) for unit in units
    )
    p_count, n = plan.orderings.shape
    label_nll = np.full((p_count, n), np.nan)
    full_nll = np.full((p_count, n), np.nan) if want_joint else None

    def make(passes: int) -> ScoreTable:
        return ScoreTable(
            candidate_id=candidate.id,
            train_ids=train.ids,
            units=units,
            orderings=plan.orderings,
            label_nll=label_nll,
            full_nll=full_nll,
            uniform_nll=uniform,
            mode=mode,
            plan_seed=plan.seed,
            passes=passes,
            backend=backend.describe(),
        )

    singletons = all(len(u) == 1 for u in units)
    if singletons and getattr(backend, "supports_bulk", False):
        unit_ids = [u[0] for u in units]
        if mode == SEQUENCE_MODE:
            passes = p_count
        else:
            per = 1 if backend.multi_continuation else len(label_space.ids)
            passes = p_count * n * per
        try:
            lab, full = backend.bulk_table(candidate.id, unit_ids, plan.orderings, mode, purpose)
        except BudgetExhausted as exc:
            exc.partial = make(0)
            raise
        label_nll[:] = lab
        if full_nll is not None:
            full_nll[:] = full
        return make(passes)

    unit_of = {e: i for i, unit in enumerate(units) for e in unit}

    def score_row(p: int) -> int:
        order = [by_id[e] for u in plan.orderings[p] for e in units[int(u)]]
        positions = {int(u): pos for pos, u in enumerate(plan.orderings[p])}
        row = np.zeros(n)
        full_row = np.zeros(n)
        used = 0
        try:
            if mode == SEQUENCE_MODE:
                rendered = render_sequence(candidate, order, label_space=label_space)
                score = backend.score_sequence(rendered, purpose)
                used = 1
                for ex, lab, blk in zip(order, score.label_nll, score.block_nll):
                    pos = positions[unit_of[ex.id]]
                    row[pos] += lab
                    full_row[pos] += blk
            else:
                for i, ex in enumerate(order):
                    labels = [(lid, candidate.surface(lid, label_space)) for lid in label_space.label_ids_for(ex)]
                    rendered = render_sequence(candidate, order[:i], query=ex, label_space=label_space)
                    ls = backend.score_labels(rendered, labels, purpose)
                    used += 1 if backend.multi_continuation else len(labels)
                    gold = min(max(ls.gold_probability(ex.gold_labels), 0.0), 1.0)
                    row[positions[unit_of[ex.id]]] += -math.log(smooth_probability(gold, epsilon))
        except FewShotError as exc:
            if not isinstance(exc, BudgetExhausted):
                _note_context(exc, f"candidate {candidate.id}, ordering {p}")
            raise
        label_nll[p] = row
        if full_nll is not None:
            full_nll[p] = full_row
        return used

    workers = max_workers if max_workers is not None else backend.concurrency
    used_total = 0
    try:
        if workers <= 1:
            for p in range(p_count):
                used_total += score_row(p)
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(score_row, p) for p in range(p_count)]
                first_error = None
                for fut in futures:
                    try:
                        used_total += fut.result()
                    except Exception as exc:  # keep draining so partial rows land
                        first_error = first_error or exc
                if first_error is not None:
                    raise first_error
    except BudgetExhausted as exc:
        exc.partial = make(used_total)
        raise
    return make(used_total)


def joint_channel(table: ScoreTable) -> ScoreTable:
    """View whose entries are full-block NLLs, i.e. the joint ``-log p(x, y)`` loss."""
    if table.full_nll is None:
        raise ValueError(f"table for {table.candidate_id} has no full-block NLLs")
    return replace(table, label_nll=table.full_nll, channel="joint")


def subsample_table(table: ScoreTable, passes: int, seed: int) -> ScoreTable:
    """Uniform subset of ``passes`` orderings, kept in their original order."""
    total = table.n_orderings
    if not 1 <= passes <= total:
        raise ValueError(f"passes must be in [1, {total}], got {passes}")
    if passes == total:
        return table
    idx = np.sort(rng_for("subsample", seed, table.candidate_id, total).choice(total, size=passes, replace=False))
    per_row = table.passes / total if total else 0
    records = None
    if table.test_records is not None:
        keep = {int(i): j for j, i in enumerate(idx)}
        records = tuple(replace(r, ordering=keep[r.ordering]) for r in table.test_records if r.ordering in keep)
    return replace(
        table,
        orderings=table.orderings[idx],
        label_nll=table.label_nll[idx],
        full_nll=None if table.full_nll is None else table.full_nll[idx],
        passes=int(round(per_row * passes)),
        test_records=records,
    )


def heldout_units(table: ScoreTable) -> set[int]:
    """Units that appear in the final position of at least one ordering (folds CV touches)."""
    return set(int(u) for u in table.orderings[:, -1])


# ---------------------------------------------------------------------------
# serialization


def _arr(a: np.ndarray | None) -> Any:
    return None if a is None else a.tolist()


def table_to_json(table: ScoreTable) -> dict:
    body = {
        "format": FORMAT,
        "version": VERSION,
        "key": table.key(),
        "candidate": table.candidate_id,
        "train_ids": list(table.train_ids),
        "units": [list(u) for u in table.units],
        "orderings": table.orderings.tolist(),
        "label_nll": _arr(table.label_nll),
        "full_nll": _arr(table.full_nll),
        "uniform_nll": None if table.uniform_nll is None else list(table.uniform_nll),
        "mode": table.mode,
        "plan_seed": table.plan_seed,
        "passes": table.passes,
        "channel": table.channel,
        "complete": table.complete,
        "backend": table.backend,
        "test_records": None
        if table.test_records is None
        else [[r.ordering, r.example_id, r.predicted, r.correct] for r in table.test_records],
    }
    body["digest"] = _content_digest(body)
    return body


def _content_digest(body: dict) -> str:
    payload = {k: v for k, v in body.items() if k != "digest"}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def table_from_json(body: dict) -> ScoreTable:
    if body.get("format") != FORMAT:
        raise DigestMismatchError("not a score-table artifact")
    if body.get("version") != VERSION:
        raise DigestMismatchError(f"unsupported score-table version {body.get('version')}")
    if _content_digest(body) != body.get("digest"):
        raise DigestMismatchError("score-table digest mismatch")
    n = len(body["units"])
    records = body.get("test_records")
    table = ScoreTable(
        candidate_id=body["candidate"],
        train_ids=tuple(body["train_ids"]),
        units=tuple(tuple(u) for u in body["units"]),
        orderings=np.asarray(body["orderings"], dtype=np.int64).reshape(-1, n),
        label_nll=np.asarray(body["label_nll"], dtype=float).reshape(-1, n),
        full_nll=None if body["full_nll"] is None else np.asarray(body["full_nll"], dtype=float).reshape(-1, n),
        uniform_nll=None if body["uniform_nll"] is None else tuple(body["uniform_nll"]),
        mode=body["mode"],
        plan_seed=body["plan_seed"],
        passes=body["passes"],
        channel=body["channel"],
        backend=body["backend"],
        test_records=None if records is None else tuple(TestRecord(int(a), b, c, bool(d)) for a, b, c, d in records),
    )
    if table.key() != body["key"]:
        raise DigestMismatchError("score-table key mismatch")
    return table


def save_table(table: ScoreTable, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(table_to_json(table), sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return path


def load_table(path: str | Path) -> ScoreTable:
    try:
        body = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DigestMismatchError(f"{path}: truncated or corrupt artifact ({exc.msg})") from exc
    return table_from_json(body)


__all__ = [
    "ScoreTable",
    "TestRecord",
    "build_score_table",
    "heldout_units",
    "joint_channel",
    "load_table",
    "save_table",
    "subsample_table",
    "table_from_json",
    "table_to_json",
]

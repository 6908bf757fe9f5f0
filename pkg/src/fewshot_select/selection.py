"""Deterministic choice among candidates from their criterion estimates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

from .criteria import CriterionEstimate

TIE_TOLERANCE = 1e-12
ARGMIN = "argmin-mean"


def conservative_rule(alpha: float) -> str:
    return f"conservative(alpha={alpha:g})"


@dataclass(frozen=True)
class CandidateScore:
    mean: float
    variance: float | None
    score: float


@dataclass(frozen=True)
class SelectionReport:
    rule: str
    criterion: str
    chosen: str | None
    scores: Mapping[str, CandidateScore]
    ties: tuple[str, ...] = ()
    excluded: tuple[str, ...] = field(default=())

    def to_json(self) -> dict:
        return {
            "rule": self.rule,
            "criterion": self.criterion,
            "chosen": self.chosen,
            "candidates": {
                cid: {"mean": s.mean, "variance": s.variance, "score": s.score} for cid, s in sorted(self.scores.items())
            },
            "trace": {"ties": list(self.ties), "excluded": list(self.excluded), "resolution": "ascending candidate id"},
        }


def _select(
    estimates: Mapping[str, CriterionEstimate | None], rule: str, alpha: float
) -> SelectionReport:
    if not estimates:
        raise ValueError("no candidates to select from")
    present = {cid: est for cid, est in estimates.items() if est is not None}
    excluded = tuple(sorted(cid for cid, est in estimates.items() if est is None))
    kinds = {est.kind for est in present.values()}
    if len(kinds) > 1:
        raise ValueError(f"estimates mix criterion kinds: {sorted(kinds)}")
    criterion = kinds.pop() if kinds else ""
    scores = {}
    for cid, est in present.items():
        if alpha == 0:
            score = est.mean
        else:
            if est.std is None:
                raise ValueError(f"candidate {cid} has no variance for the conservative rule")
            score = est.mean + alpha * est.std
        scores[cid] = CandidateScore(est.mean, est.variance, score)
    if not scores:
        return SelectionReport(rule, criterion, None, {}, (), excluded)
    best = min(s.score for s in scores.values())
    tied = sorted(cid for cid, s in scores.items() if s.score - best <= TIE_TOLERANCE)
    return SelectionReport(rule, criterion, tied[0], scores, tuple(tied) if len(tied) > 1 else (), excluded)


def select_argmin(estimates: Mapping[str, CriterionEstimate | None]) -> SelectionReport:
    """Candidate with the lowest mean; ``None`` estimates are excluded and listed."""
    return _select(estimates, ARGMIN, 0.0)


def select_conservative(estimates: Mapping[str, CriterionEstimate | None], alpha: float) -> SelectionReport:
    """Minimise ``mean + alpha * std``; alpha = 0 is plain argmin."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    if alpha == 0:
        report = _select(estimates, ARGMIN, 0.0)
        return SelectionReport(conservative_rule(0.0), report.criterion, report.chosen, report.scores, report.ties, report.excluded)
    return _select(estimates, conservative_rule(alpha), alpha)

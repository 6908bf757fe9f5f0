"""Gain statistics, empirical CDFs, best-selection rates and transfer matrices."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

TIE = 1e-12


@dataclass(frozen=True)
class MeanStderr:
    mean: float
    stderr: float
    count: int

    def to_json(self) -> dict:
        return {"mean": self.mean, "stderr": self.stderr, "n": self.count}


def mean_stderr(values: Sequence[float]) -> MeanStderr:
    """Mean and standard error (sample std over sqrt(count)); needs two values."""
    vals = sorted(float(v) for v in values)
    if len(vals) < 2:
        raise ValueError("need at least two runs to aggregate")
    mean = math.fsum(vals) / len(vals)
    var = math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)
    return MeanStderr(mean, math.sqrt(var / len(vals)), len(vals))


def gain_statistics(selected_acc: float, all_accs: Sequence[float]) -> tuple[float, float | None]:
    """Raw gain over the candidate mean, and the gain rescaled so mean -> 0 and best -> 100.

    The normalised gain is ``None`` when the best candidate equals the mean.
    """
    if not all_accs:
        raise ValueError("no candidate accuracies")
    mean = math.fsum(all_accs) / len(all_accs)
    best = max(all_accs)
    raw = selected_acc - mean
    if best - mean <= TIE:
        return raw, None
    return raw, 100.0 * raw / (best - mean)


def best_selection_rate(hits: Sequence[bool]) -> tuple[float, float]:
    """Fraction of runs that picked a top candidate, with its binomial standard error."""
    if not hits:
        raise ValueError("no runs")
    p = sum(bool(h) for h in hits) / len(hits)
    return p, math.sqrt(p * (1.0 - p) / len(hits))


def gain_cdf(gains: Sequence[float]) -> list[tuple[float, float]]:
    """Empirical CDF as sorted ``(gain, P(G <= gain))`` points, one per distinct gain."""
    if not gains:
        raise ValueError("no gains")
    vals = sorted(float(g) for g in gains)
    total = len(vals)
    points: list[tuple[float, float]] = []
    for i, g in enumerate(vals, start=1):
        if points and points[-1][0] == g:
            points[-1] = (g, i / total)
        else:
            points.append((g, i / total))
    return points


def probability_below(gains: Sequence[float], threshold: float = 0.0) -> float:
    return sum(g < threshold for g in gains) / len(gains)


def transfer_matrix(
    choices: Mapping[str, str | None],
    accuracies: Mapping[str, Mapping[str, float]],
) -> dict[str, dict[str, float | None]]:
    """Entry ``[i][j]``: normalised gain on model ``j`` of the candidate chosen for model ``i``.

    ``choices`` maps chooser model -> chosen candidate; ``accuracies`` maps
    target model -> candidate -> test accuracy.  Degenerate targets (single
    candidate, or best equal to mean) give ``None``.
    """
    cand_sets = {model: frozenset(accs) for model, accs in accuracies.items()}
    if len(set(cand_sets.values())) > 1:
        raise ValueError("models were evaluated on different candidate sets")
    out: dict[str, dict[str, float | None]] = {}
    for chooser, chosen in sorted(choices.items()):
        row: dict[str, float | None] = {}
        for target, accs in sorted(accuracies.items()):
            if chosen is None:
                row[target] = None
                continue
            if chosen not in accs:
                raise ValueError(f"candidate {chosen!r} missing for model {target!r}")
            row[target] = gain_statistics(accs[chosen], list(accs.values()))[1]
        out[chooser] = row
    return out


def average_matrices(matrices: Sequence[Mapping[str, Mapping[str, float | None]]]) -> dict[str, dict[str, float | None]]:
    """Entry-wise mean over runs, ignoring absent entries."""
    if not matrices:
        return {}
    out: dict[str, dict[str, float | None]] = {}
    for i in sorted(matrices[0]):
        out[i] = {}
        for j in sorted(matrices[0][i]):
            vals = [m[i][j] for m in matrices if m[i][j] is not None]
            out[i][j] = math.fsum(vals) / len(vals) if vals else None
    return out

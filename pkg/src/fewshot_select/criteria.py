"""Selection criteria computed from a shared score table (no extra passes).

One sample of a criterion is one ordering of the training units; the
held-out unit for cross-validation is the unit in the final position.
All values are in nats.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import IncompleteTableError
from .plans import FoldPlan
from .table import ScoreTable, joint_channel

CV = "cv"
MDL = "mdl"
MDL_BETA = "mdl_beta"
BAYES_CV = "bayes_cv"
CV_JOINT = "cv_joint"
MDL_JOINT = "mdl_joint"
CV_ALPHA = "cv_alpha"
CRITERIA = (CV, MDL, MDL_BETA, BAYES_CV, CV_JOINT, MDL_JOINT, CV_ALPHA)


@dataclass(frozen=True)
class CriterionEstimate:
    kind: str
    mean: float
    variance: float | None
    samples: tuple[float, ...]

    @property
    def count(self) -> int:
        return len(self.samples)

    @property
    def std(self) -> float | None:
        return None if self.variance is None else math.sqrt(self.variance)

    def to_json(self) -> dict:
        return {"kind": self.kind, "mean": self.mean, "variance": self.variance, "count": self.count}


def estimate(kind: str, samples: Sequence[float]) -> CriterionEstimate:
    """Mean and unbiased variance; both are exactly rounded, hence order-independent."""
    values = [float(x) for x in samples]
    if not values:
        raise ValueError(f"no samples for criterion {kind}")
    mean = math.fsum(values) / len(values)
    variance = None
    if len(values) > 1:
        variance = math.fsum((x - mean) ** 2 for x in values) / (len(values) - 1)
    return CriterionEstimate(kind, mean, variance, tuple(values))


def _kind(table: ScoreTable, base: str) -> str:
    return f"{base}_joint" if table.channel == "joint" else base


def _check_folds(table: ScoreTable, folds: FoldPlan | None) -> None:
    if folds is None:
        return
    if folds.is_loo:
        ok = all(len(u) == 1 for u in table.units) and {u[0] for u in table.units} == set(folds.assignment)
    else:
        ok = {tuple(sorted(u)) for u in table.units} == {tuple(sorted(f)) for f in folds.folds}
    if not ok:
        raise ValueError("fold plan does not match the table's units")


def compute_cv(table: ScoreTable, folds: FoldPlan | None = None) -> CriterionEstimate:
    """Loss of the final-position unit given all the others, one sample per ordering."""
    table.require_complete()
    _check_folds(table, folds)
    if table.n < 2:
        raise ValueError("cross-validation needs at least two training units")
    return estimate(_kind(table, CV), table.label_nll[:, -1])


def _first_fold_costs(table: ScoreTable, label_count: int | None) -> np.ndarray:
    """Uniform-code cost of the unit in position 0 for every ordering."""
    if label_count is not None:
        if label_count < 1:
            raise ValueError("label_count must be positive")
        per_unit = table.unit_sizes * math.log(label_count)
    elif table.uniform_nll is not None:
        per_unit = np.asarray(table.uniform_nll, dtype=float)
    else:
        raise ValueError("first_fold_uniform needs a label count")
    return per_unit[table.orderings[:, 0]]


def position_losses(table: ScoreTable, first_fold_uniform: bool = False, label_count: int | None = None) -> np.ndarray:
    """Code length of each position, (P, n); position 0 optionally priced by the uniform code."""
    table.require_complete()
    values = np.array(table.label_nll, dtype=float)
    if first_fold_uniform:
        values[:, 0] = _first_fold_costs(table, label_count)
    return values


def _weighted_samples(values: np.ndarray, weights: np.ndarray) -> np.ndarray:
    return (values * weights).sum(axis=1)


def mdl_beta_weights(table: ScoreTable, beta: float) -> np.ndarray:
    """Per-ordering position weights, (P, n), each row summing to one.

    The weight of a position decays as ``exp(-beta * (largest prefix size -
    its prefix size))``: beta = 0 is uniform (online code) and large beta
    puts all mass on the largest prefix (cross-validation).
    """
    if beta < 0:
        raise ValueError("beta must be non-negative")
    sizes = table.unit_sizes[table.orderings]
    prefix = np.cumsum(sizes, axis=1) - sizes
    logw = -beta * (prefix[:, -1:] - prefix)
    w = np.exp(logw - logw.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def compute_mdl(
    table: ScoreTable, first_fold_uniform: bool = False, label_count: int | None = None
) -> CriterionEstimate:
    """Online code length averaged over positions, one sample per ordering."""
    values = position_losses(table, first_fold_uniform, label_count)
    weights = np.full(values.shape, 1.0 / table.n)
    return estimate(_kind(table, MDL), _weighted_samples(values, weights))


def compute_mdl_beta(
    table: ScoreTable, beta: float, first_fold_uniform: bool = False, label_count: int | None = None
) -> CriterionEstimate:
    weights = mdl_beta_weights(table, beta)
    values = position_losses(table, first_fold_uniform, label_count)
    return estimate(MDL_BETA, _weighted_samples(values, weights))


def _groups(table: ScoreTable) -> list[np.ndarray]:
    last = table.orderings[:, -1]
    groups = [np.flatnonzero(last == u) for u in range(table.n)]
    empty = [i for i, g in enumerate(groups) if len(g) == 0]
    if empty:
        raise IncompleteTableError(f"no ordering holds out unit(s) {empty}")
    return groups


def bayes_posterior_weights(table: ScoreTable) -> list[np.ndarray]:
    """Posterior over orderings of the other units, per held-out unit.

    Uniform prior over orders; likelihood is the product of the conditional
    label probabilities of the units before the held-out one.
    """
    table.require_complete()
    out = []
    for rows in _groups(table):
        loglik = -table.label_nll[rows, :-1].sum(axis=1)
        out.append(np.exp(loglik - logsumexp(loglik)))
    return out


def compute_bayes_cv(table: ScoreTable) -> CriterionEstimate:
    """Held-out loss of the posterior-mixture predictor, one sample per held-out unit."""
    table.require_complete()
    if table.n < 2:
        raise ValueError("cross-validation needs at least two training units")
    samples = []
    for rows in _groups(table):
        loglik = -table.label_nll[rows, :-1].sum(axis=1)
        # normalise first so a single-ordering group reduces to exactly its CV loss
        log_post = loglik - logsumexp(loglik)
        samples.append(-float(logsumexp(log_post - table.label_nll[rows, -1])))
    return estimate(BAYES_CV, samples)


def compute_criterion(
    name: str,
    table: ScoreTable,
    *,
    beta: float = 1.0,
    first_fold_uniform: bool = False,
    label_count: int | None = None,
) -> CriterionEstimate:
    """Dispatch by criterion name. ``cv_alpha`` shares the CV estimate."""
    if name in (CV, CV_ALPHA):
        return compute_cv(table)
    if name == MDL:
        return compute_mdl(table, first_fold_uniform, label_count)
    if name == MDL_BETA:
        return compute_mdl_beta(table, beta, first_fold_uniform, label_count)
    if name == BAYES_CV:
        return compute_bayes_cv(table)
    if name == CV_JOINT:
        return compute_cv(joint_channel(table))
    if name == MDL_JOINT:
        return compute_mdl(joint_channel(table), first_fold_uniform, label_count)
    raise ValueError(f"unknown criterion {name!r}")

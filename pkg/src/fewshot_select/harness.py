"""Ground-truth evaluation of candidates and reliability studies of selection rules."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from ._seeding import rng_for
from .criteria import CV, CV_ALPHA, CV_JOINT, MDL_JOINT, CriterionEstimate, compute_criterion
from .errors import IncompleteTableError
from .plans import FoldPlan, PermutationPlan, make_folds, plan_permutations
from .reports import (
    TIE,
    MeanStderr,
    average_matrices,
    best_selection_rate,
    gain_cdf,
    gain_statistics,
    mean_stderr,
    probability_below,
    transfer_matrix,
)
from .scoring.base import EPSILON, SEQUENCE_MODE, TEST, ScoringBackend
from .selection import SelectionReport, select_argmin, select_conservative
from .table import ScoreTable, TestRecord, build_score_table, subsample_table
from .task import Dataset, Example, LabelSpace, PromptCandidate, TrainSet, render_sequence, sample_train_set

TEST_RULE = "test"
RANDOM_RULE = "random"
AXES = ("n", "passes", "alpha")


def alpha_rule(alpha: float) -> str:
    return f"{CV_ALPHA}={alpha:g}"


@dataclass(frozen=True)
class Protocol:
    n: int = 5
    k: int | None = None
    permutation_budget: int = 120
    mode: str = SEQUENCE_MODE
    criteria: tuple[str, ...] = (CV, "mdl")
    alphas: tuple[float, ...] = (1.0, 2.0, 3.0)
    beta: float = 1.0
    first_fold_uniform: bool = False
    epsilon: float = EPSILON
    class_coverage: bool = False
    passes: int | None = None
    label_count: int | None = None

    @property
    def wants_joint(self) -> bool:
        return any(c in (CV_JOINT, MDL_JOINT) for c in self.criteria)

    def rules(self) -> list[str]:
        out = []
        for c in self.criteria:
            if c == CV_ALPHA:
                out.extend(alpha_rule(a) for a in self.alphas)
            else:
                out.append(c)
        return out + [TEST_RULE, RANDOM_RULE]


@dataclass(frozen=True)
class Task:
    name: str
    dataset: Dataset
    candidates: tuple[PromptCandidate, ...]

    @property
    def candidate_ids(self) -> tuple[str, ...]:
        return tuple(c.id for c in self.candidates)


# ---------------------------------------------------------------------------
# test accuracy


@dataclass(frozen=True)
class AccuracyEstimate:
    candidate_id: str
    outcomes: tuple[TestRecord, ...]
    mean: float
    stderr: float | None


def assign_test_examples(pool: Sequence[Example], count: int, seed: int) -> list[Example]:
    """One test example per ordering: without replacement until the pool runs out, then with."""
    if not pool:
        raise ValueError("test pool is empty")
    rng = rng_for("test-assignment", seed, len(pool))
    order = [pool[int(i)] for i in rng.permutation(len(pool))[:count]]
    extra = count - len(order)
    if extra > 0:
        order.extend(pool[int(i)] for i in rng.integers(0, len(pool), size=extra))
    return order


def _accuracy(candidate_id: str, records: list[TestRecord]) -> AccuracyEstimate:
    flags = [1.0 if r.correct else 0.0 for r in records]
    mean = math.fsum(flags) / len(flags)
    stderr = None
    if len(flags) > 1:
        stderr = math.sqrt(math.fsum((f - mean) ** 2 for f in flags) / (len(flags) - 1) / len(flags))
    return AccuracyEstimate(candidate_id, tuple(records), mean, stderr)


def estimate_test_accuracy(
    candidate: PromptCandidate,
    train: TrainSet,
    plan: PermutationPlan,
    test_pool: Sequence[Example],
    backend: ScoringBackend,
    seed: int,
    *,
    label_space: LabelSpace,
    units: Sequence[Sequence[str]] | None = None,
    max_workers: int | None = None,
) -> AccuracyEstimate:
    """Append one test example to each ordering and check the top-1 label against gold."""
    tests = assign_test_examples(test_pool, len(plan), seed)
    units = units or [(ex.id,) for ex in train.examples]
    if len(units) != plan.n:
        raise ValueError("plan and training units disagree")
    by_id = {ex.id: ex for ex in train.examples}
    if getattr(backend, "supports_bulk", False) and all(len(u) == 1 for u in units):
        preds = backend.bulk_predict(candidate.id, [u[0] for u in units], plan.orderings, [t.id for t in tests], TEST)
    else:

        def predict(p: int) -> str:
            order = [by_id[e] for u in plan.orderings[p] for e in units[int(u)]]
            ex = tests[p]
            labels = [(lid, candidate.surface(lid, label_space)) for lid in label_space.label_ids_for(ex)]
            rendered = render_sequence(candidate, order, query=ex, label_space=label_space)
            return backend.score_labels(rendered, labels, TEST).predicted

        workers = max_workers if max_workers is not None else backend.concurrency
        if workers <= 1:
            preds = [predict(p) for p in range(len(plan))]
        else:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(predict, range(len(plan))))
    records = [TestRecord(p, t.id, pred, pred in t.gold_labels) for p, (t, pred) in enumerate(zip(tests, preds))]
    return _accuracy(candidate.id, records)


# ---------------------------------------------------------------------------
# single runs


@dataclass(frozen=True)
class RunRecord:
    task: str
    model: str
    seed: int
    train_ids: tuple[str, ...]
    accuracies: Mapping[str, float]
    chosen: Mapping[str, str | None]
    axis: str | None = None
    value: Any = None

    @property
    def best(self) -> float:
        return max(self.accuracies.values())

    @property
    def worst(self) -> float:
        return min(self.accuracies.values())

    @property
    def mean(self) -> float:
        return math.fsum(self.accuracies.values()) / len(self.accuracies)

    def valid(self, rule: str) -> bool:
        return self.chosen.get(rule) is not None

    def chosen_accuracy(self, rule: str) -> float:
        cid = self.chosen[rule]
        if cid is None:
            raise ValueError(f"rule {rule} has no valid choice in this run")
        return self.accuracies[cid]

    def gains(self, rule: str) -> tuple[float, float | None]:
        return gain_statistics(self.chosen_accuracy(rule), list(self.accuracies.values()))

    def hit_best(self, rule: str) -> bool:
        return self.best - self.chosen_accuracy(rule) <= TIE

    def sort_key(self) -> tuple:
        return (self.task, self.model, repr(self.value), self.seed, self.train_ids)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "seed": self.seed,
            "axis": self.axis,
            "value": self.value,
            "train_ids": list(self.train_ids),
            "accuracies": dict(sorted(self.accuracies.items())),
            "chosen": dict(sorted(self.chosen.items())),
            "baselines": {"best": self.best, "mean": self.mean, "worst": self.worst},
        }


@dataclass
class RunOutput:
    record: RunRecord
    tables: dict[str, ScoreTable]
    accuracies: dict[str, AccuracyEstimate]
    estimates: dict[str, dict[str, CriterionEstimate | None]]
    selections: dict[str, SelectionReport]


def criterion_estimates(tables: Mapping[str, ScoreTable | None], name: str, protocol: Protocol) -> dict[str, CriterionEstimate | None]:
    out: dict[str, CriterionEstimate | None] = {}
    for cid, table in sorted(tables.items()):
        if table is None or not table.complete:
            out[cid] = None
            continue
        try:
            out[cid] = compute_criterion(
                name,
                table,
                beta=protocol.beta,
                first_fold_uniform=protocol.first_fold_uniform,
                label_count=protocol.label_count,
            )
        except IncompleteTableError:
            out[cid] = None
    return out


def _oracle_choice(accs: Mapping[str, float]) -> str:
    best = max(accs.values())
    return sorted(cid for cid, a in accs.items() if best - a <= TIE)[0]


def prepare_split(task: Task, protocol: Protocol, seed: int) -> tuple[TrainSet, tuple[Example, ...], FoldPlan | None, PermutationPlan]:
    train, pool = sample_train_set(task.dataset, protocol.n, seed, protocol.class_coverage)
    folds = None
    if protocol.k is not None and protocol.k < protocol.n:
        folds = make_folds(train, protocol.k, seed)
    units = protocol.n if folds is None else folds.k
    plan = plan_permutations(units, protocol.permutation_budget, seed)
    return train, pool, folds, plan


def run_once(
    task: Task,
    backend: ScoringBackend,
    protocol: Protocol,
    seed: int,
    *,
    model: str = "model",
    axis: str | None = None,
    value: Any = None,
    cache: dict | None = None,
) -> RunOutput:
    """Sample a train set, score all candidates, apply every rule, and measure test accuracy."""
    train, pool, folds, plan = prepare_split(task, protocol, seed)
    space = task.dataset.label_space
    tables: dict[str, ScoreTable] = {}
    accs: dict[str, AccuracyEstimate] = {}
    for cand in task.candidates:
        key = (model, seed, protocol.n, protocol.k, protocol.permutation_budget, protocol.mode, protocol.wants_joint, protocol.epsilon, cand.id)
        if cache is not None and key in cache:
            table, acc = cache[key]
        else:
            table = build_score_table(
                cand, train, plan, backend, protocol.mode, protocol.wants_joint,
                label_space=space, folds=folds, epsilon=protocol.epsilon,
            )
            acc = estimate_test_accuracy(
                cand, train, plan, pool, backend, seed, label_space=space, units=table.units
            )
            table = replace(table, test_records=acc.outcomes)
            if cache is not None:
                cache[key] = (table, acc)
        if protocol.passes is not None:
            table = subsample_table(table, protocol.passes, seed)
        tables[cand.id] = table
        accs[cand.id] = acc

    accuracy = {cid: a.mean for cid, a in sorted(accs.items())}
    chosen: dict[str, str | None] = {}
    estimates: dict[str, dict[str, CriterionEstimate | None]] = {}
    selections: dict[str, SelectionReport] = {}
    for name in dict.fromkeys(CV if c == CV_ALPHA else c for c in protocol.criteria):
        estimates[name] = criterion_estimates(tables, name, protocol)
    for rule in protocol.rules():
        if rule == TEST_RULE:
            chosen[rule] = _oracle_choice(accuracy)
        elif rule == RANDOM_RULE:
            ids = sorted(accuracy)
            chosen[rule] = ids[int(rng_for("random-rule", seed).integers(len(ids)))]
        elif rule.startswith(CV_ALPHA + "="):
            alpha = float(rule.split("=", 1)[1])
            try:
                report = select_conservative(estimates[CV], alpha)
            except ValueError:
                chosen[rule] = None
                continue
            selections[rule] = report
            chosen[rule] = report.chosen
        else:
            report = select_argmin(estimates[rule])
            selections[rule] = report
            chosen[rule] = report.chosen
    record = RunRecord(task.name, model, seed, train.ids, accuracy, chosen, axis, value)
    return RunOutput(record, tables, accs, estimates, selections)


# ---------------------------------------------------------------------------
# aggregation


@dataclass(frozen=True)
class RuleSummary:
    accuracy: MeanStderr | None
    raw_gain: MeanStderr | None
    normalized_gain: MeanStderr | None
    best_rate: tuple[float, float] | None
    p_gain_below_zero: float | None
    cdf: tuple[tuple[float, float], ...]
    runs: int
    invalid_runs: int

    def to_json(self) -> dict:
        def ms(x: MeanStderr | None) -> dict | None:
            return None if x is None else x.to_json()

        return {
            "accuracy": ms(self.accuracy),
            "raw_gain": ms(self.raw_gain),
            "normalized_gain": ms(self.normalized_gain),
            "best_selection_rate": None if self.best_rate is None else {"rate": self.best_rate[0], "stderr": self.best_rate[1]},
            "p_gain_below_zero": self.p_gain_below_zero,
            "cdf": [list(p) for p in self.cdf],
            "runs": self.runs,
            "invalid_runs": self.invalid_runs,
        }


@dataclass(frozen=True)
class ReliabilityReport:
    task: str
    model: str
    axis: str | None
    value: Any
    runs: int
    baselines: Mapping[str, MeanStderr]
    rules: Mapping[str, RuleSummary]
    transfer: Mapping[str, Mapping[str, Mapping[str, float | None]]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "model": self.model,
            "axis": self.axis,
            "value": self.value,
            "runs": self.runs,
            "baselines": {k: v.to_json() for k, v in sorted(self.baselines.items())},
            "rules": {k: v.to_json() for k, v in sorted(self.rules.items())},
            "transfer": {k: v for k, v in sorted(self.transfer.items())},
        }


def summarize_rule(runs: Sequence[RunRecord], rule: str) -> RuleSummary:
    valid = [r for r in runs if r.valid(rule)]
    invalid = len(runs) - len(valid)
    if not valid:
        return RuleSummary(None, None, None, None, None, (), 0, invalid)
    accs = [r.chosen_accuracy(rule) for r in valid]
    gains = [r.gains(rule) for r in valid]
    raw = [g[0] for g in gains]
    norm = [g[1] for g in gains if g[1] is not None]
    return RuleSummary(
        accuracy=mean_stderr(accs) if len(accs) > 1 else None,
        raw_gain=mean_stderr(raw) if len(raw) > 1 else None,
        normalized_gain=mean_stderr(norm) if len(norm) > 1 else None,
        best_rate=best_selection_rate([r.hit_best(rule) for r in valid]),
        p_gain_below_zero=probability_below(raw),
        cdf=tuple(gain_cdf(raw)),
        runs=len(valid),
        invalid_runs=invalid,
    )


def aggregate_runs(runs: Sequence[RunRecord], rules: Sequence[str] | None = None) -> ReliabilityReport:
    """Reduce runs (any order) to per-rule means and standard errors."""
    if len(runs) < 2:
        raise ValueError("aggregation needs at least two runs")
    ordered = sorted(runs, key=RunRecord.sort_key)
    first = ordered[0]
    rules = sorted(rules if rules is not None else {rule for r in ordered for rule in r.chosen})
    baselines = {
        "best": mean_stderr([r.best for r in ordered]),
        "mean": mean_stderr([r.mean for r in ordered]),
        "worst": mean_stderr([r.worst for r in ordered]),
    }
    return ReliabilityReport(
        task=first.task,
        model=first.model,
        axis=first.axis,
        value=first.value,
        runs=len(ordered),
        baselines=baselines,
        rules={rule: summarize_rule(ordered, rule) for rule in rules},
    )


# ---------------------------------------------------------------------------
# studies and sweeps


@dataclass
class StudyTemplate:
    task: Task
    backends: Mapping[str, ScoringBackend]
    protocol: Protocol = field(default_factory=Protocol)
    seeds: Sequence[int] = (0, 1, 2, 3, 4)
    cache: dict = field(default_factory=dict)


@dataclass
class StudyResult:
    axis: str | None
    value: Any
    records: dict[str, list[RunRecord]]
    reports: dict[str, ReliabilityReport]
    transfer: dict[str, dict[str, dict[str, float | None]]]
    outputs: dict[str, list[RunOutput]]


def run_study(
    template: StudyTemplate,
    protocol: Protocol | None = None,
    axis: str | None = None,
    value: Any = None,
    keep_outputs: bool = False,
    progress: Callable[[str, int], None] | None = None,
) -> StudyResult:
    protocol = protocol or template.protocol
    records: dict[str, list[RunRecord]] = {}
    outputs: dict[str, list[RunOutput]] = {}
    for model, backend in template.backends.items():
        records[model] = []
        outputs[model] = []
        for seed in template.seeds:
            out = run_once(template.task, backend, protocol, seed, model=model, axis=axis, value=value, cache=template.cache)
            records[model].append(out.record)
            if keep_outputs:
                outputs[model].append(out)
            if progress:
                progress(model, seed)
    rules = protocol.rules()
    reports = {model: aggregate_runs(recs, rules) for model, recs in records.items() if len(recs) >= 2}
    transfer: dict[str, dict[str, dict[str, float | None]]] = {}
    models = list(records)
    for rule in rules:
        per_seed = []
        for i in range(len(template.seeds)):
            choices = {m: records[m][i].chosen.get(rule) for m in models}
            accs = {m: records[m][i].accuracies for m in models}
            per_seed.append(transfer_matrix(choices, accs))
        transfer[rule] = average_matrices(per_seed)
    for model, report in reports.items():
        reports[model] = replace(report, transfer=transfer)
    return StudyResult(axis, value, records, reports, transfer, outputs)


def sweep(axis: str, values: Sequence[Any], template: StudyTemplate, keep_outputs: bool = False) -> list[StudyResult]:
    """Re-run the study per axis value with the template's seeds."""
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    results = []
    base = template.protocol
    for value in values:
        if axis == "n":
            if int(value) > len(template.task.dataset) - 1:
                raise ValueError(f"N={value} leaves no test examples")
            protocol = replace(base, n=int(value))
        elif axis == "passes":
            protocol = replace(base, passes=int(value))
        else:
            criteria = base.criteria if CV_ALPHA in base.criteria else base.criteria + (CV_ALPHA,)
            protocol = replace(base, alphas=(float(value),), criteria=criteria)
        results.append(run_study(template, protocol, axis, value, keep_outputs))
    return results


def monte_carlo_nll_ratio(
    task: Task, backend: ScoringBackend, protocol: Protocol, seeds: Sequence[int], criterion: str = CV
) -> dict[str, float]:
    """Spread of a criterion across training draws versus its gap between candidates.

    Returns the mean over candidates of the across-draw std of the criterion,
    the gap between the mean candidate and the best candidate (by true
    quality, i.e. highest mean accuracy), and their ratio.
    """
    values: dict[str, list[float]] = {c.id: [] for c in task.candidates}
    accs: dict[str, list[float]] = {c.id: [] for c in task.candidates}
    for seed in seeds:
        out = run_once(task, backend, replace(protocol, criteria=(criterion,), alphas=()), seed)
        for cid, est in out.estimates[criterion].items():
            assert est is not None
            values[cid].append(est.mean)
            accs[cid].append(out.accuracies[cid].mean)
    means = {cid: float(np.mean(v)) for cid, v in values.items()}
    stds = {cid: float(np.std(v, ddof=1)) for cid, v in values.items()}
    best = max(accs, key=lambda c: np.mean(accs[c]))
    gap = float(np.mean(list(means.values())) - means[best])
    spread = float(np.mean(list(stds.values())))
    return {"std": spread, "gap": gap, "ratio": spread / gap if gap else math.inf}

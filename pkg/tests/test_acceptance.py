"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest
import yaml

from conftest import record_criterion
from oracles import bayes_cv_direct
from fewshot_select.cli import main
from fewshot_select.criteria import (
    bayes_posterior_weights,
    compute_bayes_cv,
    compute_cv,
    compute_mdl,
    compute_mdl_beta,
    estimate,
    position_losses,
)
from fewshot_select.harness import Protocol, StudyTemplate, Task, monte_carlo_nll_ratio, run_study
from fewshot_select.plans import plan_permutations
from fewshot_select.reports import gain_cdf, gain_statistics, transfer_matrix
from fewshot_select.scoring import SyntheticBackend, SyntheticTaskSpec, make_synthetic_task
from fewshot_select.selection import select_argmin, select_conservative
from fewshot_select.table import build_score_table, heldout_units, subsample_table
from fewshot_select.task import render_sequence, sample_train_set


def _random_instances(count=50, n=5, a=5, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(count):
        spec = SyntheticTaskSpec(
            qualities=tuple(rng.uniform(0.3, 0.9, a)),
            noise=float(rng.uniform(0.5, 2.5)),
            order_weight=float(rng.uniform(0.0, 1.0)),
            label_count=int(rng.integers(2, 5)),
            seed=int(rng.integers(0, 2**31)),
            num_examples=50,
        )
        ds, cands = make_synthetic_task(spec)
        backend = SyntheticBackend(spec, ds)
        train, _ = sample_train_set(ds, n, seed=i)
        yield ds, cands, backend, train, plan_permutations(n, 120, seed=i)


class _Rescorer:
    """Fresh single-sequence scoring of one example given an explicit context."""

    def __init__(self, backend, candidate, label_space):
        self.backend, self.candidate, self.space = backend, candidate, label_space
        self.memo = {}

    def __call__(self, examples):
        key = tuple(e.id for e in examples)
        if key not in self.memo:
            rendered = render_sequence(self.candidate, examples, label_space=self.space)
            self.memo[key] = self.backend.score_sequence(rendered).label_nll[-1]
        return self.memo[key]


def test_criterion_01_loocv_oracle():
    start = time.perf_counter()
    worst = 0.0
    for ds, cands, backend, train, plan in _random_instances():
        for cand in cands:
            table = build_score_table(cand, train, plan, backend, label_space=ds.label_space)
            score = _Rescorer(backend, cand, ds.label_space)
            # leave each example out in turn and score it after every order of the rest
            samples = []
            for held in range(5):
                # every order of the remaining four, then the held-out example
                for order in plan.orderings:
                    if order[-1] == held:
                        context = [train.examples[int(i)] for i in order[:-1]]
                        samples.append(score(context + [train.examples[held]]))
            ref = math.fsum(samples) / len(samples)
            worst = max(worst, abs(compute_cv(table).mean - ref))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and elapsed < 10
    record_criterion(1, "LOOCV equals brute-force leave-one-out", ok, f"max |diff| {worst:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_02_mdl_prefix():
    worst = 0.0
    for ds, cands, backend, train, plan in _random_instances():
        for cand in cands:
            table = build_score_table(cand, train, plan, backend, label_space=ds.label_space)
            score = _Rescorer(backend, cand, ds.label_space)
            samples = []
            for order in plan.orderings:
                exs = [train.examples[int(i)] for i in order]
                samples.append(math.fsum(score(exs[: k + 1]) for k in range(5)) / 5)
            worst = max(worst, abs(compute_mdl(table).mean - math.fsum(samples) / len(samples)))
    ds, cands, backend, train, plan = next(_random_instances(1, seed=7))
    table = build_score_table(cands[0], train, plan, backend, label_space=ds.label_space)
    first = position_losses(table, first_fold_uniform=True, label_count=2)[:, 0]
    exact = bool(np.all(first == math.log(2)))
    ok = worst <= 1e-9 and exact
    record_criterion(2, "MDL equals per-prefix re-scoring; uniform first fold costs ln 2", ok, f"max |diff| {worst:.2e}, ln2 exact={exact}")
    assert ok


def test_criterion_03_limits():
    same_beta0, cv_gap = True, 0.0
    for n in (2, 3, 5, 8, 10):
        budget = 120 if math.factorial(n) <= 120 or 120 % n == 0 else n * 12
        for ds, cands, backend, train, plan in _random_instances(4, n=n, seed=n):
            plan = plan_permutations(n, budget, n)
            table = build_score_table(cands[0], train, plan, backend, label_space=ds.label_space)
            same_beta0 &= compute_mdl_beta(table, 0.0).samples == compute_mdl(table).samples
            diff = np.abs(np.array(compute_mdl_beta(table, 50.0).samples) - np.array(compute_cv(table).samples))
            cv_gap = max(cv_gap, float(diff.max()))
    rng = np.random.default_rng(3)
    agree = 0
    for _ in range(1000):
        a = int(rng.integers(1, 12))
        ests = {f"c{j}": estimate("cv", rng.gamma(2.0, 0.5, int(rng.integers(2, 8)))) for j in range(a)}
        if rng.random() < 0.2:  # exact ties
            ests["c0b"] = ests["c0"]
        agree += select_conservative(ests, 0.0).chosen == select_argmin(ests).chosen
    ok = same_beta0 and cv_gap <= 1e-6 and agree == 1000
    record_criterion(3, "MDL_beta limits and alpha=0 selection", ok, f"beta=0 identical={same_beta0}, beta=50 max gap {cv_gap:.1e}, alpha=0 agree {agree}/1000")
    assert ok


def test_criterion_04_bayes_cv():
    worst_norm, worst_direct, single_exact = 0.0, 0.0, True
    for ds, cands, backend, train, plan in _random_instances(10, n=4, seed=4):
        plan = plan_permutations(4, 24, 0)
        table = build_score_table(cands[0], train, plan, backend, label_space=ds.label_space)
        for w in bayes_posterior_weights(table):
            worst_norm = max(worst_norm, abs(float(w.sum()) - 1.0))
        rows = {tuple(o): table.label_nll[i] for i, o in enumerate(table.orderings.tolist())}
        ref, _ = bayes_cv_direct(lambda order: list(rows[tuple(order)]), 4)
        worst_direct = max(worst_direct, abs(compute_bayes_cv(table).mean - ref))
        # one ordering per held-out unit: cyclic rotations
        rot = plan_permutations(4, 4, 1)
        t1 = build_score_table(cands[1], train, rot, backend, label_space=ds.label_space)
        single_exact &= sorted(compute_bayes_cv(t1).samples) == sorted(compute_cv(t1).samples)
    ok = worst_norm <= 1e-9 and worst_direct <= 1e-9 and single_exact
    record_criterion(4, "Bayesian CV weights, single-order reduction, direct formula", ok, f"|sum-1| {worst_norm:.1e}, direct diff {worst_direct:.1e}, single-order exact={single_exact}")
    assert ok


def test_criterion_05_permutation_plans():
    p5 = plan_permutations(5, 120, 0)
    distinct5 = len({tuple(r) for r in p5.orderings.tolist()})
    p10 = plan_permutations(10, 120, 0)
    counts = p10.position_counts()
    ok = distinct5 == 120 and len(p5) == 120 and bool((counts == 12).all())
    record_criterion(5, "permutation plans exhaustive at n=5, balanced at n=10", ok, f"{distinct5} distinct; n=10 counts in [{counts.min()}, {counts.max()}]")
    assert ok


def test_criterion_06_pass_accounting():
    ds, cands, backend, train, plan = next(_random_instances(1))
    table = build_score_table(cands[0], train, plan, backend, label_space=ds.label_space)
    passes_ok = table.passes == 120 and backend.counter.upstream == 120
    single_ok = True
    for i in range(table.n_orderings):
        one = subsample_table(table, 1, seed=i)
        est = compute_mdl(one)
        single_ok &= est.count == 1 and est.mean == pytest.approx(float(np.mean(one.label_nll[0])), abs=1e-12)
    # CV touches every fold only once orderings cover all final positions
    cover_small = max(len(heldout_units(subsample_table(table, p, s))) for p in range(1, 5) for s in range(20))
    rotations = plan_permutations(5, 5, 0)
    rot_table = build_score_table(cands[0], train, rotations, backend, label_space=ds.label_space)
    ok = passes_ok and single_ok and cover_small < 5 and heldout_units(rot_table) == set(range(5)) and rot_table.passes == 5
    record_criterion(6, "pass accounting: 120 passes, single-pass MDL, CV needs n orderings", ok, f"passes {table.passes}, max folds touched with <5 orderings {cover_small}")
    assert ok


CALIBRATED = SyntheticTaskSpec(qualities=tuple(np.linspace(0.5, 0.7, 12)), noise=1.0, order_weight=0.5, seed=0, num_examples=1000)


@pytest.fixture(scope="module")
def calibrated_study():
    ds, cands = make_synthetic_task(CALIBRATED)
    backend = SyntheticBackend(CALIBRATED, ds)
    task = Task("calibrated", ds, tuple(cands))
    start = time.perf_counter()
    result = run_study(StudyTemplate(task, {"synthetic": backend}, Protocol(criteria=("cv", "mdl")), tuple(range(1000))))
    elapsed = time.perf_counter() - start
    ratio = monte_carlo_nll_ratio(task, SyntheticBackend(CALIBRATED, ds), Protocol(criteria=("cv",)), range(100))
    return result, elapsed, ratio


def test_criterion_07_qualitative_reproduction(calibrated_study):
    result, elapsed, ratio = calibrated_study
    report = result.reports["synthetic"]
    a = len(CALIBRATED.qualities)
    parts, ok = [], elapsed < 120 and 0.5 <= ratio["ratio"] <= 2.0
    for rule in ("cv", "mdl"):
        s = report.rules[rule]
        gain, below, rate = s.normalized_gain.mean, s.p_gain_below_zero, s.best_rate[0]
        ok &= 10 <= gain <= 60 and below >= 0.10 and 1 / a < rate < 0.8
        parts.append(f"{rule}: norm gain {gain:.1f}, P(gain<0) {below:.3f}, best-rate {rate:.3f}")
    detail = "; ".join(parts) + f"; NLL std/gap {ratio['ratio']:.2f}; {report.runs} runs in {elapsed:.1f}s"
    record_criterion(7, "qualitative selection reliability on calibrated oracle", ok, detail)
    assert ok


def test_criterion_08_oracle_and_random_rules(calibrated_study):
    result, _, _ = calibrated_study
    runs = result.records["synthetic"]
    report = result.reports["synthetic"]
    oracle_ok = report.rules["test"].best_rate[0] == 1.0 and all(r.gains("test")[1] == pytest.approx(100.0) for r in runs)
    rnd = report.rules["random"].raw_gain
    random_ok = abs(rnd.mean) <= 3 * rnd.stderr
    ok = oracle_ok and random_ok and len(runs) >= 1000
    record_criterion(8, "oracle rule always best; random rule unbiased", ok, f"oracle best-rate {report.rules['test'].best_rate[0]:.3f}; random raw gain {rnd.mean:+.4f} +/- {rnd.stderr:.4f}")
    assert ok


def test_criterion_09_record_replay(tmp_path):
    config = {
        "task": {"name": "replayed"},
        "backends": [
            {"name": "m1", "kind": "synthetic", "synthetic": {"qualities": [0.55, 0.6, 0.65, 0.7], "seed": 1, "num_examples": 300}},
        ],
        "protocol": {"criteria": ["cv", "mdl", "mdl_beta", "bayes_cv", "cv_joint", "mdl_joint", "cv_alpha"], "alphas": [0, 1, 2]},
        "study": {"seeds": [0, 1, 2], "sweep": {"axis": "passes", "values": [5, 120]}},
        "out": "out",
    }
    path = tmp_path / "study.yaml"
    path.write_text(yaml.safe_dump(config))
    store = tmp_path / "store.jsonl"
    rc1 = main(["study", "--config", str(path), "--record", str(store), "--out", str(tmp_path / "rec")])
    rc2 = main(["study", "--config", str(path), "--replay", str(store), "--out", str(tmp_path / "rep")])

    def reports(root):
        return {
            str(p.relative_to(root)): p.read_bytes()
            for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "passes.json" and p.suffix != ".yaml"
        }

    rec, rep = reports(tmp_path / "rec"), reports(tmp_path / "rep")
    passes = json.loads((tmp_path / "rep" / "replayed" / "passes.json").read_text())["passes"]
    upstream = sum(p["upstream"] for p in passes.values())
    ok = rc1 == 0 and rc2 == 0 and rec == rep and len(rec) > 10 and upstream == 0
    record_criterion(9, "record then replay gives byte-identical reports", ok, f"{len(rec)} files identical={rec == rep}, replay upstream passes {upstream}")
    assert ok


def test_criterion_10_report_math():
    accs = [0.42, 0.55, 0.61, 0.70]
    mean = sum(accs) / 4
    endpoints = gain_statistics(mean, accs)[1] == pytest.approx(0.0, abs=1e-12) and gain_statistics(0.70, accs)[1] == pytest.approx(100.0)
    cdf = gain_cdf([0.1, -0.1, 0.0, 0.0, 0.3])
    ps = [p for _, p in cdf]
    cdf_ok = ps == sorted(ps) and ps[-1] == 1.0 and ps[0] > 0 and cdf == [(-0.1, 0.2), (0.0, 0.6), (0.1, 0.8), (0.3, 1.0)]
    fixture = {"m1": {"a": 0.5, "b": 0.6, "c": 0.7}, "m2": {"a": 0.9, "b": 0.7, "c": 0.5}}
    m = transfer_matrix({"m1": "c", "m2": "c"}, fixture)
    transfer_ok = (
        m["m1"]["m1"] == pytest.approx(100.0)
        and m["m1"]["m2"] == pytest.approx(100 * (0.5 - 0.7) / (0.9 - 0.7))
        and m["m2"]["m1"] == pytest.approx(100.0)
        and transfer_matrix({"m1": "b"}, {"m1": fixture["m1"]})["m1"]["m1"] == pytest.approx(0.0, abs=1e-12)
    )
    ok = bool(endpoints and cdf_ok and transfer_ok)
    record_criterion(10, "gain endpoints, CDF shape, transfer scaling", ok, f"endpoints={bool(endpoints)}, cdf={cdf_ok}, transfer={bool(transfer_ok)}")
    assert ok

import random

import pytest

from conftest import GenericOnly, synthetic_setup
from oracles import mean_and_stderr
from fewshot_select.harness import (
    Protocol,
    StudyTemplate,
    Task,
    aggregate_runs,
    assign_test_examples,
    estimate_test_accuracy,
    run_once,
    run_study,
    sweep,
)
from fewshot_select.plans import plan_permutations
from fewshot_select.scoring import ScoringBackend
from fewshot_select.scoring.base import LabelScore
from fewshot_select.task import sample_train_set


def _task(**kw):
    spec, ds, cands, backend = synthetic_setup(**kw)
    return Task("t", ds, tuple(cands)), backend


class TestAccuracy:
    def test_perfect_oracle(self):
        spec, ds, cands, backend = synthetic_setup(qualities=(1.0,), noise=0.0)
        train, pool = sample_train_set(ds, 5, 0)
        plan = plan_permutations(5, 120, 0)
        acc = estimate_test_accuracy(cands[0], train, plan, pool, backend, 0, label_space=ds.label_space)
        assert acc.mean == 1.0 and acc.stderr == 0.0

    def test_distinct_tests_and_disjoint_from_train(self):
        spec, ds, cands, backend = synthetic_setup(num_examples=205)
        train, pool = sample_train_set(ds, 5, 0)
        plan = plan_permutations(5, 120, 0)
        acc = estimate_test_accuracy(cands[0], train, plan, pool, backend, 0, label_space=ds.label_space)
        ids = [r.example_id for r in acc.outcomes]
        assert len(ids) == 120 and len(set(ids)) == 120
        assert not set(ids) & set(train.ids)
        assert [r.ordering for r in acc.outcomes] == list(range(120))

    def test_with_replacement_after_pool_exhausted(self):
        spec, ds, *_ = synthetic_setup(num_examples=20)
        picked = assign_test_examples(ds.examples[:7], 10, seed=0)
        assert len(picked) == 10 and len({e.id for e in picked[:7]}) == 7
        with pytest.raises(ValueError):
            assign_test_examples((), 3, 0)

    def test_half_right(self):
        spec, ds, cands, _ = synthetic_setup()
        train, pool = sample_train_set(ds, 2, 0)
        plan = plan_permutations(2, 2, 0)
        tests = assign_test_examples(pool, 2, 0)

        class Alternating(ScoringBackend):
            calls = 0

            def score_labels(self, rendered, labels, purpose="criterion"):
                gold = tests[self.calls].primary_label
                other = next(lid for lid, _ in labels if lid != gold)
                pick = gold if self.calls == 0 else other
                self.calls += 1
                ids = tuple(lid for lid, _ in labels)
                return LabelScore(ids, tuple(0.0 for _ in ids), tuple(0.0 for _ in ids), pick)

        acc = estimate_test_accuracy(cands[0], train, plan, pool, Alternating(), 0, label_space=ds.label_space)
        assert acc.mean == 0.5

    def test_bulk_and_generic_predictions_agree(self):
        spec, ds, cands, backend = synthetic_setup(label_count=3)
        train, pool = sample_train_set(ds, 5, 1)
        plan = plan_permutations(5, 30, 1)
        a = estimate_test_accuracy(cands[1], train, plan, pool, backend, 1, label_space=ds.label_space)
        b = estimate_test_accuracy(cands[1], train, plan, pool, GenericOnly(backend), 1, label_space=ds.label_space)
        assert a.outcomes == b.outcomes


class TestRunOnce:
    def test_invariants(self):
        task, backend = _task(qualities=(0.5, 0.6, 0.7, 0.55))
        protocol = Protocol(criteria=("cv", "mdl", "mdl_beta", "bayes_cv", "cv_joint", "mdl_joint", "cv_alpha"))
        for seed in range(5):
            rec = run_once(task, backend, protocol, seed).record
            assert rec.worst <= rec.mean <= rec.best
            for rule in rec.chosen:
                assert rec.worst <= rec.chosen_accuracy(rule) <= rec.best
                raw, norm = rec.gains(rule)
                assert norm is None or norm <= 100 + 1e-9
            assert rec.gains("test")[1] == pytest.approx(100.0)
            assert set(rec.chosen) == set(protocol.rules())

    def test_test_passes_are_separate(self):
        task, backend = _task()
        run_once(task, backend, Protocol(), 0)
        by = backend.counter.by_purpose()
        assert by["criterion"] == 3 * 120
        assert by["test"] == 3 * 120 * 2

    def test_folds_protocol(self):
        task, backend = _task()
        out = run_once(task, backend, Protocol(n=6, k=3), 0)
        assert all(t.label_nll.shape == (6, 3) for t in out.tables.values())

    def test_incomplete_criterion_marks_run_invalid(self):
        task, backend = _task()
        out = run_once(task, backend, Protocol(criteria=("bayes_cv", "mdl"), passes=2), 0)
        assert out.record.chosen["bayes_cv"] is None
        assert out.record.chosen["mdl"] is not None
        runs = [run_once(task, backend, Protocol(criteria=("bayes_cv",), passes=2), s).record for s in range(3)]
        report = aggregate_runs(runs)
        assert report.rules["bayes_cv"].invalid_runs == 3 and report.rules["bayes_cv"].runs == 0


class TestStudy:
    def _template(self, seeds=range(6), **kw):
        task, backend = _task(**kw)
        return StudyTemplate(task, {"m": backend}, Protocol(criteria=("cv", "mdl", "cv_alpha")), tuple(seeds))

    def test_aggregate_matches_reference(self):
        res = run_study(self._template())
        runs = res.records["m"]
        report = res.reports["m"]
        mean, se = mean_and_stderr([r.chosen_accuracy("cv") for r in runs])
        assert report.rules["cv"].accuracy.mean == pytest.approx(mean, abs=1e-12)
        assert report.rules["cv"].accuracy.stderr == pytest.approx(se, abs=1e-12)
        assert report.rules["test"].best_rate == (1.0, 0.0)

    def test_order_invariance(self):
        runs = run_study(self._template()).records["m"]
        shuffled = list(runs)
        random.Random(3).shuffle(shuffled)
        assert aggregate_runs(runs).to_json() == aggregate_runs(shuffled).to_json()

    def test_needs_two_runs(self):
        runs = run_study(self._template(seeds=[0, 1])).records["m"]
        with pytest.raises(ValueError):
            aggregate_runs(runs[:1])

    def test_alpha_sweep(self):
        results = sweep("alpha", [0.0, 1.0, 2.0, 3.0], self._template())
        assert len(results) == 4
        base = results[0].reports["m"].rules
        assert base["cv_alpha=0"] == base["cv"]

    def test_passes_sweep_at_max_equals_full(self):
        tmpl = self._template()
        full = run_study(tmpl).reports["m"]
        at_max = sweep("passes", [120], tmpl)[0].reports["m"]
        assert at_max.rules == full.rules

    def test_n_sweep_deterministic(self):
        a = [r.reports["m"].to_json() for r in sweep("n", [5, 10], self._template(seeds=[0, 1, 2]))]
        b = [r.reports["m"].to_json() for r in sweep("n", [5, 10], self._template(seeds=[0, 1, 2]))]
        assert a == b

    def test_n_sweep_infeasible(self):
        with pytest.raises(ValueError):
            sweep("n", [500], self._template())
        with pytest.raises(ValueError):
            sweep("bogus", [1], self._template())

    def test_transfer_across_models(self):
        spec_a, ds, cands, a = synthetic_setup(qualities=(0.5, 0.6, 0.7), seed=0)
        _, _, _, b = synthetic_setup(qualities=(0.7, 0.6, 0.5), seed=0)
        tmpl = StudyTemplate(Task("t", ds, tuple(cands)), {"a": a, "b": b}, Protocol(criteria=("cv",)), (0, 1, 2))
        res = run_study(tmpl)
        m = res.transfer["test"]
        assert m["a"]["a"] == pytest.approx(100.0) and m["b"]["b"] == pytest.approx(100.0)
        assert m["a"]["b"] < 0 and m["b"]["a"] < 0

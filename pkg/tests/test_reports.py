import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import mean_and_stderr
from fewshot_select.reports import (
    average_matrices,
    best_selection_rate,
    gain_cdf,
    gain_statistics,
    mean_stderr,
    probability_below,
    transfer_matrix,
)


class TestGain:
    def test_endpoints(self):
        accs = [0.2, 0.5, 0.8]
        assert gain_statistics(0.8, accs)[1] == pytest.approx(100.0)
        assert gain_statistics(0.5, accs)[1] == pytest.approx(0.0)

    def test_hand_example(self):
        raw, norm = gain_statistics(0.3, [0.2, 0.3, 0.4])
        assert raw == pytest.approx(0.0, abs=1e-15) and norm == pytest.approx(0.0, abs=1e-12)

    def test_degenerate(self):
        assert gain_statistics(0.5, [0.5, 0.5])[1] is None
        assert gain_statistics(0.5, [0.5])[1] is None


class TestRates:
    def test_all_best(self):
        assert best_selection_rate([True] * 5) == (1.0, 0.0)

    def test_two_of_five(self):
        p, se = best_selection_rate([True, False, True, False, False])
        assert p == 0.4 and se == pytest.approx(math.sqrt(0.4 * 0.6 / 5))


class TestCDF:
    def test_three_points(self):
        assert gain_cdf([0.1, -0.1, 0.0]) == [(-0.1, 1 / 3), (0.0, 2 / 3), (0.1, 1.0)]

    def test_single_step(self):
        assert gain_cdf([0.2, 0.2, 0.2]) == [(0.2, 1.0)]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-1, 1, allow_nan=False), min_size=1, max_size=60))
    def test_monotone_to_one(self, gains):
        pts = gain_cdf(gains)
        xs = [x for x, _ in pts]
        ps = [p for _, p in pts]
        assert xs == sorted(set(xs))
        assert all(0 < p <= 1 for p in ps)
        assert all(b > a for a, b in zip(ps, ps[1:]))
        assert ps[-1] == 1.0
        assert probability_below(gains, xs[0]) == 0.0


class TestAggregate:
    def test_hand(self):
        ms = mean_stderr([0.4, 0.6])
        assert ms.mean == pytest.approx(0.5) and ms.stderr == pytest.approx(0.1)

    def test_identical(self):
        assert mean_stderr([0.3] * 5).stderr == 0.0

    def test_needs_two(self):
        with pytest.raises(ValueError):
            mean_stderr([1.0])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=40), st.randoms())
    def test_matches_reference_and_order_free(self, values, rnd):
        ms = mean_stderr(values)
        ref_mean, ref_se = mean_and_stderr(values)
        assert ms.mean == pytest.approx(ref_mean, abs=1e-12)
        assert ms.stderr == pytest.approx(ref_se, abs=1e-9)
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert mean_stderr(shuffled) == ms


class TestTransfer:
    ACCS = {
        "small": {"p1": 0.50, "p2": 0.60, "p3": 0.70},
        "large": {"p1": 0.80, "p2": 0.65, "p3": 0.65},
    }

    def test_hand_computation(self):
        m = transfer_matrix({"small": "p3", "large": "p1"}, self.ACCS)
        # small: mean 0.6, best 0.7 ; large: mean 0.7, best 0.8
        assert m["small"]["small"] == pytest.approx(100.0)
        assert m["small"]["large"] == pytest.approx(100 * (0.65 - 0.7) / 0.1)
        assert m["large"]["small"] == pytest.approx(100 * (0.5 - 0.6) / 0.1)
        assert m["large"]["large"] == pytest.approx(100.0)

    def test_oracle_choice_diagonal_is_100(self):
        choice = {m: max(a, key=a.get) for m, a in self.ACCS.items()}
        m = transfer_matrix(choice, self.ACCS)
        assert all(m[k][k] == pytest.approx(100.0) for k in self.ACCS)

    def test_single_candidate_absent(self):
        m = transfer_matrix({"a": "p"}, {"a": {"p": 0.4}})
        assert m["a"]["a"] is None

    def test_mismatch(self):
        with pytest.raises(ValueError):
            transfer_matrix({"a": "p"}, {"a": {"p": 0.4}, "b": {"q": 0.4}})

    def test_average(self):
        a = {"x": {"x": 100.0, "y": None}}
        b = {"x": {"x": 50.0, "y": 20.0}}
        assert average_matrices([a, b]) == {"x": {"x": 75.0, "y": 20.0}}

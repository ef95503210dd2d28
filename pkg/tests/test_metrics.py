import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supcascade.cascade import CascadeOutcome, Decision
from supcascade.metrics import (
    CostModel,
    LatencyModel,
    MetricError,
    RacCurve,
    acceptance_rate,
    auc_rac,
    break_even_fraction,
    correctness_arrays,
    cost_report,
    csv_table,
    false_positive_rate,
    mean_latency,
    rac_curve,
    rac_curve_for,
    rac_summary,
    random_auc_baseline,
    s_beta,
    supervised_accuracy,
    supervised_report,
    system_accuracy_at,
)
from supcascade.quantifiers import max_softmax
from supcascade.trace import synthesize_trace, without_remote

from oracles import brute_auc, brute_system_accuracy

FOUR = ([0.9, 0.1, 0.8, 0.2], [True, False, True, False], [True, True, True, True])


def msp(obs):
    return max_softmax(obs.softmax)


def outcome(decision, correct=None, would_be=None, remote=False, cost=0.0):
    if would_be is None and decision is not Decision.REJECTED:
        would_be = correct
    return CascadeOutcome("x", decision, None, correct, 0.5, None, 0.0, cost, remote, would_be)


class TestSystemAccuracy:
    def test_four_record_fixture(self):
        assert system_accuracy_at(*FOUR, 2) == 1.0
        assert system_accuracy_at(*FOUR, 0) == 0.5
        assert system_accuracy_at(*FOUR, 4) == 1.0

    def test_range(self):
        with pytest.raises(MetricError):
            system_accuracy_at(*FOUR, 5)

    def test_ties_by_index(self):
        # equal confidences: the lower index is forwarded first
        assert system_accuracy_at([0.5, 0.5], [False, True], [True, False], 1) == 1.0


class TestRacCurve:
    def test_single_record(self):
        curve = rac_curve([0.3], [False], [True])
        assert curve.r.tolist() == [0.0, 1.0]
        assert curve.accuracy.tolist() == [0.0, 1.0]
        assert auc_rac(curve) == 0.5

    def test_flat(self):
        lc = [True, False, True]
        curve = rac_curve([0.1, 0.2, 0.3], lc, lc)
        assert np.all(curve.accuracy == curve.accuracy[0])
        with pytest.raises(MetricError, match="undefined"):
            auc_rac(curve)

    def test_grid(self):
        curve = rac_curve(*FOUR)
        assert curve.n == 4 and len(curve.r) == 5
        assert np.all(np.diff(curve.r) > 0)

    def test_matches_brute_force_1000(self, trace_1000):
        conf, lc, rc = correctness_arrays(trace_1000, msp)
        curve = rac_curve(conf, lc, rc)
        n = len(conf)
        # sampled grid points plus both ends against the quadratic oracle
        for i in list(range(0, n + 1, 37)) + [n]:
            assert Fraction(int(curve.correct_counts[i]), n) == brute_system_accuracy(conf, lc, rc, i)

    def test_endpoints(self, trace_1000):
        curve = rac_curve_for(trace_1000, msp)
        assert curve.accuracy[0] == 0.7
        assert curve.accuracy[-1] == 0.9

    def test_missing_remote(self, trace_1000):
        with pytest.raises(MetricError, match="'r000'"):
            correctness_arrays(without_remote(trace_1000), msp)

    def test_csv(self):
        text = rac_curve(*FOUR).to_csv()
        lines = text.splitlines()
        assert lines[0] == "r,accuracy"
        assert len(lines) == 6
        assert lines[1] == "0.000000,0.5"
        assert lines[2].startswith("0.250000,")


class TestAuc:
    def test_linear_curve_is_half(self):
        counts = np.arange(0, 11)
        assert auc_rac(RacCurve.from_counts(counts)) == 0.5

    def test_four_record_oracle(self):
        curve = rac_curve(*FOUR)
        assert auc_rac(curve) == float(brute_auc(*FOUR))
        # grid 0.5, 0.75, 1, 1, 1 -> mean 0.85 -> (0.85 - 0.5) / 0.5
        assert auc_rac(curve) == pytest.approx(0.7, abs=1e-15)

    def test_can_go_below_zero(self):
        # forwarding the locally-correct records first is worse than all-local
        curve = rac_curve([0.1, 0.2, 0.3, 0.4], [True, True, False, False], [False, True, True, True])
        assert curve.correct_counts.tolist() == [2, 1, 1, 2, 3]
        assert auc_rac(curve) == pytest.approx(-0.2, abs=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 8).flatmap(lambda n: st.tuples(
        st.lists(st.integers(0, 3), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n))))
    def test_streaming_equals_oracle(self, case):
        conf, lc, rc = case
        if sum(lc) == sum(rc):
            return
        assert Fraction(auc_rac(rac_curve(conf, lc, rc))) == Fraction(float(brute_auc(conf, lc, rc)))


def imdb_shaped_arrays():
    """100 records sorted by confidence: remote-even at r=0.55, peak at r=0.68."""
    gain = np.zeros(100, dtype=int)
    gain[45:55] = 1
    gain[66:68] = 1
    gain[98:100] = -1
    lc = np.ones(100, dtype=bool)
    rc = np.ones(100, dtype=bool)
    lc[gain == 1] = False
    rc[gain == -1] = False
    both_wrong = np.flatnonzero(gain == 0)[:8]
    lc[both_wrong] = rc[both_wrong] = False
    return np.arange(100) / 100, lc, rc


class TestSummary:
    def test_imdb_shape(self):
        summary = rac_summary(rac_curve(*imdb_shaped_arrays()))
        assert summary.acc_local == 0.8 and summary.acc_remote == 0.9
        assert summary.r_remote_even == 0.55
        assert summary.r_peak == 0.68
        assert summary.acc_peak == 0.92
        assert summary.superaccurate
        assert set(summary.to_dict()) == {
            "auc", "acc_local", "acc_remote", "r_peak", "acc_peak", "r_remote_even", "superaccurate"}

    def test_monotone(self):
        summary = rac_summary(RacCurve.from_counts([3, 4, 5, 6]))
        assert summary.r_peak == 1.0
        assert summary.r_remote_even == 1.0
        assert not summary.superaccurate

    def test_interior_max(self):
        summary = rac_summary(RacCurve.from_counts([1, 3, 3, 2]))
        assert summary.superaccurate
        assert summary.r_peak == pytest.approx(1 / 3)
        assert summary.acc_peak >= max(summary.acc_local, summary.acc_remote)


class TestRandomBaseline:
    def test_deterministic(self, trace_1000):
        _, lc, rc = correctness_arrays(trace_1000, msp)
        a = random_auc_baseline(lc, rc, seed=3, repeats=1)
        b = random_auc_baseline(lc, rc, seed=3, repeats=1)
        assert a[0] == b[0]
        assert math.isnan(a[1])
        assert random_auc_baseline(lc, rc, seed=4, repeats=1)[0] != a[0]

    def test_repeatable(self, trace_1000):
        _, lc, rc = correctness_arrays(trace_1000, msp)
        assert random_auc_baseline(lc, rc, seed=1, repeats=300) == random_auc_baseline(lc, rc, seed=1, repeats=300)

    def test_near_half(self, trace_1000):
        _, lc, rc = correctness_arrays(trace_1000, msp)
        mean, se = random_auc_baseline(lc, rc, seed=0, repeats=500)
        assert abs(mean - 0.5) < 5 * se + 1e-3

    def test_matches_direct_auc(self):
        lc = np.array([True, False, False, True, False])
        rc = np.array([True, True, True, False, True])
        mean, _ = random_auc_baseline(lc, rc, seed=9, repeats=1)
        # reproduce the one permutation and score it through the curve
        rng = np.random.default_rng(np.random.SeedSequence(9).spawn(1)[0])
        perm = rng.permuted(np.tile(np.arange(5), (1, 1)), axis=1)[0]
        conf = np.empty(5)
        conf[perm] = np.arange(5)
        assert mean == pytest.approx(auc_rac(rac_curve(conf, lc, rc)), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(MetricError):
            random_auc_baseline([True, False], [True, False])

    def test_repeats(self):
        with pytest.raises(MetricError):
            random_auc_baseline([True], [False], repeats=0)


class TestSupervised:
    def test_accuracy(self):
        assert supervised_accuracy([outcome(Decision.LOCAL_ACCEPT, True)] * 3) == 1
        outs = [outcome(Decision.LOCAL_ACCEPT, True)] * 6 + [outcome(Decision.REMOTE_ACCEPT, False)] * 2
        outs += [outcome(Decision.REJECTED, would_be=True)] * 2
        assert supervised_accuracy(outs) == 0.75
        with pytest.raises(MetricError):
            supervised_accuracy([outcome(Decision.REJECTED)])

    def test_acceptance(self):
        ok = outcome(Decision.LOCAL_ACCEPT, True)
        rej = outcome(Decision.REJECTED)
        assert acceptance_rate([ok] * 5) == 1
        assert acceptance_rate([ok] * 98 + [rej] * 2) == 0.98
        assert acceptance_rate([rej] * 4) == 0
        with pytest.raises(MetricError):
            acceptance_rate([])

    def test_fpr(self):
        assert false_positive_rate([outcome(Decision.LOCAL_ACCEPT, True)] * 4) == 0
        only_remote = [outcome(Decision.REJECTED, would_be=True)] * 3 + [outcome(Decision.LOCAL_ACCEPT, False)]
        assert false_positive_rate(only_remote) == 1
        hundred = (
            [outcome(Decision.LOCAL_ACCEPT, True)] * 78
            + [outcome(Decision.REJECTED, would_be=True)] * 2
            + [outcome(Decision.REMOTE_ACCEPT, False)] * 15
            + [outcome(Decision.REJECTED, would_be=False)] * 5
        )
        assert false_positive_rate(hundred) == 0.025
        with pytest.raises(MetricError):
            false_positive_rate([outcome(Decision.LOCAL_ACCEPT, False)])

    def test_report(self):
        outs = [outcome(Decision.LOCAL_ACCEPT, True)] * 6 + [outcome(Decision.REMOTE_ACCEPT, False, remote=True)] * 2
        outs += [outcome(Decision.REJECTED, would_be=True, remote=True)] * 2
        rep = supervised_report(outs)
        assert rep.delta == 0.8
        assert rep.supervised_accuracy == 0.75
        assert rep.remote_fraction == 0.4
        assert rep.fpr == 0.25
        d = rep.to_dict(0.1)
        assert set(d["s_beta"]) == {"0.5", "1", "2"}
        assert d["fpr_target"] == 0.1


class TestSBeta:
    @pytest.mark.parametrize("beta, printed", [(0.5, 0.83), (1.0, 0.88), (2.0, 0.94)])
    def test_printed_row(self, beta, printed):
        assert abs(s_beta(0.80, 0.98, beta) - printed) <= 0.01

    @given(st.floats(0, 1), st.floats(0.1, 5))
    def test_equal_inputs(self, a, beta):
        assert s_beta(a, a, beta) == pytest.approx(a, abs=1e-12)

    @given(st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.01, 1), st.floats(0.1, 5))
    def test_strictly_increasing(self, acc, delta, other, beta):
        if other > acc:
            assert s_beta(other, delta, beta) > s_beta(acc, delta, beta)
        if other > delta:
            assert s_beta(acc, other, beta) > s_beta(acc, delta, beta)

    def test_bounded_by_inputs(self):
        assert 0.8 <= s_beta(0.8, 0.98, 1) <= 0.98

    def test_beta_weights_acceptance(self):
        assert s_beta(0.8, 0.98, 2) > s_beta(0.8, 0.98, 1) > s_beta(0.8, 0.98, 0.5)

    def test_zero(self):
        assert s_beta(0.0, 0.0, 1) == 0.0

    @pytest.mark.parametrize("args", [(1.2, 0.5, 1), (0.5, -0.1, 1), (0.5, 0.5, 0)])
    def test_invalid(self, args):
        with pytest.raises(MetricError):
            s_beta(*args)


class TestLatency:
    def test_imdb(self):
        m = LatencyModel(0.05, 0.32)
        assert mean_latency(0.55, m) == pytest.approx(0.226)
        assert abs(mean_latency(0.55, m) - 0.23) <= 0.005

    def test_issues(self):
        m = LatencyModel(0.09, 1.08)
        assert mean_latency(0.30, m) == pytest.approx(0.414)
        assert break_even_fraction(m) == pytest.approx(0.916667, abs=1e-6)

    def test_zero_remote_fraction(self):
        assert mean_latency(0.0, LatencyModel(0.07, 1.0)) == 0.07

    def test_break_even(self):
        assert break_even_fraction(LatencyModel(0.0, 2.0)) == 1.0
        assert break_even_fraction(LatencyModel(0.02, 0.68)) == pytest.approx(0.970588, abs=1e-6)
        with pytest.raises(MetricError):
            break_even_fraction(LatencyModel(0.5, 0.5))

    @given(st.floats(0, 10), st.floats(0.001, 10))
    def test_break_even_round_trip(self, tl, extra):
        m = LatencyModel(tl, tl + extra)
        assert mean_latency(break_even_fraction(m), m) == pytest.approx(m.latency_remote, abs=1e-12, rel=1e-12)

    def test_invalid(self):
        with pytest.raises(MetricError):
            mean_latency(1.1, LatencyModel(0.1, 1))
        with pytest.raises(MetricError):
            LatencyModel(-1, 1)
        with pytest.raises(MetricError):
            CostModel(-0.1)


class TestCost:
    def test_savings(self):
        outs = [outcome(Decision.REMOTE_ACCEPT, True, remote=True, cost=0.01)] * 55
        outs += [outcome(Decision.LOCAL_ACCEPT, True)] * 45
        rep = cost_report(outs)
        assert rep["remote_calls"] == 55
        assert rep["saved_fraction"] == pytest.approx(0.45)
        assert rep["total_cost"] == pytest.approx(0.55)
        assert cost_report(outs, CostModel(0.02))["total_cost"] == pytest.approx(1.1)

    def test_extremes(self):
        assert cost_report([outcome(Decision.LOCAL_ACCEPT, True)] * 3)["saved_fraction"] == 1
        assert cost_report([outcome(Decision.REMOTE_ACCEPT, True, remote=True)] * 3)["saved_fraction"] == 0
        with pytest.raises(MetricError):
            cost_report([])


def test_csv_table():
    text = csv_table([{"a": 1, "b": "x"}, {"a": 2, "b": "y"}], ["a", "b"])
    assert text == "a,b\n1,x\n2,y\n"


def test_synthetic_complementarity_makes_superaccurate():
    ds = synthesize_trace(1000, 0.7, 0.9, seed=7)
    summary = rac_summary(rac_curve_for(ds, msp))
    assert summary.acc_peak >= summary.acc_remote

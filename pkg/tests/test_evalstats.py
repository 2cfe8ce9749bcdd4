import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from angiokit.errors import UndefinedMetricError, ValidationError
from angiokit.evalstats import (
    ScoredSamples,
    auprc,
    auroc,
    bootstrap_ci,
    delong_test,
    micro_average,
    regression_metrics,
    risk_tertiles,
    welch_t_test,
    youden_operating_point,
)
from angiokit.numerics import Rng


def samples(scores, labels, patients=None):
    scores = np.asarray(scores, dtype=float)
    if patients is None:
        patients = [f"P{i}" for i in range(len(scores))]
    return ScoredSamples(
        patient_ids=np.asarray(patients), scores=scores, labels=np.asarray(labels, bool)
    )


# --- independent oracles -----------------------------------------------------


def auroc_bruteforce(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else (0.5 if p == n else 0.0)
    return total / (len(pos) * len(neg))


def auprc_bruteforce(scores, labels):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    tp = 0
    out = []
    for rank, i in enumerate(order, start=1):
        if labels[i]:
            tp += 1
            out.append(tp / rank)
    return math.fsum(out) / len(out)


def youden_bruteforce(scores, labels):
    best = None
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    for t in sorted(set(scores)):
        tp = sum(1 for s, l in zip(scores, labels) if l and s >= t)
        fp = sum(1 for s, l in zip(scores, labels) if not l and s >= t)
        sens = tp / n_pos
        spec = (n_neg - fp) / n_neg
        j = sens + spec - 1
        if best is None or j > best[0] + 1e-15:
            best = (j, t, sens, spec)
    return best


def delong_variance_bruteforce(a, b, labels):
    pos = [i for i, l in enumerate(labels) if l]
    neg = [i for i, l in enumerate(labels) if not l]

    def psi(x, y):
        return 1.0 if x > y else (0.5 if x == y else 0.0)

    def components(s):
        v10 = [np.mean([psi(s[i], s[j]) for j in neg]) for i in pos]
        v01 = [np.mean([psi(s[i], s[j]) for i in pos]) for j in neg]
        return np.array(v10), np.array(v01)

    v10a, v01a = components(a)
    v10b, v01b = components(b)

    def cov(x, y):
        if len(x) < 2:
            return 0.0
        return float(np.cov(x, y, ddof=1)[0, 1])

    m, n = len(pos), len(neg)
    return (cov(v10a, v10a) + cov(v10b, v10b) - 2 * cov(v10a, v10b)) / m + (
        cov(v01a, v01a) + cov(v01b, v01b) - 2 * cov(v01a, v01b)
    ) / n


# --- AUROC -------------------------------------------------------------------


class TestAuroc:
    def test_hand_example(self):
        s = samples([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
        assert auroc(s) == 0.75

    def test_perfectly_separated(self):
        assert auroc(samples([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1])) == 1.0

    def test_all_ties(self):
        assert auroc(samples([0.5] * 6, [0, 1, 0, 1, 0, 1])) == 0.5

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError, match="undefined AUROC"):
            auroc(samples([0.1, 0.2], [1, 1]))

    def test_exact_and_rank_paths_agree(self):
        rng = Rng(100)
        # large enough that pos*neg > 10_000 triggers the rank path
        scores = rng.normal(size=300)
        labels = rng.uniform(size=300) < 0.5
        big = samples(scores, labels)
        rank_value = auroc(big)
        brute = auroc_bruteforce(scores.tolist(), labels.tolist())
        assert abs(rank_value - brute) < 1e-12

    def test_matches_bruteforce_random(self):
        rng = Rng(7)
        for trial in range(100):
            r = rng.derive(trial)
            n = int(r.integers(3, 50))
            scores = np.round(r.normal(size=n), 2)  # rounding forces ties
            labels = r.uniform(size=n) < 0.4
            if labels.all() or not labels.any():
                continue
            assert auroc(samples(scores, labels)) == pytest.approx(
                auroc_bruteforce(scores.tolist(), labels.tolist()), abs=0
            )

    @given(st.data())
    @settings(max_examples=60, deadline=None)
    def test_invariant_under_increasing_transform(self, data):
        n = data.draw(st.integers(4, 20))
        scores = np.asarray(data.draw(st.lists(
            st.floats(-5, 5, allow_nan=False), min_size=n, max_size=n)))
        labels = np.asarray(data.draw(st.lists(st.booleans(), min_size=n, max_size=n)))
        if labels.all() or not labels.any():
            return
        transformed = np.exp(scores / 3.0)
        if len(np.unique(transformed)) != len(np.unique(scores)):
            return  # float rounding collapsed a strict ordering; not a transform bug
        base = auroc(samples(scores, labels))
        assert base == pytest.approx(auroc(samples(transformed, labels)), abs=1e-12)

    def test_negation_complement_without_ties(self):
        rng = Rng(3)
        scores = rng.normal(size=40)
        labels = rng.uniform(size=40) < 0.5
        if labels.all() or not labels.any():
            labels[0] = ~labels[0]
        a = auroc(samples(scores, labels))
        b = auroc(samples(-scores, labels))
        assert a + b == pytest.approx(1.0, abs=1e-12)


class TestAuprc:
    def test_all_positive(self):
        assert auprc(samples([0.3, 0.1], [1, 1])) == 1.0

    def test_hand_example(self):
        # precision at the two positives' ranks: 1/1 and 2/3 -> mean 5/6
        s = samples([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert auprc(s) == auprc_bruteforce([0.9, 0.8, 0.7, 0.6], [1, 0, 1, 0])
        assert auprc(s) == pytest.approx(5.0 / 6.0, abs=1e-12)

    def test_perfect_ranking_any_prevalence(self):
        s = samples([0.9, 0.8, 0.3, 0.2, 0.1], [1, 1, 0, 0, 0])
        assert auprc(s) == 1.0

    def test_zero_positives_rejected(self):
        with pytest.raises(UndefinedMetricError):
            auprc(samples([0.1, 0.2], [0, 0]))

    def test_matches_bruteforce_random(self):
        rng = Rng(8)
        for trial in range(100):
            r = rng.derive(trial)
            n = int(r.integers(2, 50))
            scores = np.round(r.normal(size=n), 2)
            labels = r.uniform(size=n) < 0.4
            if not labels.any():
                continue
            assert auprc(samples(scores, labels)) == pytest.approx(
                auprc_bruteforce(scores.tolist(), labels.tolist()), abs=0
            )


class TestYouden:
    def test_perfect_split(self):
        op = youden_operating_point(samples([0.2, 0.3, 0.6, 0.9], [0, 0, 1, 1]))
        assert (op.threshold, op.sensitivity, op.specificity, op.youden_j) == (0.6, 1.0, 1.0, 1.0)

    def test_tie_breaks_to_lowest_threshold(self):
        op = youden_operating_point(samples([0.2, 0.7, 0.6, 0.9], [0, 0, 1, 1]))
        assert op.threshold == 0.6
        assert op.sensitivity == 1.0 and op.specificity == 0.5
        assert op.youden_j == pytest.approx(0.5)

    def test_all_scores_equal(self):
        op = youden_operating_point(samples([0.4] * 4, [0, 1, 0, 1]))
        assert op.youden_j == 0.0

    def test_ppv_npv_undefined_flag(self):
        # lowest threshold predicts everything positive -> npv undefined (0/0)
        op = youden_operating_point(samples([0.5, 0.5, 0.5, 0.9], [0, 0, 1, 1]))
        assert op.npv is None or op.npv >= 0.0  # never NaN

    def test_matches_exhaustive_scan(self):
        rng = Rng(9)
        for trial in range(100):
            r = rng.derive(trial)
            n = int(r.integers(3, 50))
            scores = np.round(r.normal(size=n), 2)
            labels = r.uniform(size=n) < 0.5
            if labels.all() or not labels.any():
                continue
            op = youden_operating_point(samples(scores, labels))
            j, t, sens, spec = youden_bruteforce(scores.tolist(), labels.tolist())
            assert op.youden_j == pytest.approx(j, abs=1e-12)
            assert op.threshold == pytest.approx(t, abs=0)

    def test_no_better_threshold_exists(self):
        rng = Rng(10)
        scores = np.round(rng.normal(size=30), 1)
        labels = rng.uniform(size=30) < 0.5
        op = youden_operating_point(samples(scores, labels))
        n_pos, n_neg = labels.sum(), (~labels).sum()
        for t in np.unique(scores):
            pred = scores >= t
            j = (pred & labels).sum() / n_pos + (~pred & ~labels).sum() / n_neg - 1
            assert j <= op.youden_j + 1e-12


class TestRegression:
    def test_identity(self):
        m = regression_metrics([1, 2, 3], [1, 2, 3])
        assert m.mae == 0.0 and m.pearson_r == 1.0

    def test_hand_example(self):
        m = regression_metrics([1, 2, 3], [2, 4, 6])
        assert m.mae == 2.0 and m.pearson_r == pytest.approx(1.0)

    def test_constant_predictions_undefined_r(self):
        m = regression_metrics([1, 1, 1], [1, 2, 3])
        assert m.pearson_r is None and m.mae == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            regression_metrics([1, 2], [1, 2, 3])


class TestBootstrap:
    @staticmethod
    def _mean_metric(s: ScoredSamples) -> float:
        return float(s.scores.mean())

    def test_constant_metric_zero_width(self):
        s = samples([2.0, 2.0, 2.0], [1, 0, 1])
        boot = bootstrap_ci(self._mean_metric, s, n_iter=100, seed=1)
        assert boot.lo == boot.hi == 2.0 and boot.contains_point

    def test_deterministic_under_seed(self):
        rng = Rng(11)
        s = samples(rng.normal(size=30), rng.uniform(size=30) < 0.5)
        a = bootstrap_ci(self._mean_metric, s, n_iter=200, seed=5)
        b = bootstrap_ci(self._mean_metric, s, n_iter=200, seed=5)
        assert (a.lo, a.hi) == (b.lo, b.hi)

    def test_three_patient_toy_matches_exhaustive_enumeration(self):
        # patients hold values 1, 2, 3; the metric is the resample mean.
        # All 27 ordered resamples are equally likely; the nearest-rank
        # percentile of that exact distribution is the oracle.
        s = samples([1.0, 2.0, 3.0], [0, 0, 1], patients=["A", "B", "C"])
        outcomes = sorted(
            np.mean(combo) for combo in itertools.product([1.0, 2.0, 3.0], repeat=3)
        )
        def nearest_rank(vals, p):
            return vals[max(0, min(len(vals) - 1, math.ceil(p * len(vals)) - 1))]
        oracle = (nearest_rank(outcomes, 0.025), nearest_rank(outcomes, 0.975))
        boot = bootstrap_ci(self._mean_metric, s, n_iter=1000, seed=42)
        assert (boot.lo, boot.hi) == oracle

    def test_patient_level_resampling_keeps_patients_whole(self):
        # two samples per patient with equal values: every patient-level
        # resample mean stays at the patient-mean value
        s = samples([1.0, 1.0, 3.0, 3.0], [0, 1, 0, 1], patients=["A", "A", "B", "B"])
        def spread(sub: ScoredSamples) -> float:
            by_patient = {}
            for pid, v in zip(sub.patient_ids, sub.scores):
                by_patient.setdefault(pid, []).append(v)
            for vals in by_patient.values():
                assert len(vals) % 2 == 0  # patients are resampled whole
            return float(sub.scores.mean())
        bootstrap_ci(spread, s, n_iter=50, seed=0)

    def test_undefined_replicates_skipped_and_counted(self):
        s = samples([0.9, 0.1], [1, 0], patients=["A", "B"])
        boot = bootstrap_ci(lambda x: auroc(x), s, n_iter=200, seed=3)
        # resamples drawing only one patient are single-class -> skipped
        assert boot.undefined_replicates > 0
        assert boot.n_iter == 200

    def test_all_replicates_undefined(self):
        s = samples([0.9, 0.1], [1, 1], patients=["A", "A"])
        with pytest.raises(UndefinedMetricError):
            bootstrap_ci(lambda x: auroc(x), s, n_iter=10, seed=0)

    def test_interval_contains_point_for_smooth_metric(self):
        rng = Rng(12)
        s = samples(rng.normal(size=60), rng.uniform(size=60) < 0.5,
                    patients=[f"P{i // 2}" for i in range(60)])
        boot = bootstrap_ci(self._mean_metric, s, n_iter=500, seed=2)
        assert boot.contains_point


class TestDeLong:
    def test_identical_scores(self):
        labels = [0, 0, 1, 1, 0, 1]
        a = [0.1, 0.4, 0.8, 0.7, 0.2, 0.9]
        res = delong_test(a, a, labels)
        assert res.z == 0.0 and res.p_two_sided == 1.0

    def test_antisymmetry(self):
        rng = Rng(13)
        labels = rng.uniform(size=40) < 0.5
        a = rng.normal(size=40)
        b = rng.normal(size=40)
        r1 = delong_test(a, b, labels)
        r2 = delong_test(b, a, labels)
        assert r1.z == pytest.approx(-r2.z, abs=1e-12)
        assert r1.p_two_sided == pytest.approx(r2.p_two_sided, abs=1e-12)

    def test_sign_matches_auc_difference(self):
        rng = Rng(14)
        labels = rng.uniform(size=50) < 0.5
        a = rng.normal(size=50) + labels * 2.0
        b = rng.normal(size=50)
        res = delong_test(a, b, labels)
        assert np.sign(res.z) == np.sign(res.auc_a - res.auc_b)

    def test_variance_matches_direct_definition(self):
        rng = Rng(15)
        for trial in range(100):
            r = rng.derive(trial)
            n = int(r.integers(4, 50))
            labels = r.uniform(size=n) < 0.5
            if labels.sum() < 1 or (~labels).sum() < 1:
                continue
            a = np.round(r.normal(size=n), 2)
            b = np.round(r.normal(size=n), 2)
            res = delong_test(a, b, labels)
            brute = delong_variance_bruteforce(a, b, labels)
            assert res.var == pytest.approx(brute, abs=1e-10)

    def test_six_sample_toy(self):
        labels = [1, 1, 1, 0, 0, 0]
        a = [0.9, 0.7, 0.6, 0.5, 0.4, 0.1]
        b = [0.8, 0.5, 0.3, 0.6, 0.2, 0.1]
        res = delong_test(a, b, labels)
        assert res.var == pytest.approx(delong_variance_bruteforce(a, b, labels), abs=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(UndefinedMetricError):
            delong_test([0.1, 0.2], [0.3, 0.4], [1, 1])


class TestWelch:
    def test_identical_groups(self):
        res = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert res.t == 0.0 and res.p_two_sided == 1.0

    def test_zero_variance_different_means(self):
        res = welch_t_test([0.0, 0.0], [1.0, 1.0])
        assert res.degenerate and math.isinf(res.t) and res.p_two_sided == 0.0

    def test_hand_computed_example(self):
        res = welch_t_test([1.0, 2.0, 3.0], [2.0, 3.0, 4.0])
        assert res.t == pytest.approx(-1.224744871, abs=1e-8)
        assert res.df == pytest.approx(4.0, abs=1e-9)
        assert res.p_two_sided == pytest.approx(0.2878641347, abs=1e-6)

    def test_undersized_group(self):
        with pytest.raises(ValidationError):
            welch_t_test([1.0], [1.0, 2.0])


class TestMicroAverage:
    def test_single_segment_identity(self):
        s = samples([0.1, 0.9, 0.4], [0, 1, 0])
        out = micro_average({"seg": s}, auroc)
        assert out["micro"] == auroc(s) == out["macro"]

    def test_disjoint_segments_pool(self):
        s1 = samples([0.9, 0.1], [1, 0], patients=["A", "B"])
        s2 = samples([0.8, 0.2], [1, 0], patients=["C", "D"])
        pooled = samples([0.9, 0.1, 0.8, 0.2], [1, 0, 1, 0], ["A", "B", "C", "D"])
        out = micro_average({"a": s1, "b": s2}, auroc)
        assert out["micro"] == auroc(pooled)

    def test_micro_differs_from_macro(self):
        # per-segment AUROC is 1.0 both, but pooling mixes the score scales
        s1 = samples([0.3, 0.1], [1, 0], patients=["A", "B"])
        s2 = samples([0.9, 0.5], [1, 0], patients=["C", "D"])
        out = micro_average({"a": s1, "b": s2}, auroc)
        assert out["macro"] == 1.0
        assert out["micro"] < 1.0
        assert out["micro"] == auroc(
            samples([0.3, 0.1, 0.9, 0.5], [1, 0, 1, 0], ["A", "B", "C", "D"])
        )

    def test_undefined_segment_skipped_with_count(self):
        s1 = samples([0.9, 0.1], [1, 0])
        s2 = samples([0.5, 0.6], [1, 1])  # single class
        out = micro_average({"ok": s1, "bad": s2}, auroc)
        assert out["macro_skipped_segments"] == 1
        assert out["per_segment"]["bad"] is None


class TestRiskTertiles:
    def test_nine_distinct(self):
        res = risk_tertiles(np.linspace(0.1, 0.9, 9), [0, 0, 0, 0, 1, 0, 1, 1, 1])
        assert res.counts == {"low": 3, "intermediate": 3, "high": 3}

    def test_monotone_model_monotone_event_rates(self):
        probs = np.linspace(0.01, 0.99, 30)
        events = probs > 0.6
        res = risk_tertiles(probs, events)
        rates = [res.event_rates[g] for g in ("low", "intermediate", "high")]
        assert rates[0] <= rates[1] <= rates[2]

    def test_tie_at_cut_goes_low(self):
        probs = [0.1, 0.2, 0.2, 0.5, 0.6, 0.9]
        res = risk_tertiles(probs, [0, 0, 0, 1, 1, 1])
        assert res.counts["low"] == 3  # both 0.2 samples land low
        low_members = np.asarray(probs)[res.assignments == "low"]
        assert sorted(low_members.tolist()) == [0.1, 0.2, 0.2]

    def test_too_small(self):
        with pytest.raises(ValidationError):
            risk_tertiles([0.1, 0.9], [0, 1])

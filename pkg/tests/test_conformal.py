import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colep.certify import PerturbationBudget, smoothing_bound
from colep.circuits import CircuitSpec, KnowledgeBase, KnowledgeRule, LabelSpace, colep_probabilities
from colep.conformal import (
    MASSART_CONSTANT,
    SMOOTHING_CONSTANT,
    CalibrationSet,
    CertifiedCoverage,
    CoverageTarget,
    aps_score,
    aps_scores,
    binary_score,
    certified_coverage,
    certified_thresholds,
    class_score_matrix,
    class_thresholds,
    conformal_quantile,
    finite_sample_coverage,
    predict_set,
    predict_set_certified,
    prediction_sets,
    worst_case_score,
)
from colep.exceptions import StructuralError


class TestScores:
    def test_aps_one_hot(self):
        assert aps_score([0, 1, 0], 1, 0.0) == 0.0

    def test_aps_example(self):
        assert aps_score([0.5, 0.3, 0.2], 1, 1.0) == pytest.approx(0.8)

    def test_aps_ties_excluded(self):
        assert aps_score([0.25] * 4, 2, 0.5) == pytest.approx(0.125)

    def test_aps_vectorized(self, rng):
        probs = rng.dirichlet(np.ones(4), size=30)
        labels = rng.integers(0, 4, size=30)
        u = rng.uniform(size=30)
        expected = [aps_score(p, y, v) for p, y, v in zip(probs, labels, u)]
        np.testing.assert_allclose(aps_scores(probs, labels, u), expected)

    def test_binary_examples(self):
        assert binary_score(1.0, True, 0.0) == 0.0
        assert binary_score(0.3, False, 0.5) == pytest.approx(0.65)
        assert binary_score(0.3, True, 0.0) == pytest.approx(0.7)

    def test_binary_matches_two_class_aps_when_ranked_second(self, rng):
        # on [p, 1 - p] the APS score reproduces the binary score whenever the
        # scored entry is the smaller one
        for p, u in rng.uniform(size=(400, 2)):
            if p < 0.5:
                assert binary_score(p, True, u) == pytest.approx(aps_score([p, 1 - p], 0, u), abs=1e-15)
            elif p > 0.5:
                assert binary_score(p, False, u) == pytest.approx(aps_score([p, 1 - p], 1, u), abs=1e-15)

    def test_binary_non_member_formula(self, rng):
        for p, u in rng.uniform(size=(50, 2)):
            assert binary_score(p, False, u) == pytest.approx(p + u * (1 - p), abs=1e-15)

    def test_worst_case_examples(self):
        assert worst_case_score(0.6, 0.9, True, 0.0) == pytest.approx(0.4)
        assert worst_case_score(0.1, 0.4, False, 1.0) == pytest.approx(1.0)

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(0, 1), b=st.floats(0, 1), u=st.floats(0, 1), matches=st.booleans())
    def test_worst_case_dominates_grid(self, a, b, u, matches):
        lo, hi = min(a, b), max(a, b)
        grid = np.linspace(lo, hi, 101)
        worst = worst_case_score(lo, hi, matches, u)
        assert np.all(binary_score(grid, matches, u) <= worst + 1e-15)
        assert worst == pytest.approx(np.max(binary_score(grid, matches, u)), abs=1e-15)

    def test_degenerate_interval_equals_binary(self):
        assert worst_case_score(0.3, 0.3, True, 0.4) == binary_score(0.3, True, 0.4)


class TestQuantile:
    def test_saturates(self):
        assert conformal_quantile([0.5], 0.9) == math.inf

    def test_ten_values(self):
        assert conformal_quantile(np.arange(1, 11) / 10, 0.8) == pytest.approx(0.9)

    def test_float_rank_guard(self):
        # 0.9 * 10 is 9.000000000000002 in floating point; the rank must still be 9
        assert conformal_quantile(np.arange(1, 10), 0.9) == 9

    def test_constant(self):
        assert conformal_quantile([0.3] * 20, 0.9) == 0.3

    def test_empty(self):
        with pytest.raises(StructuralError):
            conformal_quantile([], 0.9)

    @settings(max_examples=200, deadline=None)
    @given(scores=st.lists(st.floats(0, 1), min_size=1, max_size=60), level=st.floats(0.01, 0.99))
    def test_matches_sorting(self, scores, level):
        n = len(scores)
        k = math.ceil(round(level * (n + 1), 9))
        expected = math.inf if k > n else sorted(scores)[k - 1]
        assert conformal_quantile(scores, level) == expected


class TestTarget:
    def test_validation(self):
        with pytest.raises(StructuralError):
            CoverageTarget(0.0)
        with pytest.raises(StructuralError):
            CoverageTarget(0.1, per_class_alpha=[0.05, 0.2])
        assert list(CoverageTarget(0.1).class_alphas(3)) == [0.1] * 3

    def test_calibration_set_validation(self):
        with pytest.raises(StructuralError):
            CalibrationSet(np.empty((0, 2)), [], np.empty(0))
        with pytest.raises(StructuralError):
            CalibrationSet(np.full((2, 2), 0.5), [0], np.zeros(2))


def three_class_fixture():
    space = LabelSpace(3, 1)
    kb = KnowledgeBase((CircuitSpec((KnowledgeRule(0, 3, 1.5),), space),), np.array([1.0]))
    beliefs = np.array([
        [0.8, 0.1, 0.3, 0.9],
        [0.2, 0.7, 0.1, 0.1],
        [0.1, 0.2, 0.9, 0.4],
        [0.6, 0.5, 0.2, 0.8],
        [0.3, 0.6, 0.4, 0.2],
    ])
    labels = np.array([0, 1, 2, 0, 1])
    u = np.random.default_rng(7).uniform(size=(5, 3))
    return kb, CalibrationSet(beliefs, labels, u)


class TestPredictSet:
    def test_hand_trace(self):
        kb, calib = three_class_fixture()
        target = CoverageTarget(0.4)
        test = np.array([0.7, 0.4, 0.2, 0.6])
        u_test = np.array([0.3, 0.6, 0.9])
        # unrolled: corrected probabilities, per-class scores, rank ceil(0.6 * 6) = 4
        e = math.exp(1.5)
        corrected = calib.beliefs[:, :3].copy()
        p, o = calib.beliefs[:, 0], calib.beliefs[:, 3]
        corrected[:, 0] = p * (o * e + 1 - o) / (p * (o * e + 1 - o) + (1 - p) * e)
        thresholds = []
        for j in range(3):
            scores = []
            for i in range(5):
                q = corrected[i, j]
                member = calib.labels[i] == j
                scores.append(1 - q + calib.u[i, j] * q if member else q + calib.u[i, j] * (1 - q))
            thresholds.append(sorted(scores)[3])
        tp = test[:3].copy()
        tp[0] = test[0] * (test[3] * e + 1 - test[3]) / (test[0] * (test[3] * e + 1 - test[3]) + (1 - test[0]) * e)
        expected = {j for j in range(3) if 1 - tp[j] + u_test[j] * tp[j] <= thresholds[j]}
        got = predict_set(test, calib, kb, target, u=u_test)
        assert got.members == expected
        np.testing.assert_allclose(got.per_class_thresholds, thresholds, atol=1e-14)

    def test_infinite_thresholds_full_set(self):
        kb, calib = three_class_fixture()
        got = predict_set(np.full(4, 0.01), calib, kb, CoverageTarget(0.1), u=np.ones(3))
        assert got.members == {0, 1, 2} and np.all(np.isinf(got.per_class_thresholds))

    def test_certified_zero_radius_matches_standard(self, rng):
        kb, calib = three_class_fixture()
        boxed = CalibrationSet(calib.beliefs, calib.labels, calib.u, lower=calib.beliefs, upper=calib.beliefs)
        for _ in range(20):
            test, u = rng.uniform(size=4), rng.uniform(size=3)
            a = predict_set(test, calib, kb, CoverageTarget(0.5), u=u)
            b = predict_set_certified(test, boxed, kb, CoverageTarget(0.5), u=u)
            assert a.members == b.members

    def test_certified_contains_standard(self, rng):
        space = LabelSpace(3, 3)
        kb = KnowledgeBase((CircuitSpec(tuple(KnowledgeRule(j, 3 + j) for j in range(3)), space),), np.ones(1))
        beliefs = rng.uniform(size=(200, 6))
        labels = rng.integers(0, 3, size=200)
        u = rng.uniform(size=(200, 3))
        lo, hi = smoothing_bound(beliefs, PerturbationBudget(0.25, 1.0))
        calib = CalibrationSet(beliefs, labels, u)
        boxed = CalibrationSet(beliefs, labels, u, lower=lo, upper=hi)
        target = CoverageTarget(0.1)
        std = class_thresholds(class_score_matrix(colep_probabilities(beliefs, kb), labels, u), target)
        cert = certified_thresholds(boxed, kb, target)
        assert np.all(cert >= std)
        test, u_test = rng.uniform(size=(300, 6)), rng.uniform(size=(300, 3))
        probs = colep_probabilities(test, kb)
        assert np.all(prediction_sets(probs, cert, u_test) >= prediction_sets(probs, std, u_test))
        for i in range(5):
            a = predict_set(test[i], calib, kb, target, u=u_test[i])
            b = predict_set_certified(test[i], boxed, kb, target, u=u_test[i])
            assert a.members <= b.members

    def test_level_overflow(self):
        kb, calib = three_class_fixture()
        with pytest.raises(StructuralError):
            predict_set_certified(np.full(4, 0.5), calib, kb, CoverageTarget(0.1), fs_beta=0.05005)

    def test_finite_sample_level_raises_thresholds(self, rng):
        scores = rng.uniform(size=(500, 2))
        base = class_thresholds(scores, CoverageTarget(0.2))
        shifted = class_thresholds(scores, CoverageTarget(0.2), level_shift=0.02)
        assert np.all(shifted >= base)

    def test_per_class_alpha(self, rng):
        scores = rng.uniform(size=(99, 2))
        got = class_thresholds(scores, CoverageTarget(0.2, per_class_alpha=[0.1, 0.2]))
        assert got[0] == conformal_quantile(scores[:, 0], 0.9)
        assert got[1] == conformal_quantile(scores[:, 1], 0.8)


class TestCertifiedCoverage:
    def test_self_comparison(self, rng):
        clean = rng.uniform(size=(99, 3))
        cov = certified_coverage(clean, clean, CoverageTarget(0.1))
        k = math.ceil(0.9 * 100)
        np.testing.assert_allclose(cov.tau_per_class, k / 100)
        assert cov.tau >= 0.9 - 1 / 100

    def test_total_degradation(self, rng):
        clean = rng.uniform(0, 0.9, size=(50, 2))
        cov = certified_coverage(clean, np.ones_like(clean), CoverageTarget(0.1))
        assert cov.tau == 0.0

    def test_brute_force_scan(self, rng):
        n = 60
        for _ in range(30):
            clean = rng.uniform(size=(n, 2))
            worst = clean + rng.uniform(0, 0.3, size=clean.shape)
            target = CoverageTarget(rng.uniform(0.05, 0.4))
            cov = certified_coverage(clean, worst, target)
            for j in range(2):
                q = conformal_quantile(clean[:, j], 1 - target.alpha)
                best = 0.0
                for i in range(1, n + 1):
                    tau = i / (n + 1)
                    if conformal_quantile(worst[:, j], tau) <= q:
                        best = tau
                assert cov.tau_per_class[j] == pytest.approx(best, abs=1e-15)

    def test_records_bound_family(self, rng):
        s = rng.uniform(size=(10, 2))
        assert certified_coverage(s, s, CoverageTarget(0.2), "finite-sample").bound_family == "finite-sample"


class TestFiniteSampleCoverage:
    def test_constants(self):
        assert MASSART_CONSTANT == pytest.approx(math.sqrt(math.log(2) / 2), abs=1e-16)
        assert SMOOTHING_CONSTANT == pytest.approx(math.sqrt(2) / (4 * math.sqrt(math.log(2)) + 8 / math.pi), abs=1e-16)
        assert MASSART_CONSTANT == pytest.approx(0.5887050112577373, abs=1e-15)
        assert SMOOTHING_CONSTANT == pytest.approx(0.24064766889341183, abs=1e-15)

    def test_calibration_size_973(self):
        n = 973
        correction = (math.sqrt(math.log(2) / 2) + math.sqrt(2) / (4 * math.sqrt(math.log(2)) + 8 / math.pi)) / math.sqrt(n)
        tau = 0.9
        assert finite_sample_coverage(tau, n) == pytest.approx((1 + 1 / n) * tau - correction, abs=1e-9)

    def test_huge_n(self):
        v = finite_sample_coverage(0.87, 10**12)
        assert v <= 0.87 and 0.87 - v < 1e-5

    def test_clamped(self):
        assert finite_sample_coverage(0.0, 100) == 0.0

    def test_uses_minimum_class(self):
        assert finite_sample_coverage([0.9, 0.8], 400) == finite_sample_coverage(0.8, 400)

    def test_never_above_tau(self, rng):
        for _ in range(200):
            n = int(rng.integers(1, 5000))
            tau_j = rng.integers(0, n + 1, size=3) / (n + 1)
            cov = CertifiedCoverage(tau_j, n)
            assert cov.finite_sample_tau <= cov.tau

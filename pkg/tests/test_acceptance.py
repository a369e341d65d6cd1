"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import itertools
import math
import time
from pathlib import Path

import mpmath
import numpy as np
import pytest

from _acceptance_log import record
from _factories import random_circuit, random_knowledge_base, random_space
from colep import cli
from colep.analysis import estimate_model_utility, effectiveness_check, measure_utilities, compare_with_bare_model
from colep.certify import (
    IntervalVector,
    MonteCarloEstimate,
    PerturbationBudget,
    propagate_bounds_batch,
    smoothing_bound_finite_sample,
)
from colep.circuits import (
    CircuitSpec,
    KnowledgeRule,
    LabelSpace,
    colep_probabilities,
    load_knowledge_base,
    pc_marginal,
    pc_marginals,
)
from colep.conformal import (
    CertifiedCoverage,
    CoverageTarget,
    calibration_thresholds,
    certified_coverage,
    certified_thresholds,
    class_score_matrix,
    finite_sample_coverage,
    prediction_sets,
    worst_case_score_matrix,
)
from colep.simgen import WorldSpec, generate, interval_adversary, paired_concept_knowledge, paired_concept_world

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
ALPHAS = (0.05, 0.1, 0.2)
DELTAS = (0.125, 0.25, 0.5)
N_CAL, N_TEST_TOTAL, ROUNDS = 1000, 20000, 100

mpmath.mp.dps = 40


def band(alpha, n=N_TEST_TOTAL):
    return 3 * math.sqrt(alpha * (1 - alpha) / n)


def test_oracle_equivalence():
    rng = np.random.default_rng(101)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        space = random_space(rng, max_width=12)
        circuit = random_circuit(rng, space)
        pi = rng.uniform(size=space.width)
        fast = pc_marginals(pi[None, :], circuit, list(range(space.width)))[0]
        for j in range(space.width):
            worst = max(worst, abs(fast[j] - pc_marginal(pi, circuit, j, method="oracle")))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-10 and elapsed < 30
    record(1, ok, f"oracle equivalence: max |fast - oracle| = {worst:.2e} (tol 1e-10), {elapsed:.1f}s (limit 30s)")
    assert ok


def test_worked_example():
    space = LabelSpace(1, 1)
    worst = 0.0
    for w in (0.0, 1.5, 5.0):
        circuit = CircuitSpec((KnowledgeRule(0, 1, w),), space)
        got = pc_marginal(np.array([0.9, 0.0]), circuit, 0)
        worst = max(worst, abs(got - 0.9 / (0.1 * math.exp(w) + 0.9)))
    ok = worst <= 1e-12
    record(2, ok, f"single-rule worked example: max error {worst:.2e} over w in {{0, 1.5, 5}} (tol 1e-12)")
    assert ok


def test_bound_soundness_and_tightness():
    rng = np.random.default_rng(303)
    start = time.perf_counter()
    violation = 0.0
    gap = 0.0
    for _ in range(1000):
        space = random_space(rng, max_width=12)
        kb = random_knowledge_base(rng, space)
        a, b = rng.uniform(size=(2, space.width))
        lo, hi = np.minimum(a, b), np.maximum(a, b)
        L, U = propagate_bounds_batch(IntervalVector(lo[None, :], hi[None, :]), kb)
        grid = lo + (hi - lo) * rng.uniform(size=(10000, space.width))
        corners = np.array(list(itertools.product((0, 1), repeat=space.width)), dtype=bool)
        corner_points = np.where(corners, hi, lo)
        probs = colep_probabilities(np.vstack([grid, corner_points]), kb)
        violation = max(violation, float(np.max(L - probs)), float(np.max(probs - U)))
        corner_probs = probs[grid.shape[0]:]
        gap = max(gap, float(np.max(np.abs(corner_probs.min(axis=0) - L[0]))),
                  float(np.max(np.abs(corner_probs.max(axis=0) - U[0]))))
    elapsed = time.perf_counter() - start
    ok = violation <= 1e-12 and gap <= 1e-9 and elapsed < 120
    record(3, ok, f"bounds: worst excursion {violation:.2e}, corner extreme vs bound {gap:.2e} (tol 1e-9), "
                  f"{elapsed:.1f}s (limit 120s)")
    assert ok


@pytest.fixture(scope="module")
def coverage_runs():
    """Pooled coverage over independent calibrate/test rounds in the paired-concept world."""
    world = WorldSpec.load(CONFIGS / "world_paired.json").with_seed(2024)
    kb = load_knowledge_base(CONFIGS / "kb_paired.json")
    per_round = N_TEST_TOTAL // ROUNDS
    hits = {}
    taus = {}
    for r in range(ROUNDS):
        cal = generate(world, N_CAL, 2 * r)
        test = generate(world, per_round, 2 * r + 1)
        rows, y = np.arange(per_round), test.labels
        probs = colep_probabilities(test.beliefs, kb)
        clean_scores = class_score_matrix(colep_probabilities(cal.beliefs, kb), cal.labels, cal.u)
        for alpha in ALPHAS:
            target = CoverageTarget(alpha)
            std = calibration_thresholds(cal.calibration_set(), kb, target)
            hits.setdefault(("clean", alpha, None), []).append(prediction_sets(probs, std, test.u)[rows, y])
            for delta in DELTAS:
                budget = PerturbationBudget(delta, 1.0)
                boxed = cal.calibration_set(budget)
                cert = certified_thresholds(boxed, kb, target)
                adv = colep_probabilities(interval_adversary(test, budget, kb), kb)
                hits.setdefault(("certified", alpha, delta), []).append(prediction_sets(adv, cert, test.u)[rows, y])
                hits.setdefault(("standard", alpha, delta), []).append(prediction_sets(adv, std, test.u)[rows, y])
                L, U = propagate_bounds_batch(boxed.intervals, kb)
                worst = worst_case_score_matrix(L, U, cal.labels, cal.u)
                taus.setdefault((alpha, delta), []).append(certified_coverage(clean_scores, worst, target).tau)
    coverage = {k: float(np.concatenate(v).mean()) for k, v in hits.items()}
    return coverage, {k: np.array(v) for k, v in taus.items()}


def test_exchangeable_coverage(coverage_runs):
    coverage, _ = coverage_runs
    parts, ok = [], True
    for alpha in ALPHAS:
        c = coverage[("clean", alpha, None)]
        ok &= c >= 1 - alpha - band(alpha)
        parts.append(f"a={alpha}: {c:.4f} >= {1 - alpha - band(alpha):.4f}")
    record(4, ok, "exchangeable coverage " + ", ".join(parts))
    assert ok


def test_certified_coverage(coverage_runs):
    coverage, _ = coverage_runs
    parts, ok = [], True
    for alpha in ALPHAS:
        for delta in DELTAS:
            c = coverage[("certified", alpha, delta)]
            ok &= c >= 1 - alpha - band(alpha)
            parts.append(f"a={alpha},d={delta}: {c:.4f}")
    record(5, ok, "certified coverage under attack " + ", ".join(parts))
    assert ok


def test_tau_soundness(coverage_runs):
    coverage, taus = coverage_runs
    parts, ok = [], True
    for alpha in ALPHAS:
        for delta in DELTAS:
            c, t = coverage[("standard", alpha, delta)], float(taus[(alpha, delta)].mean())
            ok &= c >= t - band(alpha)
            parts.append(f"a={alpha},d={delta}: {c:.4f} vs tau {t:.4f}")
        stacked = np.stack([taus[(alpha, d)] for d in DELTAS], axis=1)
        ok &= bool(np.all(np.diff(stacked, axis=1) <= 0))
    record(6, ok, "standard-set coverage >= tau - band and tau non-increasing in delta; " + ", ".join(parts))
    assert ok


def test_knowledge_beats_bare_model():
    world = paired_concept_world(
        benign=((0.7, 0.95), (0.9, 0.95)),
        adversarial=((0.7, 0.2), (0.9, 0.95)),
        mix=0.5,
        seed=11,
        concepts_per_class=3,
    )
    kb = paired_concept_knowledge(concepts_per_class=3)
    # the world must meet the strong-knowledge hypotheses before the claim is tested
    probe = generate(world, 20000, 999)
    ben = probe.select(~probe.adversarial)
    adv = probe.select(probe.adversarial)
    z_b = float(estimate_model_utility(ben.beliefs, ben.truth).z.min())
    u_min = min(ru.U for per_j in measure_utilities(probe, kb).values() for rus in per_j.values()
                for ru in rus if ru.U is not None)
    acc_adv = float(np.mean((adv.beliefs[:, :3] >= 0.5) == (adv.truth[:, :3] == 1)))
    hypotheses = z_b >= 0.9 and u_min >= 0.9 and acc_adv <= 0.3

    report = compare_with_bare_model(world, kb, n_cal=500, n_adv=500, n_trials=200)
    effect = effectiveness_check(world, kb, 20000)
    delta = float(report.accuracy_delta_adversarial.mean())
    ok = hypotheses and report.win_fraction >= 0.9 and delta > 0 and effect.passed
    gaps = ", ".join(f"j={c.j}: {c.gap_off:.3f}/{c.gap_on:.3f}" for c in effect.classes)
    record(7, ok, f"strong world (z={z_b:.3f}, U>={u_min:.3f}, adv acc={acc_adv:.3f}): "
                  f"win fraction {report.win_fraction:.3f} (>= 0.9), mean adv accuracy delta {delta:.4f} (> 0), "
                  f"effectiveness gaps {gaps}")
    assert ok


def _cdf(x):
    if x == -math.inf:
        return 0.0
    if x == math.inf:
        return 1.0
    return float(mpmath.ncdf(x))


def _ppf(p):
    if p <= 0:
        return -math.inf
    if p >= 1:
        return math.inf
    return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


def _finite_sample_reference(mean, var, n, beta, ratio):
    b_h = math.sqrt(math.log(1 / beta) / (2 * n))
    b_b = math.sqrt(2 * var * math.log(2 / beta) / n) + 7 * math.log(2 / beta) / (3 * (n - 1))
    lo = _cdf(_ppf(min(max(mean - b_h, 0.0), 1.0)) - ratio) - b_b
    hi = _cdf(_ppf(min(max(mean + b_h, 0.0), 1.0)) + ratio) + b_b
    return min(max(lo, 0.0), 1.0), min(max(hi, 0.0), 1.0)


def _coverage_reference(tau, n):
    ln2 = math.log(2)
    corr = (math.sqrt(ln2 / 2) + math.sqrt(2) / (4 * math.sqrt(ln2) + 8 / math.pi)) / math.sqrt(n)
    return min(max((1 + 1 / n) * tau - corr, 0.0), 1.0)


def test_finite_sample_formulas():
    rng = np.random.default_rng(808)
    err_bound = err_cov = 0.0
    below = True
    for _ in range(100):
        mean = float(rng.uniform())
        n = int(rng.integers(100, 200000))
        var = float(rng.uniform(0, mean * (1 - mean) + 1e-9))
        beta = float(rng.uniform(1e-4, 0.2))
        ratio = float(rng.uniform(0, 1))
        got = smoothing_bound_finite_sample(MonteCarloEstimate(mean, var, n, beta), PerturbationBudget(ratio, 1.0))
        ref = _finite_sample_reference(mean, var, n, beta, ratio)
        err_bound = max(err_bound, abs(got[0] - ref[0]), abs(got[1] - ref[1]))
        n_cal = int(rng.integers(1, 10000))
        tau_j = rng.integers(0, n_cal + 2, size=3) / (n_cal + 1)
        err_cov = max(err_cov, abs(finite_sample_coverage(tau_j, n_cal) - _coverage_reference(tau_j.min(), n_cal)))
        cov = CertifiedCoverage(tau_j, n_cal)
        below &= cov.finite_sample_tau <= cov.tau
    ln2 = mpmath.log(2)
    const = (mpmath.sqrt(ln2 / 2) + mpmath.sqrt(2) / (4 * mpmath.sqrt(ln2) + 8 / mpmath.pi)) / mpmath.sqrt(973)
    err_973 = abs((1 + 1 / 973) * 0.9 - finite_sample_coverage(0.9, 973) - float(const))
    ok = err_bound <= 1e-12 and err_cov <= 1e-12 and below and err_973 <= 1e-9
    record(8, ok, f"finite-sample formulas: bound error {err_bound:.2e}, coverage error {err_cov:.2e} (tol 1e-12), "
                  f"fs tau <= tau: {below}, n=973 correction error {err_973:.2e} (tol 1e-9)")
    assert ok


def test_simulation_determinism(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["simulate", "--config", str(CONFIGS / "simulate.json"), "--out", str(tmp_path / name)]) == 0
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
               for f in ("simulation.csv", "simulation.json"))
    record(9, same, "simulate twice with the same config and seed: byte-identical CSV and JSON")
    assert same


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))

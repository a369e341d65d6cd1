"""Utility diagnostics for models and rules, and Monte Carlo checks of the
effectiveness and superiority claims built on them."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .circuits import KnowledgeBase, colep_probabilities
from .conformal import CoverageTarget, calibration_thresholds, prediction_sets
from .exceptions import StructuralError
from .simgen import WorldSpec, generate

DEFAULT_T_GRID = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2)) + (0.99,)
MIN_STRATUM = 100
_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class ModelUtility:
    t: np.ndarray
    z: np.ndarray
    distribution_tag: str = "benign"


@dataclass(frozen=True)
class RuleUtility:
    T: float
    Z: float
    U: float | None
    lam: float
    role: str | None
    weight: float


def ground_truth(labels, concepts, num_classes: int) -> np.ndarray:
    """Stack one-hot class bits and concept bits into ``(n, num_classes + L)``."""
    labels = np.asarray(labels)
    concepts = np.atleast_2d(np.asarray(concepts, dtype=np.uint8))
    onehot = np.zeros((labels.shape[0], num_classes), dtype=np.uint8)
    onehot[np.arange(labels.shape[0]), labels] = 1
    return np.hstack([onehot, concepts.reshape(labels.shape[0], -1)])


def estimate_model_utility(beliefs, truth, t_grid=DEFAULT_T_GRID, tag: str = "benign") -> ModelUtility:
    """Pick, for each bit, the threshold ``t`` on the grid maximizing ``t * z(t)``.

    ``z(t)`` is the smaller of ``P[belief <= 1 - t | bit off]`` and
    ``P[belief >= t | bit on]``; an empty stratum makes it 0.
    """
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=np.float64))
    truth = np.atleast_2d(np.asarray(truth))
    if beliefs.shape[0] == 0:
        raise StructuralError("no data to estimate utilities from")
    if beliefs.shape != truth.shape:
        raise StructuralError("beliefs and truth differ in shape")
    grid = np.asarray(t_grid, dtype=np.float64)
    width = beliefs.shape[1]
    best_t = np.empty(width)
    best_z = np.empty(width)
    for i in range(width):
        off = beliefs[truth[:, i] == 0, i]
        on = beliefs[truth[:, i] == 1, i]
        z = np.zeros(grid.size)
        if off.size and on.size:
            for g, t in enumerate(grid):
                z[g] = min(np.mean(off <= 1.0 - t + _TOL), np.mean(on >= t - _TOL))
        score = grid * z
        g = int(np.flatnonzero(score >= score.max() - _TOL)[-1])
        best_t[i], best_z[i] = grid[g], z[g]
    return ModelUtility(best_t, best_z, tag)


def rule_utility(kb: KnowledgeBase, truth, model_util: ModelUtility, j: int, r: int) -> RuleUtility:
    """Model-quality products over ``j``'s neighbours in circuit ``r`` and the rule informativeness ``U``.

    ``U`` is ``None`` when ``j`` takes no part in circuit ``r`` or its conditioning stratum is empty.
    """
    circuit = kb.circuits[r]
    truth = np.atleast_2d(np.asarray(truth))
    others = list(circuit.neighbours(j))
    T = float(np.prod(model_util.t[others])) if others else 1.0
    Z = float(np.prod(model_util.z[others])) if others else 1.0
    role = circuit.role(j)
    weight = circuit.min_weight(j)
    U = None
    if role == "antecedent":
        stratum = truth[truth[:, j] == 0]
        cols = list(circuit.neighbour_consequents(j))
        if stratum.shape[0]:
            U = float(np.mean(np.any(stratum[:, cols] == 0, axis=1)))
    elif role == "consequent":
        stratum = truth[truth[:, j] == 1]
        cols = list(circuit.neighbour_antecedents(j))
        if stratum.shape[0]:
            U = float(np.mean(np.any(stratum[:, cols] == 1, axis=1)))
    lam = 1.0 / T + math.exp(-weight) - 1.0 if T > 0 else math.inf
    return RuleUtility(T, Z, U, lam, role, weight)


def _shrink(p, kappa):
    # p / (p + (1 - p) * kappa), fixed at the endpoints
    with np.errstate(divide="ignore", invalid="ignore"):
        out = p / (p + (1.0 - p) * kappa)
    return np.where((p <= 0.0) | (p >= 1.0), p, out)


def reasoning_effectiveness(pi_j, utilities: dict, kb: KnowledgeBase, j: int, weights: dict):
    """Guaranteed downward (``eps0``) and upward (``eps1``) corrections of class ``j``.

    ``utilities[tag][r]`` is the :class:`RuleUtility` of class ``j`` in circuit
    ``r`` under distribution ``tag``; ``weights[tag]`` is that distribution's
    share of the mixture.  Evaluated per sample.
    """
    pi = np.asarray(pi_j, dtype=np.float64)
    eps0 = np.zeros_like(pi)
    eps1 = np.zeros_like(pi)
    for tag, p_d in weights.items():
        if p_d == 0:
            continue
        if tag not in utilities:
            raise StructuralError(f"no utilities for distribution {tag!r}")
        for r, beta in enumerate(kb.mixture_weights):
            role = kb.circuits[r].role(j)
            if role is None:
                continue
            ru = utilities[tag][r]
            if ru is None or ru.U is None:
                raise StructuralError(f"rule utility for class {j}, circuit {r}, {tag} is missing")
            if role == "antecedent":
                eps0 += p_d * beta * ru.U * ru.Z * (pi - _shrink(pi, 1.0 / ru.lam))
                eps1 += p_d * beta * (_shrink(pi, 1.0 / ru.T) - pi)
            else:
                eps0 += p_d * beta * (pi - _shrink(pi, ru.T))
                eps1 += p_d * beta * ru.U * ru.Z * (_shrink(pi, ru.lam) - pi)
    return eps0, eps1


def accuracy(probs, bits) -> float:
    """Fraction of rows where thresholding ``probs`` at 0.5 recovers ``bits``."""
    return float(np.mean((np.asarray(probs) >= 0.5) == (np.asarray(bits) == 1)))


@dataclass
class ClassCheck:
    j: int
    gap_off: float
    se_off: float
    n_off: int
    gap_on: float
    se_on: float
    n_on: int

    @property
    def inconclusive(self) -> bool:
        return min(self.n_off, self.n_on) < MIN_STRATUM

    @property
    def holds(self) -> bool:
        return self.gap_off >= -3 * self.se_off and self.gap_on >= -3 * self.se_on

    def to_dict(self) -> dict:
        return {**self.__dict__, "inconclusive": self.inconclusive, "holds": self.holds}


@dataclass
class EffectivenessReport:
    classes: list = field(default_factory=list)
    utilities: dict = field(default_factory=dict)

    @property
    def inconclusive(self) -> bool:
        return any(c.inconclusive for c in self.classes)

    @property
    def passed(self) -> bool:
        return not self.inconclusive and all(c.holds for c in self.classes)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "inconclusive": self.inconclusive,
            "classes": [c.to_dict() for c in self.classes],
            "utilities": self.utilities,
        }


def _mean_se(x):
    if x.size == 0:
        return math.nan, math.nan
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.inf
    return float(x.mean()), se


def measure_utilities(batch, kb: KnowledgeBase, t_grid=DEFAULT_T_GRID) -> dict:
    """Rule utilities per distribution tag, class and circuit, estimated from a sample batch."""
    out = {}
    for tag, mask in (("benign", ~batch.adversarial), ("adversarial", batch.adversarial)):
        if not mask.any():
            continue
        model = estimate_model_utility(batch.beliefs[mask], batch.truth[mask], t_grid, tag)
        out[tag] = {
            j: [rule_utility(kb, batch.truth, model, j, r) for r in range(len(kb.circuits))]
            for j in range(kb.num_classes)
        }
    return out


def effectiveness_check(world: WorldSpec, kb: KnowledgeBase, n_samples: int, stream: int = 1000) -> EffectivenessReport:
    """Check that corrected class probabilities move at least as far as the guaranteed corrections.

    With ``gap_off = E[pi - eps0 - corrected | Y != j]`` and
    ``gap_on = E[corrected - pi - eps1 | Y = j]``, the check passes when both
    are at least minus three standard errors for every class.
    """
    batch = generate(world, n_samples, stream)
    utilities = measure_utilities(batch, kb)
    weights = {"benign": 1.0 - world.mix, "adversarial": world.mix}
    weights = {k: v for k, v in weights.items() if v > 0 and k in utilities}
    corrected = colep_probabilities(batch.beliefs, kb)
    labels = batch.labels
    report = EffectivenessReport()
    report.utilities = {
        tag: {str(j): [ru.__dict__ for ru in per_j[j]] for j in per_j} for tag, per_j in utilities.items()
    }
    for j in range(kb.num_classes):
        pi = batch.beliefs[:, j]
        eps0, eps1 = reasoning_effectiveness(pi, {t: utilities[t][j] for t in weights}, kb, j, weights)
        off, on = labels != j, labels == j
        g0, s0 = _mean_se((pi - eps0 - corrected[:, j])[off])
        g1, s1 = _mean_se((corrected[:, j] - pi - eps1)[on])
        report.classes.append(ClassCheck(j, g0, s0, int(off.sum()), g1, s1, int(on.sum())))
    return report


def accuracy_bound(p_other: float, p_same: float, e_off: float, e_on: float) -> float:
    """Accuracy lower bound from the conditional means of a corrected class probability."""
    return (
        1.0
        - p_other * math.exp(-3.0 * (0.5 - e_off) ** 2 / math.pi**2)
        - p_same * math.exp(-3.0 * (e_on - 0.5) ** 2 / math.pi**2)
    )


@dataclass
class ComparisonReport:
    coverage_colep: np.ndarray
    coverage_bare: np.ndarray
    accuracy_delta_adversarial: np.ndarray
    accuracy_delta_benign: np.ndarray
    bound_checks: list

    @property
    def win_fraction(self) -> float:
        wins = (self.coverage_colep > self.coverage_bare).sum()
        ties = (self.coverage_colep == self.coverage_bare).sum()
        return float((wins + 0.5 * ties) / self.coverage_colep.size)

    @property
    def bounds_hold(self) -> bool:
        return all(c["holds"] for c in self.bound_checks if c["applicable"])

    def to_dict(self) -> dict:
        return {
            "n_trials": int(self.coverage_colep.size),
            "win_fraction": self.win_fraction,
            "mean_coverage_colep": float(self.coverage_colep.mean()),
            "mean_coverage_bare": float(self.coverage_bare.mean()),
            "mean_accuracy_delta_adversarial": float(self.accuracy_delta_adversarial.mean()),
            "mean_accuracy_delta_benign": float(self.accuracy_delta_benign.mean()),
            "accuracy_bound_checks": self.bound_checks,
            "accuracy_bounds_hold": self.bounds_hold,
        }


def _coverage(kb, cal, test, target) -> float:
    thresholds = calibration_thresholds(cal.calibration_set(), kb, target)
    inside = prediction_sets(colep_probabilities(test.beliefs, kb), thresholds, test.u)
    return float(inside[np.arange(len(test)), test.labels].mean())


def _accuracy_delta(kb, batch) -> float:
    if len(batch) == 0:
        return math.nan
    corrected = colep_probabilities(batch.beliefs, kb)
    deltas = [
        accuracy(corrected[:, j], batch.truth[:, j]) - accuracy(batch.beliefs[:, j], batch.truth[:, j])
        for j in range(kb.num_classes)
    ]
    return float(np.mean(deltas))


def compare_with_bare_model(
    world: WorldSpec,
    kb: KnowledgeBase,
    n_cal: int,
    n_adv: int,
    n_trials: int,
    alpha: float = 0.1,
    stream: int = 5000,
) -> ComparisonReport:
    """Corrected pipeline versus the same pipeline without knowledge.

    Each trial calibrates both on benign draws and measures coverage on
    adversarial draws, plus the change in per-class accuracy on each
    distribution.  The accuracy lower bound is evaluated on a pooled sample
    from the world's own mixture.
    """
    target = CoverageTarget(alpha)
    bare = KnowledgeBase.empty(kb.label_space)
    benign_world, adv_world = world.with_mix(0.0), world.with_mix(1.0)
    cov_k, cov_b, d_adv, d_ben = [], [], [], []
    for trial in range(n_trials):
        base = stream + 3 * trial
        cal = generate(benign_world, n_cal, base)
        test = generate(adv_world, n_adv, base + 1)
        cov_k.append(_coverage(kb, cal, test, target))
        cov_b.append(_coverage(bare, cal, test, target))
        d_adv.append(_accuracy_delta(kb, test))
        d_ben.append(_accuracy_delta(kb, generate(benign_world, n_adv, base + 2)))

    pooled = generate(world, max(n_cal, n_adv) * 10, stream - 1)
    corrected = colep_probabilities(pooled.beliefs, kb)
    labels = pooled.labels
    checks = []
    for j in range(kb.num_classes):
        off, on = labels != j, labels == j
        if not off.any() or not on.any():
            checks.append({"j": j, "applicable": False, "holds": True})
            continue
        e_off, e_on = float(corrected[off, j].mean()), float(corrected[on, j].mean())
        bound = accuracy_bound(float(off.mean()), float(on.mean()), e_off, e_on)
        measured = accuracy(corrected[:, j], pooled.truth[:, j])
        checks.append({
            "j": j,
            "e_off": e_off,
            "e_on": e_on,
            "bound": bound,
            "accuracy": measured,
            "applicable": e_off < 0.5 < e_on,
            "holds": measured >= bound,
        })
    return ComparisonReport(np.array(cov_k), np.array(cov_b), np.array(d_adv), np.array(d_ben), checks)

"""Split conformal prediction over corrected class probabilities.

Each class gets its own binary problem: for calibration record ``i`` and class
``j`` the score is the randomized APS score of the two-outcome vector
``[p, 1 - p]`` evaluated at whether ``Y_i == j``.  A class enters the test
prediction set when its "member" score falls below that class's calibration
quantile.  Certified sets calibrate on worst-case scores over perturbation
boxes instead.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .certify import IntervalVector, propagate_bounds_batch
from .circuits import KnowledgeBase, colep_probabilities
from .exceptions import NumericError, StructuralError

MASSART_CONSTANT = math.sqrt(math.log(2.0) / 2.0)
SMOOTHING_CONSTANT = math.sqrt(2.0) / (4.0 * math.sqrt(math.log(2.0)) + 8.0 / math.pi)


def aps_score(pi_vec, y: int, u: float) -> float:
    """Randomized APS score: mass of strictly more probable classes plus ``u`` times the label's own."""
    pi_vec = np.asarray(pi_vec, dtype=np.float64)
    p_y = pi_vec[y]
    return float(pi_vec[pi_vec > p_y].sum() + u * p_y)


def aps_scores(probs, labels, u) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    p_y = probs[np.arange(probs.shape[0]), labels]
    above = np.where(probs > p_y[:, None], probs, 0.0).sum(axis=1)
    return above + np.asarray(u) * p_y


def binary_score(p, matches, u):
    """Score of a binary outcome with probability ``p`` of being on.

    ``matches=True`` scores the "on" outcome: ``1 - p + u*p``; otherwise
    ``p + u*(1 - p)``.
    """
    p = np.asarray(p, dtype=np.float64)
    matches = np.asarray(matches, dtype=bool)
    u = np.asarray(u, dtype=np.float64)
    out = np.where(matches, 1.0 - p + u * p, p + u * (1.0 - p))
    return float(out) if out.ndim == 0 else out


def worst_case_score(lower, upper, matches, u):
    """Largest :func:`binary_score` over ``p`` in ``[lower, upper]``."""
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    matches = np.asarray(matches, dtype=bool)
    u = np.asarray(u, dtype=np.float64)
    out = np.where(matches, 1.0 - lower + u * lower, upper + u * (1.0 - upper))
    return float(out) if out.ndim == 0 else out


def _order_rank(level: float, n: int) -> int:
    # round first so that e.g. 0.9 * 10 = 9.000000000000002 still gives 9
    return math.ceil(round(level * (n + 1), 9))


def conformal_quantile(scores, level: float) -> float:
    """The ``ceil(level * (n + 1))``-th smallest score, or ``inf`` when that rank exceeds ``n``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    n = scores.size
    if n == 0:
        raise StructuralError("cannot take a quantile of no scores")
    if not np.all(np.isfinite(scores)):
        raise NumericError("scores must be finite")
    k = _order_rank(level, n)
    if k > n:
        return math.inf
    if k < 1:
        return -math.inf
    return float(np.partition(scores, k - 1)[k - 1])


@dataclass(frozen=True, eq=False)
class CoverageTarget:
    alpha: float
    per_class_alpha: np.ndarray | None = None

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise StructuralError("alpha must lie in (0, 1)")
        if self.per_class_alpha is not None:
            a = np.asarray(self.per_class_alpha, dtype=np.float64)
            if np.any(a <= 0) or np.any(a > self.alpha + 1e-12):
                raise StructuralError("per-class alpha must lie in (0, alpha]")
            object.__setattr__(self, "per_class_alpha", a)

    def class_alphas(self, num_classes: int) -> np.ndarray:
        if self.per_class_alpha is None:
            return np.full(num_classes, self.alpha)
        if self.per_class_alpha.shape != (num_classes,):
            raise StructuralError("per-class alpha has the wrong length")
        return self.per_class_alpha


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    """Held-out records: beliefs, labels and one uniform draw per (record, class).

    ``lower``/``upper`` optionally hold perturbation intervals around the
    beliefs for certified calibration.
    """

    beliefs: np.ndarray
    labels: np.ndarray
    u: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        beliefs = np.atleast_2d(np.asarray(self.beliefs, dtype=np.float64))
        labels = np.asarray(self.labels, dtype=np.int64).ravel()
        u = np.asarray(self.u, dtype=np.float64)
        if beliefs.shape[0] == 0:
            raise StructuralError("calibration set is empty")
        if labels.shape[0] != beliefs.shape[0] or u.shape[0] != beliefs.shape[0]:
            raise StructuralError("calibration columns differ in length")
        if u.ndim == 1:
            u = u[:, None]
        if np.any(u < 0) or np.any(u > 1):
            raise NumericError("u draws must lie in [0, 1]")
        if np.any(labels < 0):
            raise StructuralError("labels must be non-negative")
        object.__setattr__(self, "beliefs", beliefs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "u", u)
        if (self.lower is None) != (self.upper is None):
            raise StructuralError("give both interval endpoints or neither")
        if self.lower is not None:
            iv = IntervalVector(np.atleast_2d(self.lower), np.atleast_2d(self.upper))
            if iv.lower.shape != beliefs.shape:
                raise StructuralError("interval shape differs from beliefs")
            object.__setattr__(self, "lower", iv.lower)
            object.__setattr__(self, "upper", iv.upper)

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def intervals(self) -> IntervalVector:
        if self.lower is None:
            return IntervalVector.degenerate(self.beliefs)
        return IntervalVector(self.lower, self.upper)

    def class_u(self, num_classes: int) -> np.ndarray:
        if self.u.shape[1] == 1:
            return np.repeat(self.u, num_classes, axis=1)
        if self.u.shape[1] != num_classes:
            raise StructuralError("need one u draw per class")
        return self.u

    @classmethod
    def with_random_u(cls, beliefs, labels, num_classes: int, rng, **intervals) -> "CalibrationSet":
        rng = np.random.default_rng(rng)
        n = np.atleast_2d(beliefs).shape[0]
        return cls(beliefs, labels, rng.uniform(size=(n, num_classes)), **intervals)


@dataclass(frozen=True, eq=False)
class PredictionSet:
    members: frozenset
    per_class_thresholds: np.ndarray

    def __contains__(self, j) -> bool:
        return j in self.members

    def __len__(self) -> int:
        return len(self.members)


@dataclass(frozen=True, eq=False)
class CertifiedCoverage:
    tau_per_class: np.ndarray
    n_cal: int
    bound_family: str = "exact"
    tau: float = field(init=False)
    finite_sample_tau: float = field(init=False)

    def __post_init__(self):
        tau_j = np.clip(np.asarray(self.tau_per_class, dtype=np.float64), 0.0, 1.0)
        object.__setattr__(self, "tau_per_class", tau_j)
        object.__setattr__(self, "tau", float(tau_j.min()))
        object.__setattr__(self, "finite_sample_tau", min(self.tau, finite_sample_coverage(tau_j, self.n_cal)))


def class_score_matrix(probs, labels, u) -> np.ndarray:
    """Binary scores of every record against every class, shape ``(n, num_classes)``."""
    probs = np.asarray(probs, dtype=np.float64)
    matches = np.asarray(labels)[:, None] == np.arange(probs.shape[1])[None, :]
    return binary_score(probs, matches, u)


def worst_case_score_matrix(lower, upper, labels, u) -> np.ndarray:
    lower = np.asarray(lower, dtype=np.float64)
    matches = np.asarray(labels)[:, None] == np.arange(lower.shape[1])[None, :]
    return worst_case_score(lower, upper, matches, u)


def class_thresholds(scores, target: CoverageTarget, level_shift: float = 0.0) -> np.ndarray:
    """Per-class quantiles of a ``(n, num_classes)`` score matrix at level ``1 - alpha_j + level_shift``."""
    scores = np.atleast_2d(scores)
    alphas = target.class_alphas(scores.shape[1])
    levels = 1.0 - alphas + level_shift
    if np.any(levels >= 1.0):
        raise StructuralError(f"conformal level {levels.max()} is not below 1")
    return np.array([conformal_quantile(scores[:, j], levels[j]) for j in range(scores.shape[1])])


def member_scores(probs, u) -> np.ndarray:
    """Score of each class being the answer, i.e. ``binary_score(p, True, u)``."""
    probs = np.asarray(probs, dtype=np.float64)
    return 1.0 - probs + np.asarray(u) * probs


def prediction_sets(probs, thresholds, u) -> np.ndarray:
    """Boolean membership matrix ``(n_test, num_classes)``."""
    return member_scores(probs, u) <= np.asarray(thresholds)[None, :]


def calibration_thresholds(calib: CalibrationSet, kb: KnowledgeBase, target: CoverageTarget) -> np.ndarray:
    probs = colep_probabilities(calib.beliefs, kb)
    scores = class_score_matrix(probs, calib.labels, calib.class_u(kb.num_classes))
    return class_thresholds(scores, target)


def certified_thresholds(
    calib: CalibrationSet, kb: KnowledgeBase, target: CoverageTarget, fs_beta: float | None = None
) -> np.ndarray:
    shift = 0.0 if fs_beta is None else 2.0 * fs_beta
    L, U = propagate_bounds_batch(calib.intervals, kb)
    scores = worst_case_score_matrix(L, U, calib.labels, calib.class_u(kb.num_classes))
    return class_thresholds(scores, target, level_shift=shift)


def _test_u(u, rng, num_classes: int) -> np.ndarray:
    if u is not None:
        u = np.asarray(u, dtype=np.float64)
        return np.broadcast_to(u, (num_classes,)) if u.ndim == 0 else u
    return np.random.default_rng(rng).uniform(size=num_classes)


def _single_set(test_beliefs, kb: KnowledgeBase, thresholds, u) -> PredictionSet:
    probs = colep_probabilities(np.asarray(test_beliefs)[None, :], kb)[0]
    inside = member_scores(probs, u) <= thresholds
    return PredictionSet(frozenset(int(j) for j in np.flatnonzero(inside)), thresholds)


def predict_set(
    test_beliefs, calib: CalibrationSet, kb: KnowledgeBase, target: CoverageTarget, u=None, rng=0
) -> PredictionSet:
    """Conformal prediction set for one test belief vector.

    ``u`` holds the test draw per class; if omitted it is drawn from ``rng``.
    """
    thresholds = calibration_thresholds(calib, kb, target)
    return _single_set(test_beliefs, kb, thresholds, _test_u(u, rng, kb.num_classes))


def predict_set_certified(
    test_beliefs,
    calib: CalibrationSet,
    kb: KnowledgeBase,
    target: CoverageTarget,
    fs_beta: float | None = None,
    u=None,
    rng=0,
) -> PredictionSet:
    """Prediction set that keeps coverage when the test beliefs move inside their boxes.

    Calibration uses worst-case scores over ``calib``'s intervals.  When those
    intervals carry Monte Carlo error with failure probability ``fs_beta``, the
    quantile level is raised to ``1 - alpha + 2*fs_beta``.
    """
    thresholds = certified_thresholds(calib, kb, target, fs_beta)
    return _single_set(test_beliefs, kb, thresholds, _test_u(u, rng, kb.num_classes))


def certified_coverage(clean_scores, worst_scores, target: CoverageTarget, bound_family: str = "exact") -> CertifiedCoverage:
    """Worst-case coverage of the standard set when test beliefs are perturbed.

    For each class, the largest ``tau`` whose worst-case quantile stays below
    the clean ``1 - alpha_j`` quantile is ``m_j / (n + 1)`` with ``m_j`` the
    number of worst-case scores at or below that clean quantile.
    """
    clean = np.atleast_2d(np.asarray(clean_scores, dtype=np.float64))
    worst = np.atleast_2d(np.asarray(worst_scores, dtype=np.float64))
    if clean.shape != worst.shape:
        raise StructuralError("clean and worst-case score matrices differ in shape")
    n = clean.shape[0]
    q = class_thresholds(clean, target)
    m = (worst <= q[None, :]).sum(axis=0)
    return CertifiedCoverage(m / (n + 1.0), n, bound_family)


def finite_sample_coverage(tau, n_cal: int) -> float:
    """Coverage bound after accounting for the finite calibration sample."""
    if n_cal < 1:
        raise StructuralError("n_cal must be positive")
    t = tau.tau_per_class if isinstance(tau, CertifiedCoverage) else np.asarray(tau, dtype=np.float64)
    value = (1.0 + 1.0 / n_cal) * float(np.min(t)) - (MASSART_CONSTANT + SMOOTHING_CONSTANT) / math.sqrt(n_cal)
    return min(1.0, max(0.0, value))

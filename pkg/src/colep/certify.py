"""Perturbation bounds for beliefs and for corrected class probabilities.

Per-entry belief intervals come from the Gaussian smoothing bound, either in
its exact form or with Monte Carlo estimation error (Hoeffding on the mean,
Bernstein on the output).  Intervals are pushed through the knowledge circuits
with :func:`propagate_bounds`.

Every circuit is an attractive pairwise binary model (a rule with weight
``w >= 0`` adds ``-w*a + w*a*b`` to the log potential), so the corrected
marginal of any bit is non-decreasing in every input belief.  The exact bounds
over a box are therefore the corrected probabilities at its all-lower and
all-upper corners, which is what the default method computes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .circuits import CircuitSpec, KnowledgeBase, colep_probabilities, _check_beliefs
from .exceptions import NumericError, StructuralError
from .kernels import log_partial_sums

_SATURATION = 8.0


def norm_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * special.erfc(-x / math.sqrt(2.0))
    out = np.where(x > _SATURATION, 1.0, np.where(x < -_SATURATION, 0.0, out))
    return out if out.ndim else float(out)


def norm_ppf(p):
    out = special.ndtri(np.asarray(p, dtype=np.float64))
    return out if np.ndim(out) else float(out)


@dataclass(frozen=True)
class PerturbationBudget:
    delta: float
    sigma: float

    def __post_init__(self):
        if not (np.isfinite(self.delta) and np.isfinite(self.sigma)):
            raise NumericError("budget must be finite")
        if self.delta < 0:
            raise StructuralError("delta must be non-negative")
        if self.sigma <= 0:
            raise StructuralError("sigma must be positive")

    @property
    def ratio(self) -> float:
        return self.delta / self.sigma


@dataclass(frozen=True, eq=False)
class IntervalVector:
    """Entrywise ``[lower, upper]`` bounds; a single vector or a batch of rows."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape:
            raise StructuralError("lower and upper differ in shape")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise NumericError("interval endpoints must be finite")
        if np.any(lo < 0) or np.any(hi > 1):
            raise NumericError("interval endpoints must lie in [0, 1]")
        if np.any(lo > hi):
            raise StructuralError("lower endpoint exceeds upper endpoint")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def degenerate(cls, beliefs) -> "IntervalVector":
        b = np.asarray(beliefs, dtype=np.float64)
        return cls(b, b.copy())

    @classmethod
    def from_smoothing(cls, beliefs, budget: PerturbationBudget) -> "IntervalVector":
        return cls(*smoothing_bound(beliefs, budget))

    def contains(self, beliefs, tol: float = 0.0) -> bool:
        b = np.asarray(beliefs)
        return bool(np.all(b >= self.lower - tol) and np.all(b <= self.upper + tol))


def smoothing_bound(g, budget: PerturbationBudget):
    """Range of a Gaussian-smoothed probability ``g`` under an l2 shift of at most ``delta``.

    Returns ``(Phi(Phi^-1(g) - delta/sigma), Phi(Phi^-1(g) + delta/sigma))``.
    ``g`` in {0, 1} is a fixed point of both ends.
    """
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NumericError("smoothed probability must be finite")
    if np.any(g < 0) or np.any(g > 1):
        raise NumericError("smoothed probability must lie in [0, 1]")
    if budget.delta == 0:
        lo, hi = g.copy(), g.copy()
    else:
        z = special.ndtri(g)
        lo = norm_cdf(z - budget.ratio)
        hi = norm_cdf(z + budget.ratio)
        lo = np.minimum(np.asarray(lo, dtype=np.float64), g)
        hi = np.maximum(np.asarray(hi, dtype=np.float64), g)
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


@dataclass(frozen=True)
class MonteCarloEstimate:
    """Empirical mean and variance of ``n_samples`` smoothing draws.

    ``confidence`` is the failure probability of the finite-sample bound.
    """

    mean: float
    variance: float
    n_samples: int
    confidence: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        var = np.asarray(self.variance, dtype=np.float64)
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(var))):
            raise NumericError("estimate must be finite")
        if np.any(mean < 0) or np.any(mean > 1):
            raise NumericError("mean must lie in [0, 1]")
        if np.any(var < 0):
            raise NumericError("variance must be non-negative")
        if int(self.n_samples) < 2:
            raise StructuralError("at least two Monte Carlo draws are required")
        if not 0 < self.confidence < 0.5:
            raise StructuralError("confidence level must lie in (0, 0.5)")

    @classmethod
    def from_draws(cls, draws, confidence: float) -> "MonteCarloEstimate":
        draws = np.asarray(draws, dtype=np.float64)
        return cls(float(draws.mean()), float(draws.var(ddof=1)), draws.size, confidence)

    @classmethod
    def from_bernoulli_mean(cls, mean, n_samples: int, confidence: float) -> "MonteCarloEstimate":
        """Estimate whose draws are 0/1 votes with empirical frequency ``mean``."""
        mean = np.asarray(mean, dtype=np.float64)
        var = mean * (1.0 - mean) * n_samples / (n_samples - 1)
        return cls(mean, var, n_samples, confidence)


def hoeffding_error(n_samples: int, confidence: float) -> float:
    return math.sqrt(math.log(1.0 / confidence) / (2.0 * n_samples))


def bernstein_error(variance, n_samples: int, confidence: float):
    log_term = math.log(2.0 / confidence)
    return np.sqrt(2.0 * np.asarray(variance) * log_term / n_samples) + 7.0 * log_term / (3.0 * (n_samples - 1))


def shifted_smoothing_bound(mean, ratio: float, mean_error, output_error):
    """Smoothing bound around ``mean -/+ mean_error``, widened by ``output_error`` and clamped to [0, 1]."""
    mean = np.asarray(mean, dtype=np.float64)
    lo_in = np.clip(mean - mean_error, 0.0, 1.0)
    hi_in = np.clip(mean + mean_error, 0.0, 1.0)
    lo = np.asarray(norm_cdf(special.ndtri(lo_in) - ratio)) - output_error
    hi = np.asarray(norm_cdf(special.ndtri(hi_in) + ratio)) + output_error
    lo, hi = np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)
    if lo.ndim == 0:
        return float(lo), float(hi)
    return lo, hi


def smoothing_bound_finite_sample(est: MonteCarloEstimate, budget: PerturbationBudget):
    """Smoothing bound that also covers Monte Carlo error, valid with probability ``1 - 2*confidence``."""
    b_mean = hoeffding_error(est.n_samples, est.confidence)
    b_out = bernstein_error(est.variance, est.n_samples, est.confidence)
    return shifted_smoothing_bound(est.mean, budget.ratio, b_mean, b_out)


def monotone_extremizer(circuit: CircuitSpec, j: int, direction: str) -> tuple:
    """Endpoint choice per variable that attains the bound on ``j``'s corrected marginal.

    Variables in ``j``'s component take the upper endpoint for the upper bound
    and the lower endpoint for the lower bound; variables outside it cannot
    move the marginal and are reported as ``None``.
    """
    if direction not in ("upper", "lower"):
        raise ValueError("direction must be 'upper' or 'lower'")
    relevant = set(circuit.component_of(j).variables)
    return tuple(direction if v in relevant else None for v in range(circuit.width))


def _closed_form_bounds(lower, upper, circuit: CircuitSpec, j: int):
    # split-endpoint bound: partial sums with j pinned, antecedents and
    # consequents at opposite ends in numerator and denominator
    comp = circuit.component_of(j)
    lo_j, hi_j = lower[:, j], upper[:, j]
    if comp.size == 1:
        return lo_j.copy(), hi_j.copy()
    cols = list(comp.variables)
    is_ante = np.array([v in circuit.antecedents for v in cols])
    pos = comp.position(j)
    lo, hi = lower[:, cols], upper[:, cols]
    ante_hi = np.where(is_ante, hi, lo)
    ante_lo = np.where(is_ante, lo, hi)
    g_small = log_partial_sums(ante_hi, comp.bits, comp.log_factor, pos)
    g_large = log_partial_sums(ante_lo, comp.bits, comp.log_factor, pos)

    def corrected(p_j, log_g0, log_g1):
        with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
            odds = (1.0 - p_j) / p_j * np.exp(log_g0 - log_g1)
            out = 1.0 / (1.0 + odds)
        out = np.where(p_j <= 0.0, 0.0, out)
        return np.where(p_j >= 1.0, 1.0, out)

    upper_bound = corrected(hi_j, g_small[:, 0], g_large[:, 1])
    lower_bound = corrected(lo_j, g_large[:, 0], g_small[:, 1])
    return lower_bound, upper_bound


def propagate_bounds_batch(iv: IntervalVector, kb: KnowledgeBase, method: str = "corner"):
    """Bounds on every class's corrected probability for each row of ``iv``.

    Returns ``(L, U)`` of shape ``(n, num_classes)``.  ``method="corner"`` is
    exact; ``method="closed_form"`` uses split endpoints and is sound but
    looser.
    """
    width = kb.label_space.width
    lower = _check_beliefs(np.atleast_2d(iv.lower), width)
    upper = _check_beliefs(np.atleast_2d(iv.upper), width)
    if method == "corner":
        return colep_probabilities(lower, kb), colep_probabilities(upper, kb)
    if method != "closed_form":
        raise ValueError(f"unknown method {method!r}")
    L = np.zeros((lower.shape[0], kb.num_classes))
    U = np.zeros_like(L)
    for beta, circuit in zip(kb.mixture_weights, kb.circuits):
        for j in range(kb.num_classes):
            lo_r, hi_r = _closed_form_bounds(lower, upper, circuit, j)
            L[:, j] += beta * lo_r
            U[:, j] += beta * hi_r
    return np.clip(L, 0.0, 1.0), np.clip(U, 0.0, 1.0)


def propagate_bounds(iv: IntervalVector, kb: KnowledgeBase, j: int, method: str = "corner"):
    """``(L, U)`` bounds on class ``j``'s corrected probability over the box ``iv``."""
    if np.ndim(iv.lower) != 1:
        raise StructuralError("propagate_bounds takes a single interval vector")
    if not 0 <= j < kb.num_classes:
        raise StructuralError(f"class {j} out of range")
    L, U = propagate_bounds_batch(iv, kb, method)
    return float(L[0, j]), float(U[0, j])

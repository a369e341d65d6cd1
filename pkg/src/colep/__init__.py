"""Conformal prediction with knowledge-circuit correction and certified coverage."""

from .analysis import (
    compare_with_bare_model,
    effectiveness_check,
    estimate_model_utility,
    reasoning_effectiveness,
    rule_utility,
)
from .certify import (
    IntervalVector,
    MonteCarloEstimate,
    PerturbationBudget,
    monotone_extremizer,
    propagate_bounds,
    propagate_bounds_batch,
    smoothing_bound,
    smoothing_bound_finite_sample,
)
from .circuits import (
    CircuitSpec,
    KnowledgeBase,
    KnowledgeRule,
    LabelSpace,
    colep_probabilities,
    colep_probability,
    estimate_mixture_weights,
    factor_value,
    load_knowledge_base,
    pc_marginal,
    pc_marginals,
)
from .conformal import (
    CalibrationSet,
    CertifiedCoverage,
    CoverageTarget,
    PredictionSet,
    aps_score,
    binary_score,
    certified_coverage,
    conformal_quantile,
    finite_sample_coverage,
    predict_set,
    predict_set_certified,
    worst_case_score,
)
from .exceptions import NumericError, StructuralError
from .simgen import WorldSpec, generate, interval_adversary, paired_concept_knowledge, paired_concept_world

__version__ = "0.1.0"

__all__ = [
    "CalibrationSet",
    "CertifiedCoverage",
    "CircuitSpec",
    "CoverageTarget",
    "IntervalVector",
    "KnowledgeBase",
    "KnowledgeRule",
    "LabelSpace",
    "MonteCarloEstimate",
    "NumericError",
    "PerturbationBudget",
    "PredictionSet",
    "StructuralError",
    "WorldSpec",
    "aps_score",
    "binary_score",
    "certified_coverage",
    "colep_probabilities",
    "colep_probability",
    "compare_with_bare_model",
    "conformal_quantile",
    "effectiveness_check",
    "estimate_mixture_weights",
    "estimate_model_utility",
    "factor_value",
    "finite_sample_coverage",
    "generate",
    "interval_adversary",
    "load_knowledge_base",
    "monotone_extremizer",
    "paired_concept_knowledge",
    "paired_concept_world",
    "pc_marginal",
    "pc_marginals",
    "predict_set",
    "predict_set_certified",
    "propagate_bounds",
    "propagate_bounds_batch",
    "reasoning_effectiveness",
    "rule_utility",
    "smoothing_bound",
    "smoothing_bound_finite_sample",
    "worst_case_score",
]

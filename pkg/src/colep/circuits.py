"""Knowledge circuits over class and concept bits.

Each circuit holds weighted single-literal implications ``a => b`` over the
concatenated label vector (``num_classes`` class bits followed by
``num_concepts`` concept bits).  Given a belief vector, a circuit reweights the
product of independent Bernoulli beliefs by ``exp(sum of satisfied rule
weights)`` and returns the corrected marginal of a class bit.  A knowledge base
mixes several circuits with non-negative weights summing to one.

Marginals are computed by exact enumeration in log space.  The fast path only
enumerates the connected component (in the rule graph) containing the target,
which is exact because components are independent under the reweighted
distribution.  The oracle path enumerates the full joint and exists to
cross-check the fast one.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

from .exceptions import NumericError, StructuralError
from .kernels import assignment_table, component_marginals

DEFAULT_RULE_WEIGHT = 1.5
MAX_ENUMERATION_WIDTH = 20


@dataclass(frozen=True)
class LabelSpace:
    num_classes: int
    num_concepts: int = 0

    def __post_init__(self):
        if int(self.num_classes) < 1:
            raise StructuralError("num_classes must be positive")
        if int(self.num_concepts) < 0:
            raise StructuralError("num_concepts must be non-negative")

    @property
    def width(self) -> int:
        return self.num_classes + self.num_concepts

    def concept_index(self, l: int) -> int:
        if not 0 <= l < self.num_concepts:
            raise StructuralError(f"concept {l} out of range")
        return self.num_classes + l


@dataclass(frozen=True)
class KnowledgeRule:
    antecedent: int
    consequent: int
    weight: float = DEFAULT_RULE_WEIGHT

    def __post_init__(self):
        if self.antecedent == self.consequent:
            raise StructuralError("a rule cannot imply its own antecedent")
        if self.antecedent < 0 or self.consequent < 0:
            raise StructuralError("rule indices must be non-negative")
        if not np.isfinite(self.weight):
            raise NumericError("rule weight must be finite")
        if self.weight < 0:
            raise StructuralError("rule weight must be non-negative")

    def satisfied(self, mu) -> bool:
        return not (mu[self.antecedent] and not mu[self.consequent])


@dataclass(frozen=True)
class Component:
    """A connected set of variables in one circuit's rule graph.

    ``variables`` are global indices in ascending order; ``rules`` use local
    positions into ``variables``.
    """

    variables: tuple[int, ...]
    rules: tuple[tuple[int, int, float], ...] = ()

    @property
    def size(self) -> int:
        return len(self.variables)

    def position(self, index: int) -> int:
        return self.variables.index(index)

    @cached_property
    def bits(self) -> np.ndarray:
        if self.size > MAX_ENUMERATION_WIDTH:
            raise StructuralError(
                f"component of size {self.size} exceeds the enumeration cap of {MAX_ENUMERATION_WIDTH}"
            )
        return assignment_table(self.size)

    @cached_property
    def log_factor(self) -> np.ndarray:
        bits = self.bits
        out = np.zeros(bits.shape[0])
        for a, s, w in self.rules:
            violated = (bits[:, a] == 1) & (bits[:, s] == 0)
            out += np.where(violated, 0.0, w)
        return out


@dataclass(frozen=True)
class CircuitSpec:
    """A homogeneous set of implication rules over ``label_space``.

    Homogeneity means no index is used both as an antecedent and as a
    consequent.  The rule graph's connected components are computed once here.
    """

    rules: tuple[KnowledgeRule, ...]
    label_space: LabelSpace
    antecedents: frozenset = field(init=False, repr=False)
    consequents: frozenset = field(init=False, repr=False)
    components: tuple[Component, ...] = field(init=False, repr=False)
    _component_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        rules = tuple(self.rules)
        object.__setattr__(self, "rules", rules)
        width = self.label_space.width
        for rule in rules:
            if rule.antecedent >= width or rule.consequent >= width:
                raise StructuralError(f"rule {rule} indexes outside width {width}")
        ante = frozenset(r.antecedent for r in rules)
        cons = frozenset(r.consequent for r in rules)
        if ante & cons:
            raise StructuralError(
                f"circuit is not homogeneous: {sorted(ante & cons)} used on both sides"
            )
        object.__setattr__(self, "antecedents", ante)
        object.__setattr__(self, "consequents", cons)

        parent = list(range(width))

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for r in rules:
            ra, rb = find(r.antecedent), find(r.consequent)
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)

        groups: dict[int, list[int]] = {}
        for v in sorted(ante | cons):
            groups.setdefault(find(v), []).append(v)
        components = []
        component_id = {}
        for root in sorted(groups):
            variables = tuple(groups[root])
            local = {v: i for i, v in enumerate(variables)}
            comp_rules = tuple(
                (local[r.antecedent], local[r.consequent], float(r.weight))
                for r in rules
                if find(r.antecedent) == root
            )
            for v in variables:
                component_id[v] = len(components)
            components.append(Component(variables, comp_rules))
        object.__setattr__(self, "components", tuple(components))
        object.__setattr__(self, "_component_id", component_id)

    @property
    def width(self) -> int:
        return self.label_space.width

    def component_of(self, index: int) -> Component:
        """Connected component containing ``index``; a lone variable if no rule touches it."""
        cid = self._component_id.get(index)
        if cid is None:
            return Component((index,))
        return self.components[cid]

    def role(self, index: int) -> str | None:
        if index in self.antecedents:
            return "antecedent"
        if index in self.consequents:
            return "consequent"
        return None

    def neighbours(self, index: int) -> tuple[int, ...]:
        return tuple(v for v in self.component_of(index).variables if v != index)

    def neighbour_antecedents(self, index: int) -> tuple[int, ...]:
        return tuple(v for v in self.neighbours(index) if v in self.antecedents)

    def neighbour_consequents(self, index: int) -> tuple[int, ...]:
        return tuple(v for v in self.neighbours(index) if v in self.consequents)

    def min_weight(self, index: int) -> float:
        rules = self.component_of(index).rules
        return min((w for _, _, w in rules), default=0.0)


@dataclass(frozen=True, eq=False)
class KnowledgeBase:
    circuits: tuple[CircuitSpec, ...]
    mixture_weights: np.ndarray

    def __post_init__(self):
        circuits = tuple(self.circuits)
        if not circuits:
            raise StructuralError("a knowledge base needs at least one circuit")
        space = circuits[0].label_space
        if any(c.label_space != space for c in circuits):
            raise StructuralError("all circuits must share one label space")
        beta = np.asarray(self.mixture_weights, dtype=np.float64).copy()
        if beta.shape != (len(circuits),):
            raise StructuralError("one mixture weight per circuit is required")
        if not np.all(np.isfinite(beta)):
            raise NumericError("mixture weights must be finite")
        if np.any(beta < 0) or abs(beta.sum() - 1.0) > 1e-9:
            raise StructuralError("mixture weights must be non-negative and sum to 1")
        beta.flags.writeable = False
        object.__setattr__(self, "circuits", circuits)
        object.__setattr__(self, "mixture_weights", beta)

    @property
    def label_space(self) -> LabelSpace:
        return self.circuits[0].label_space

    @property
    def num_classes(self) -> int:
        return self.label_space.num_classes

    @classmethod
    def empty(cls, label_space: LabelSpace) -> "KnowledgeBase":
        """A single rule-free circuit: corrected probabilities equal the inputs."""
        return cls((CircuitSpec((), label_space),), np.ones(1))


def _check_beliefs(pi, width: int) -> np.ndarray:
    pi = np.asarray(pi, dtype=np.float64)
    if pi.shape[-1] != width:
        raise StructuralError(f"belief width {pi.shape[-1]} does not match label space width {width}")
    if not np.all(np.isfinite(pi)):
        raise NumericError("beliefs must be finite")
    if np.any(pi < 0) or np.any(pi > 1):
        raise NumericError("beliefs must lie in [0, 1]")
    return pi


def log_factor_value(mu, circuit: CircuitSpec) -> float:
    mu = np.asarray(mu)
    if mu.shape != (circuit.width,):
        raise StructuralError(f"assignment width {mu.shape} does not match {circuit.width}")
    return float(sum(r.weight for r in circuit.rules if r.satisfied(mu)))


def factor_value(mu, circuit: CircuitSpec) -> float:
    """Rule factor ``exp(sum of weights of satisfied rules)`` for a full assignment."""
    return float(np.exp(log_factor_value(mu, circuit)))


def _oracle_marginal(pi: np.ndarray, circuit: CircuitSpec, j: int) -> float:
    # enumerate every assignment of the full label vector
    width = circuit.width
    if width > MAX_ENUMERATION_WIDTH:
        raise StructuralError(f"oracle enumeration is capped at width {MAX_ENUMERATION_WIDTH}")
    mus = np.array(list(itertools.product((0, 1), repeat=width)), dtype=bool)
    with np.errstate(divide="ignore"):
        log_on, log_off = np.log(pi), np.log1p(-pi)
    logw = np.where(mus, log_on, log_off).sum(axis=1)
    for rule in circuit.rules:
        ok = ~(mus[:, rule.antecedent] & ~mus[:, rule.consequent])
        logw = logw + np.where(ok, rule.weight, 0.0)
    top = logw.max()
    weights = np.exp(logw - top)
    return float(weights[mus[:, j]].sum() / weights.sum())


def pc_marginal(pi, circuit: CircuitSpec, j: int, method: str = "fast") -> float:
    """Corrected probability that bit ``j`` is on under one circuit.

    ``method="fast"`` enumerates only ``j``'s component; ``method="oracle"``
    enumerates every assignment of the full vector (width at most 20).
    """
    pi = _check_beliefs(pi, circuit.width)
    if pi.ndim != 1:
        raise StructuralError("pc_marginal takes a single belief vector")
    if not 0 <= j < circuit.width:
        raise StructuralError(f"index {j} out of range")
    if method == "oracle":
        return _oracle_marginal(pi, circuit, j)
    if method != "fast":
        raise ValueError(f"unknown method {method!r}")
    return float(pc_marginals(pi[None, :], circuit, [j])[0, 0])


def pc_marginals(P, circuit: CircuitSpec, indices: Sequence[int]) -> np.ndarray:
    """Batch version of :func:`pc_marginal`: rows of ``P`` by ``indices``."""
    P = _check_beliefs(np.atleast_2d(P), circuit.width)
    indices = list(indices)
    out = np.empty((P.shape[0], len(indices)))
    by_component: dict[int, list[int]] = {}
    for col, j in enumerate(indices):
        cid = circuit._component_id.get(j)
        if cid is None:
            out[:, col] = P[:, j]
        else:
            by_component.setdefault(cid, []).append(col)
    for cid, cols in by_component.items():
        comp = circuit.components[cid]
        targets = np.array([comp.position(indices[c]) for c in cols], dtype=np.int64)
        sub = P[:, list(comp.variables)]
        out[:, cols] = component_marginals(sub, comp.bits, comp.log_factor, targets)
    return out


def circuit_class_probabilities(P, kb: KnowledgeBase) -> np.ndarray:
    """Per-circuit corrected class probabilities, shape ``(R, n, num_classes)``."""
    P = _check_beliefs(np.atleast_2d(P), kb.label_space.width)
    classes = range(kb.num_classes)
    return np.stack([pc_marginals(P, c, classes) for c in kb.circuits])


def colep_probabilities(P, kb: KnowledgeBase) -> np.ndarray:
    """Mixture-corrected class probabilities for every row, shape ``(n, num_classes)``."""
    per_circuit = circuit_class_probabilities(P, kb)
    return np.clip(np.tensordot(kb.mixture_weights, per_circuit, axes=1), 0.0, 1.0)


def colep_probability(pi, kb: KnowledgeBase, j: int) -> float:
    if not 0 <= j < kb.num_classes:
        raise StructuralError(f"class {j} out of range")
    pi = _check_beliefs(pi, kb.label_space.width)
    return float(sum(b * pc_marginals(pi[None, :], c, [j])[0, 0] for b, c in zip(kb.mixture_weights, kb.circuits)))


def estimate_mixture_weights(beliefs, labels, circuits: Sequence[CircuitSpec]) -> np.ndarray:
    """Mixture weights proportional to each circuit's top-1 accuracy on calibration data.

    Falls back to uniform weights when every circuit has zero accuracy.
    """
    circuits = tuple(circuits)
    if not circuits:
        raise StructuralError("no circuits given")
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=np.float64))
    labels = np.asarray(labels)
    if beliefs.shape[0] == 0 or labels.size == 0:
        raise StructuralError("calibration set is empty")
    if labels.shape[0] != beliefs.shape[0]:
        raise StructuralError("labels and beliefs differ in length")
    n_classes = circuits[0].label_space.num_classes
    acc = np.array([
        np.mean(np.argmax(pc_marginals(beliefs, c, range(n_classes)), axis=1) == labels)
        for c in circuits
    ])
    if acc.sum() == 0:
        return np.full(len(circuits), 1.0 / len(circuits))
    return acc / acc.sum()


def knowledge_base_from_dict(data: dict, beliefs=None, labels=None) -> KnowledgeBase:
    """Build a knowledge base from its JSON form.

    ``"mixture_weights": "estimate"`` needs calibration ``beliefs`` and ``labels``.
    """
    try:
        space = LabelSpace(int(data["num_classes"]), int(data.get("num_concepts", 0)))
        circuits = tuple(
            CircuitSpec(
                tuple(
                    KnowledgeRule(
                        int(r["antecedent"]),
                        int(r["consequent"]),
                        float(r.get("weight", DEFAULT_RULE_WEIGHT)),
                    )
                    for r in c.get("rules", [])
                ),
                space,
            )
            for c in data["circuits"]
        )
    except (KeyError, TypeError) as exc:
        raise StructuralError(f"malformed knowledge base: {exc}") from exc
    if not circuits:
        circuits = (CircuitSpec((), space),)
    weights = data.get("mixture_weights")
    if weights is None:
        weights = np.full(len(circuits), 1.0 / len(circuits))
    elif weights == "estimate":
        if beliefs is None or labels is None:
            raise StructuralError("estimating mixture weights requires calibration data")
        weights = estimate_mixture_weights(beliefs, labels, circuits)
    return KnowledgeBase(circuits, np.asarray(weights, dtype=np.float64))


def knowledge_base_to_dict(kb: KnowledgeBase) -> dict:
    space = kb.label_space
    return {
        "num_classes": space.num_classes,
        "num_concepts": space.num_concepts,
        "circuits": [
            {"rules": [{"antecedent": r.antecedent, "consequent": r.consequent, "weight": r.weight} for r in c.rules]}
            for c in kb.circuits
        ],
        "mixture_weights": [float(b) for b in kb.mixture_weights],
    }


def load_knowledge_base(path, beliefs=None, labels=None) -> KnowledgeBase:
    with open(Path(path)) as fh:
        return knowledge_base_from_dict(json.load(fh), beliefs, labels)


def save_knowledge_base(kb: KnowledgeBase, path) -> None:
    with open(Path(path), "w") as fh:
        json.dump(knowledge_base_to_dict(kb), fh, indent=2)
        fh.write("\n")

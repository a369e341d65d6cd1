"""Synthetic worlds with known ground truth, plus a bounded belief adversary.

A world draws a class label, derives concept bits from a per-class truth
table (optionally flipping each concept), and then produces a belief for every
bit.  Beliefs are symmetric around the truth: with probability ``z`` the
model is confidently right (belief on the true side at least ``t``), and
otherwise it is confidently wrong (belief on the true side at most ``1 - t``).
Samples come either from the benign noise model or, with probability ``mix``,
from the adversarial one.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .certify import PerturbationBudget, smoothing_bound
from .circuits import CircuitSpec, KnowledgeBase, KnowledgeRule, LabelSpace
from .conformal import CalibrationSet
from .exceptions import StructuralError

DEFAULT_SHARPNESS = 4.0


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Per-index confidence threshold ``t`` and hit rate ``z``."""

    t: np.ndarray
    z: np.ndarray
    sharpness: float = DEFAULT_SHARPNESS

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.float64)
        z = np.asarray(self.z, dtype=np.float64)
        if t.shape != z.shape or t.ndim != 1:
            raise StructuralError("t and z must be vectors of equal length")
        if np.any(t < 0.5) or np.any(t > 1) or np.any(z < 0) or np.any(z > 1):
            raise StructuralError("need t in [0.5, 1] and z in [0, 1]")
        if self.sharpness < 1:
            raise StructuralError("sharpness must be at least 1")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "z", z)

    @classmethod
    def split(cls, space: LabelSpace, class_tz, concept_tz, sharpness=DEFAULT_SHARPNESS) -> "NoiseModel":
        """Same ``(t, z)`` for every class bit and another for every concept bit."""
        t = np.r_[np.full(space.num_classes, class_tz[0]), np.full(space.num_concepts, concept_tz[0])]
        z = np.r_[np.full(space.num_classes, class_tz[1]), np.full(space.num_concepts, concept_tz[1])]
        return cls(t, z, sharpness)

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "z": self.z.tolist(), "sharpness": self.sharpness}


@dataclass(frozen=True, eq=False)
class WorldSpec:
    label_space: LabelSpace
    class_priors: np.ndarray
    concept_map: np.ndarray
    concept_flip: np.ndarray
    benign_noise: NoiseModel
    adversarial_noise: NoiseModel
    mix: float = 0.0
    seed: int = 0

    def __post_init__(self):
        space = self.label_space
        priors = np.asarray(self.class_priors, dtype=np.float64)
        cmap = np.asarray(self.concept_map, dtype=np.uint8).reshape(space.num_classes, space.num_concepts)
        flip = np.asarray(self.concept_flip, dtype=np.float64).reshape(space.num_concepts)
        if priors.shape != (space.num_classes,) or np.any(priors < 0) or abs(priors.sum() - 1) > 1e-9:
            raise StructuralError("class priors must be a probability vector over classes")
        if np.any(flip < 0) or np.any(flip > 1):
            raise StructuralError("flip probabilities must lie in [0, 1]")
        for noise in (self.benign_noise, self.adversarial_noise):
            if noise.t.shape != (space.width,):
                raise StructuralError("noise model width does not match the label space")
        if not 0 <= self.mix <= 1:
            raise StructuralError("mix must lie in [0, 1]")
        object.__setattr__(self, "class_priors", priors)
        object.__setattr__(self, "concept_map", cmap)
        object.__setattr__(self, "concept_flip", flip)

    def with_seed(self, seed: int) -> "WorldSpec":
        return WorldSpec(self.label_space, self.class_priors, self.concept_map, self.concept_flip,
                         self.benign_noise, self.adversarial_noise, self.mix, seed)

    def with_mix(self, mix: float) -> "WorldSpec":
        return WorldSpec(self.label_space, self.class_priors, self.concept_map, self.concept_flip,
                         self.benign_noise, self.adversarial_noise, mix, self.seed)

    def to_dict(self) -> dict:
        return {
            "num_classes": self.label_space.num_classes,
            "num_concepts": self.label_space.num_concepts,
            "class_priors": self.class_priors.tolist(),
            "concept_map": self.concept_map.tolist(),
            "concept_flip": self.concept_flip.tolist(),
            "benign_noise": self.benign_noise.to_dict(),
            "adversarial_noise": self.adversarial_noise.to_dict(),
            "mix": self.mix,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "WorldSpec":
        try:
            space = LabelSpace(int(data["num_classes"]), int(data.get("num_concepts", 0)))
            return cls(
                space,
                np.asarray(data["class_priors"]),
                np.asarray(data.get("concept_map", np.zeros((space.num_classes, space.num_concepts)))),
                np.asarray(data.get("concept_flip", np.zeros(space.num_concepts))),
                NoiseModel(**data["benign_noise"]),
                NoiseModel(**data["adversarial_noise"]),
                float(data.get("mix", 0.0)),
                int(data.get("seed", 0)),
            )
        except (KeyError, TypeError) as exc:
            raise StructuralError(f"malformed world spec: {exc}") from exc

    @classmethod
    def load(cls, path) -> "WorldSpec":
        with open(Path(path)) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        with open(Path(path), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class Sample:
    truth: np.ndarray
    beliefs: np.ndarray
    origin: str
    u: np.ndarray
    label: int


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Columnar samples: ground-truth bits, beliefs, origin flags and per-class u draws."""

    truth: np.ndarray
    beliefs: np.ndarray
    adversarial: np.ndarray
    u: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return self.truth.shape[0]

    def __getitem__(self, i) -> Sample:
        origin = "adversarial" if self.adversarial[i] else "benign"
        label = int(np.argmax(self.truth[i, : self.num_classes]))
        return Sample(self.truth[i], self.beliefs[i], origin, self.u[i], label)

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.truth[:, : self.num_classes], axis=1)

    def calibration_set(self, budget: PerturbationBudget | None = None) -> CalibrationSet:
        if budget is None:
            return CalibrationSet(self.beliefs, self.labels, self.u)
        lo, hi = smoothing_bound(self.beliefs, budget)
        return CalibrationSet(self.beliefs, self.labels, self.u, lower=lo, upper=hi)

    def select(self, mask) -> "SampleBatch":
        return SampleBatch(self.truth[mask], self.beliefs[mask], self.adversarial[mask], self.u[mask], self.num_classes)

    def to_csv(self) -> str:
        return samples_to_csv(self.beliefs, self.labels, self.u)


def _rng(world: WorldSpec, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([world.seed, stream])))


def generate(world: WorldSpec, n: int, stream: int = 0) -> SampleBatch:
    """Draw ``n`` samples; identical ``(world, n, stream)`` give identical output.

    ``stream`` selects an independent random stream under the same seed so
    calibration and test draws never overlap.
    """
    if n < 0:
        raise StructuralError("sample count must be non-negative")
    space = world.label_space
    rng = _rng(world, stream)
    labels = rng.choice(space.num_classes, size=n, p=world.class_priors)
    concepts = world.concept_map[labels] ^ (rng.random((n, space.num_concepts)) < world.concept_flip).astype(np.uint8)
    truth = np.zeros((n, space.width), dtype=np.uint8)
    truth[np.arange(n), labels] = 1
    truth[:, space.num_classes:] = concepts
    adversarial = rng.random(n) < world.mix

    ben, adv = world.benign_noise, world.adversarial_noise
    t = np.where(adversarial[:, None], adv.t, ben.t)
    z = np.where(adversarial[:, None], adv.z, ben.z)
    k = np.where(adversarial[:, None], adv.sharpness, ben.sharpness)
    hit = rng.random((n, space.width)) < z
    spread = rng.beta(1.0, k)
    miss = rng.beta(2.0, 2.0, size=(n, space.width))
    # belief on the true side of each bit
    correct_side = np.where(hit, t + (1.0 - t) * spread, (1.0 - t) * miss)
    beliefs = np.where(truth == 1, correct_side, 1.0 - correct_side)
    u = rng.random((n, space.num_classes))
    return SampleBatch(truth, beliefs, adversarial, u, space.num_classes)


def interval_adversary(sample, budget: PerturbationBudget, kb: KnowledgeBase | None = None):
    """Move beliefs inside their smoothing boxes to make the true class look least likely.

    Corrected class probabilities never decrease when any belief increases,
    so the all-lower corner minimizes the true class's corrected probability
    and maximizes its score.  Accepts a :class:`Sample`, a :class:`SampleBatch`
    or a raw belief array.
    """
    beliefs = sample.beliefs if isinstance(sample, (Sample, SampleBatch)) else np.asarray(sample, dtype=np.float64)
    if budget.delta == 0:
        return beliefs.copy()
    lo, _ = smoothing_bound(beliefs, budget)
    return np.asarray(lo, dtype=np.float64)


def aps_adversary(beliefs, labels, num_classes: int, budget: PerturbationBudget) -> np.ndarray:
    """Worst box corner for the multi-class APS score: true class down, rivals up."""
    beliefs = np.atleast_2d(np.asarray(beliefs, dtype=np.float64))
    if budget.delta == 0:
        return beliefs.copy()
    lo, hi = smoothing_bound(beliefs, budget)
    out = np.array(hi)
    rows = np.arange(beliefs.shape[0])
    out[rows, labels] = lo[rows, labels]
    out[:, num_classes:] = beliefs[:, num_classes:]
    return out


def samples_to_csv(beliefs, labels, u=None, lower=None, upper=None) -> str:
    """Calibration CSV text: ``p_i`` (or ``lo_i``/``hi_i``) columns, ``label``, then ``u_j``."""
    beliefs = np.atleast_2d(beliefs)
    width = beliefs.shape[1]
    if lower is not None:
        header = [c for i in range(width) for c in (f"lo_{i}", f"hi_{i}")]
    else:
        header = [f"p_{i}" for i in range(width)]
    header.append("label")
    if u is not None:
        u = np.atleast_2d(u)
        header += [f"u_{j}" for j in range(u.shape[1])]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for i in range(beliefs.shape[0]):
        if lower is not None:
            row = [repr(float(x)) for pair in zip(lower[i], upper[i]) for x in pair]
        else:
            row = [repr(float(x)) for x in beliefs[i]]
        row.append(str(int(labels[i])))
        if u is not None:
            row += [repr(float(x)) for x in u[i]]
        writer.writerow(row)
    return buf.getvalue()


def read_calibration_csv(path, num_classes: int, rng=None) -> CalibrationSet:
    """Parse a calibration CSV; missing ``u`` columns are drawn from ``rng``."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise StructuralError(f"{path} has no records")
    cols = rows[0].keys()
    labels = np.array([int(r["label"]) for r in rows])
    if "p_0" in cols:
        width = sum(1 for c in cols if c.startswith("p_"))
        beliefs = np.array([[float(r[f"p_{i}"]) for i in range(width)] for r in rows])
        lower = upper = None
    elif "lo_0" in cols:
        width = sum(1 for c in cols if c.startswith("lo_"))
        lower = np.array([[float(r[f"lo_{i}"]) for i in range(width)] for r in rows])
        upper = np.array([[float(r[f"hi_{i}"]) for i in range(width)] for r in rows])
        beliefs = 0.5 * (lower + upper)
    else:
        raise StructuralError(f"{path} has neither p_i nor lo_i/hi_i columns")
    if "u_0" in cols:
        u = np.array([[float(r[f"u_{j}"]) for j in range(num_classes)] for r in rows])
    elif "u" in cols:
        u = np.array([float(r["u"]) for r in rows])
    else:
        u = np.random.default_rng(rng).uniform(size=(len(rows), num_classes))
    return CalibrationSet(beliefs, labels, u, lower=lower, upper=upper)


def paired_concept_world(
    num_classes: int = 3,
    benign=((0.7, 0.8), (0.8, 0.9)),
    adversarial=((0.7, 0.8), (0.8, 0.9)),
    mix: float = 0.0,
    seed: int = 0,
    concepts_per_class: int = 1,
    sharpness: float = DEFAULT_SHARPNESS,
) -> WorldSpec:
    """World whose concepts are indicators of the label, ``2 * concepts_per_class`` per class.

    ``benign`` and ``adversarial`` give ``((t, z) for class bits, (t, z) for
    concept bits)``.  The first ``num_classes * concepts_per_class`` concepts
    are "implied" by their class and the rest "imply" it (see
    :func:`paired_concept_knowledge`).  Every concept is on exactly when its
    class is the label.
    """
    k = concepts_per_class
    space = LabelSpace(num_classes, 2 * num_classes * k)
    block = np.repeat(np.eye(num_classes, dtype=np.uint8), k, axis=1)
    return WorldSpec(
        space,
        np.full(num_classes, 1.0 / num_classes),
        np.hstack([block, block]),
        np.zeros(space.num_concepts),
        NoiseModel.split(space, *benign, sharpness=sharpness),
        NoiseModel.split(space, *adversarial, sharpness=sharpness),
        mix,
        seed,
    )


def paired_concept_knowledge(num_classes: int = 3, weight: float = 1.5, concepts_per_class: int = 1) -> KnowledgeBase:
    """Two equally weighted circuits for :func:`paired_concept_world`.

    The first holds ``class => implied concept`` rules, the second
    ``implying concept => class`` rules, so no index is used on both sides of
    one circuit.
    """
    k = concepts_per_class
    space = LabelSpace(num_classes, 2 * num_classes * k)
    implied_base = num_classes
    implying_base = num_classes + num_classes * k
    implied = CircuitSpec(
        tuple(KnowledgeRule(j, implied_base + j * k + i, weight) for j in range(num_classes) for i in range(k)),
        space,
    )
    implying = CircuitSpec(
        tuple(KnowledgeRule(implying_base + j * k + i, j, weight) for j in range(num_classes) for i in range(k)),
        space,
    )
    return KnowledgeBase((implied, implying), np.array([0.5, 0.5]))

"""Command-line driver: ``colep {generate,calibrate,certify,simulate,analyze}``.

Every subcommand reads a JSON config (``--config``) whose values can be
overridden by flags, writes JSON/CSV reports into ``--out`` and exits 0 only
when all of its checks pass.  Configuration or I/O problems exit with 2 and a
JSON error on stderr; failed checks exit with 1.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _jit
from .analysis import effectiveness_check, compare_with_bare_model
from .certify import (
    IntervalVector,
    MonteCarloEstimate,
    PerturbationBudget,
    propagate_bounds_batch,
    smoothing_bound,
    smoothing_bound_finite_sample,
)
from .circuits import KnowledgeBase, colep_probabilities, knowledge_base_from_dict
from .conformal import (
    CalibrationSet,
    CoverageTarget,
    aps_scores,
    certified_coverage,
    certified_thresholds,
    class_score_matrix,
    class_thresholds,
    conformal_quantile,
    prediction_sets,
    worst_case_score_matrix,
)
from .exceptions import NumericError, StructuralError
from .simgen import WorldSpec, aps_adversary, generate, interval_adversary, read_calibration_csv

EXIT_OK, EXIT_CHECKS_FAILED, EXIT_BAD_INPUT = 0, 1, 2
CAL_STREAM, TEST_STREAM = 0, 1


@dataclass
class ExperimentConfig:
    world: WorldSpec | None = None
    knowledge_base: dict | None = None
    calibration_csv: Path | None = None
    test_csv: Path | None = None
    alpha: float = 0.1
    deltas: list = field(default_factory=lambda: [0.0])
    sigma: float = 1.0
    n_cal: int = 1000
    n_test: int = 2000
    n_mc: int | None = None
    fs_beta: float | None = None
    n_trials: int = 50
    n_samples: int = 20000
    seed: int = 0
    out: Path = Path("out")

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise StructuralError("alpha must lie in (0, 1)")
        if any(d < 0 for d in self.deltas) or not self.deltas:
            raise StructuralError("deltas must be a non-empty list of non-negative radii")
        if self.sigma <= 0:
            raise StructuralError("sigma must be positive")
        if (self.n_mc is None) != (self.fs_beta is None):
            raise StructuralError("--n-mc and --fs-beta must be given together")
        for name in ("calibration_csv", "test_csv"):
            path = getattr(self, name)
            if path is not None and not Path(path).is_file():
                raise FileNotFoundError(f"{name} not found: {path}")

    @property
    def target(self) -> CoverageTarget:
        return CoverageTarget(self.alpha)

    def budget(self, delta: float) -> PerturbationBudget:
        return PerturbationBudget(delta, self.sigma)


def _resolve(value, base: Path):
    if isinstance(value, str):
        path = (base / value) if not Path(value).is_absolute() else Path(value)
        if not path.is_file():
            raise FileNotFoundError(f"file not found: {path}")
        with open(path) as fh:
            return json.load(fh)
    return value


def load_config(args) -> ExperimentConfig:
    data, base = {}, Path.cwd()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config not found: {path}")
        with open(path) as fh:
            data = json.load(fh)
        base = path.parent
    for key in ("calibration_csv", "test_csv"):
        if data.get(key) is not None:
            p = Path(data[key])
            data[key] = p if p.is_absolute() else base / p
    world = data.pop("world", None)
    if world is not None:
        data["world"] = WorldSpec.from_dict(_resolve(world, base))
    if data.get("knowledge_base") is not None:
        data["knowledge_base"] = _resolve(data["knowledge_base"], base)
    if "out" in data:
        data["out"] = Path(data["out"])
    overrides = {
        "seed": args.seed,
        "alpha": args.alpha,
        "deltas": args.delta,
        "sigma": args.sigma,
        "n_mc": args.n_mc,
        "fs_beta": args.fs_beta,
        "out": args.out,
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    known = set(ExperimentConfig.__dataclass_fields__)
    unknown = set(data) - known
    if unknown:
        raise StructuralError(f"unknown config keys: {sorted(unknown)}")
    cfg = ExperimentConfig(**data)
    if cfg.world is not None:
        cfg.world = cfg.world.with_seed(cfg.seed)
    return cfg


def _clean(obj):
    # plain, rounded JSON-safe values so reports are byte-stable
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return None
        return round(x, 12)
    return obj


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_clean(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _calibration_data(cfg: ExperimentConfig, num_classes: int) -> CalibrationSet:
    if cfg.calibration_csv is not None:
        return read_calibration_csv(cfg.calibration_csv, num_classes, rng=cfg.seed)
    if cfg.world is None:
        raise StructuralError("config needs either a world or a calibration_csv")
    return generate(cfg.world, cfg.n_cal, CAL_STREAM).calibration_set()


def _knowledge_base(cfg: ExperimentConfig, calib: CalibrationSet | None = None) -> KnowledgeBase:
    if cfg.knowledge_base is None:
        if cfg.world is None:
            raise StructuralError("config needs a knowledge_base")
        return KnowledgeBase.empty(cfg.world.label_space)
    beliefs = calib.beliefs if calib is not None else None
    labels = calib.labels if calib is not None else None
    return knowledge_base_from_dict(cfg.knowledge_base, beliefs, labels)


def _num_classes(cfg: ExperimentConfig) -> int:
    if cfg.knowledge_base is not None:
        return int(cfg.knowledge_base["num_classes"])
    if cfg.world is not None:
        return cfg.world.label_space.num_classes
    raise StructuralError("cannot tell the number of classes without a knowledge base or world")


def _intervals(cfg: ExperimentConfig, calib: CalibrationSet, delta: float) -> tuple[IntervalVector, str]:
    budget = cfg.budget(delta)
    if cfg.fs_beta is not None:
        est = MonteCarloEstimate.from_bernoulli_mean(calib.beliefs, cfg.n_mc, cfg.fs_beta)
        lo, hi = smoothing_bound_finite_sample(est, budget)
        return IntervalVector(lo, hi), f"finite-sample(n_mc={cfg.n_mc},beta={cfg.fs_beta})"
    if calib.lower is not None:
        # intervals read from an lo_i/hi_i CSV already encode their budget
        return calib.intervals, "supplied"
    return IntervalVector(*smoothing_bound(calib.beliefs, budget)), "exact"


def cmd_generate(cfg: ExperimentConfig) -> dict:
    if cfg.world is None:
        raise StructuralError("generate needs a world")
    cfg.out.mkdir(parents=True, exist_ok=True)
    for name, n, stream in (("calibration.csv", cfg.n_cal, CAL_STREAM), ("test.csv", cfg.n_test, TEST_STREAM)):
        batch = generate(cfg.world, n, stream)
        (cfg.out / name).write_text(batch.to_csv())
    cfg.world.save(cfg.out / "world.json")
    return {"checks": {}}


def cmd_calibrate(cfg: ExperimentConfig) -> dict:
    n_classes = _num_classes(cfg)
    calib = _calibration_data(cfg, n_classes)
    kb = _knowledge_base(cfg, calib)
    u = calib.class_u(n_classes)
    probs = colep_probabilities(calib.beliefs, kb)
    clean = class_score_matrix(probs, calib.labels, u)
    report = {
        "alpha": cfg.alpha,
        "seed": cfg.seed,
        "n_cal": len(calib),
        "mixture_weights": kb.mixture_weights,
        "thresholds": class_thresholds(clean, cfg.target),
        "clean_scores": clean.T,
        "worst_case": [],
    }
    for delta in cfg.deltas:
        iv, family = _intervals(cfg, calib, delta)
        L, U = propagate_bounds_batch(iv, kb)
        worst = worst_case_score_matrix(L, U, calib.labels, u)
        shift = 2 * cfg.fs_beta if cfg.fs_beta is not None else 0.0
        report["worst_case"].append({
            "delta": delta,
            "bound_family": family,
            "thresholds": class_thresholds(worst, cfg.target, level_shift=shift),
            "scores": worst.T,
        })
    _write_json(cfg.out / "calibration.json", report)
    return {"checks": {"dominance": bool(all(np.all(np.asarray(w["scores"]) >= clean.T - 1e-12) for w in report["worst_case"]))}}


def cmd_certify(cfg: ExperimentConfig) -> dict:
    n_classes = _num_classes(cfg)
    calib = _calibration_data(cfg, n_classes)
    kb = _knowledge_base(cfg, calib)
    u = calib.class_u(n_classes)
    clean = class_score_matrix(colep_probabilities(calib.beliefs, kb), calib.labels, u)
    rows = []
    for delta in sorted(cfg.deltas):
        iv, family = _intervals(cfg, calib, delta)
        L, U = propagate_bounds_batch(iv, kb)
        cov = certified_coverage(clean, worst_case_score_matrix(L, U, calib.labels, u), cfg.target, family)
        rows.append({
            "delta": delta,
            "bound_family": family,
            "tau_per_class": cov.tau_per_class,
            "tau": cov.tau,
            "finite_sample_tau": cov.finite_sample_tau,
        })
    taus = [r["tau"] for r in rows]
    checks = {
        "tau_non_increasing": all(a >= b for a, b in zip(taus, taus[1:])),
        "finite_sample_below_tau": all(r["finite_sample_tau"] <= r["tau"] for r in rows),
    }
    _write_json(cfg.out / "certification.json", {
        "alpha": cfg.alpha, "sigma": cfg.sigma, "seed": cfg.seed, "n_cal": len(calib), "rows": rows, "checks": checks,
    })
    return {"checks": checks}


def _aps_sets(probs, threshold, u) -> np.ndarray:
    above = np.where(probs[:, None, :] > probs[:, :, None], probs[:, None, :], 0.0).sum(axis=2)
    return above + u[:, None] * probs <= threshold


def _coverage_row(sets, labels):
    return float(sets[np.arange(labels.shape[0]), labels].mean()), float(sets.sum(axis=1).mean())


def cmd_simulate(cfg: ExperimentConfig) -> dict:
    if cfg.world is None:
        raise StructuralError("simulate needs a world")
    n_classes = cfg.world.label_space.num_classes
    cal = generate(cfg.world, cfg.n_cal, CAL_STREAM)
    test = generate(cfg.world, cfg.n_test, TEST_STREAM)
    calib = cal.calibration_set()
    kb = _knowledge_base(cfg, calib)
    target = cfg.target
    labels = test.labels

    # baseline: multi-class APS on the raw class beliefs
    aps_q = conformal_quantile(aps_scores(cal.beliefs[:, :n_classes], cal.labels, cal.u[:, 0]), 1 - cfg.alpha)
    clean_probs = colep_probabilities(test.beliefs, kb)
    std_thr = class_thresholds(class_score_matrix(colep_probabilities(cal.beliefs, kb), cal.labels, cal.u), target)

    rows = []
    band = 3 * math.sqrt(cfg.alpha * (1 - cfg.alpha) / cfg.n_test)
    checks = {}
    for delta in cfg.deltas:
        budget = cfg.budget(delta)
        iv, _ = _intervals(cfg, calib, delta)
        cert_calib = CalibrationSet(cal.beliefs, cal.labels, cal.u, lower=iv.lower, upper=iv.upper)
        cert_thr = certified_thresholds(cert_calib, kb, target, cfg.fs_beta)
        adv_aps = aps_adversary(test.beliefs, labels, n_classes, budget)[:, :n_classes]
        adv_probs = colep_probabilities(interval_adversary(test, budget), kb)
        methods = {
            "baseline-CP": (
                _aps_sets(test.beliefs[:, :n_classes], aps_q, test.u[:, 0]),
                _aps_sets(adv_aps, aps_q, test.u[:, 0]),
            ),
            "COLEP": (prediction_sets(clean_probs, std_thr, test.u), prediction_sets(adv_probs, std_thr, test.u)),
            "COLEP-certified": (
                prediction_sets(clean_probs, cert_thr, test.u),
                prediction_sets(adv_probs, cert_thr, test.u),
            ),
        }
        for method, (clean_sets, adv_sets) in methods.items():
            for condition, sets in (("clean", clean_sets), ("adversarial", adv_sets)):
                coverage, size = _coverage_row(sets, labels)
                rows.append((delta, method, condition, coverage, size))
                if condition == "clean" or method == "COLEP-certified":
                    checks[f"{method}/{condition}/delta={delta}"] = coverage >= 1 - cfg.alpha - band

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["delta", "method", "condition", "coverage", "mean_set_size"])
    for delta, method, condition, coverage, size in rows:
        writer.writerow([f"{delta:g}", method, condition, f"{coverage:.6f}", f"{size:.6f}"])
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / "simulation.csv").write_text(buf.getvalue())
    _write_json(cfg.out / "simulation.json", {
        "alpha": cfg.alpha, "sigma": cfg.sigma, "seed": cfg.seed, "n_cal": cfg.n_cal, "n_test": cfg.n_test,
        "band": band, "checks": checks,
    })
    return {"checks": checks}


def cmd_analyze(cfg: ExperimentConfig) -> dict:
    if cfg.world is None:
        raise StructuralError("analyze needs a world")
    kb = _knowledge_base(cfg, generate(cfg.world, cfg.n_cal, CAL_STREAM).calibration_set())
    effect = effectiveness_check(cfg.world, kb, cfg.n_samples)
    comparison = compare_with_bare_model(cfg.world, kb, cfg.n_cal, cfg.n_test, cfg.n_trials, cfg.alpha)
    checks = {"effectiveness": effect.passed, "accuracy_bound": comparison.bounds_hold}
    _write_json(cfg.out / "analysis.json", {
        "seed": cfg.seed, "effectiveness": effect.to_dict(), "comparison": comparison.to_dict(), "checks": checks,
    })
    return {"checks": checks}


COMMANDS = {
    "generate": cmd_generate,
    "calibrate": cmd_calibrate,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
}


def _delta_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colep", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=str)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path)
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--delta", type=_delta_list, help="comma-separated perturbation radii")
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--n-mc", dest="n_mc", type=int)
    parser.add_argument("--fs-beta", dest="fs_beta", type=float)
    return parser


def _fail(kind: str, exc: Exception) -> int:
    print(json.dumps({"error": kind, "message": str(exc)}), file=sys.stderr)
    return EXIT_BAD_INPUT


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _jit.set_thread_cap()
        cfg = load_config(args)
        result = COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc)
    except (StructuralError, NumericError, json.JSONDecodeError, ValueError) as exc:
        return _fail("invalid_input", exc)
    failed = [name for name, ok in result["checks"].items() if not ok]
    print(json.dumps({"command": args.command, "out": str(cfg.out), "failed_checks": failed}))
    return EXIT_CHECKS_FAILED if failed else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Time the numba and numpy component-marginal kernels side by side.

    python3 benchmarks/bench_kernels.py [--rows N] [--repeat R]
"""

import argparse
import time

import numpy as np

from colep._jit import JIT_ENABLED
from colep.circuits import CircuitSpec, KnowledgeRule, LabelSpace
from colep.kernels import component_marginals


def chain_component(k: int):
    # antecedents 0..k/2-1, consequents the rest; variable 0 links to all of them so the component is connected
    space = LabelSpace(1, k - 1)
    half = max(1, k // 2)
    rules = [KnowledgeRule(a, c, 1.5) for a in range(half) for c in range(half, k) if (a + c) % 2 == 0 or a == 0]
    comp = CircuitSpec(tuple(rules), space).component_of(0)
    assert comp.size == k
    return comp


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return min(times)


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--rows", type=int, default=20000)
    parser.add_argument("--repeat", type=int, default=3)
    parser.add_argument("--widths", default="4,8,10,12,14")
    args = parser.parse_args()
    if not JIT_ENABLED:
        raise SystemExit("numba is disabled (COLEP_DISABLE_JIT) or missing; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'k':>3} {'rows':>7} {'numba s':>9} {'numpy s':>9} {'speedup':>8} {'max diff':>9}")
    for k in (int(x) for x in args.widths.split(",")):
        comp = chain_component(k)
        P = rng.uniform(size=(args.rows, k))
        targets = np.arange(k)
        jit_out = component_marginals(P[:10], comp.bits, comp.log_factor, targets, use_jit=True)  # compile
        t_jit = best_of(lambda: component_marginals(P, comp.bits, comp.log_factor, targets, use_jit=True), args.repeat)
        t_np = best_of(lambda: component_marginals(P, comp.bits, comp.log_factor, targets, use_jit=False), args.repeat)
        jit_out = component_marginals(P, comp.bits, comp.log_factor, targets, use_jit=True)
        np_out = component_marginals(P, comp.bits, comp.log_factor, targets, use_jit=False)
        diff = float(np.max(np.abs(jit_out - np_out)))
        print(f"{k:>3} {args.rows:>7} {t_jit:>9.4f} {t_np:>9.4f} {t_np / t_jit:>7.1f}x {diff:>9.1e}")


if __name__ == "__main__":
    main()

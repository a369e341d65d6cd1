"""Enumeration kernels for component marginals.

A component is described by a bit table ``bits`` of shape ``(2**k, k)``
listing every assignment of its ``k`` variables, and by ``log_factor``, the
log of the rule factor for each assignment.  For a batch of belief rows the
kernels return, for each requested target column, the probability that the
target bit is 1 under the reweighted product-of-Bernoulli distribution.

Both implementations build the per-assignment log weights by doubling, one
bit at a time, so each row costs ``O(2**k)`` additions.  The numba kernel
works row by row; the numpy version processes rows in chunks.  ``component_marginals`` dispatches on
``colep._jit.JIT_ENABLED``.
"""

import math

import numpy as np

from ._jit import HAVE_NUMBA, JIT_ENABLED, njit, prange

# cap on (rows x assignments) materialized at once by the numpy path
_NUMPY_BLOCK = 1 << 22


def assignment_table(k: int) -> np.ndarray:
    """All ``2**k`` assignments of ``k`` bits, row ``a`` holding the binary digits of ``a``."""
    codes = np.arange(1 << k, dtype=np.int64)
    return ((codes[:, None] >> np.arange(k, dtype=np.int64)) & 1).astype(np.uint8)


def _log_weights_numpy(lp0, lp1):
    # doubling: after step i the table holds every assignment of bits 0..i
    W = np.zeros((lp0.shape[0], 1))
    for i in range(lp0.shape[1]):
        W = np.concatenate([W + lp0[:, i, None], W + lp1[:, i, None]], axis=1)
    return W


def _marginals_numpy(P, bits, log_factor, targets):
    n, k = P.shape
    m = bits.shape[0]
    out = np.empty((n, targets.shape[0]))
    if n == 0:
        return out
    with np.errstate(divide="ignore"):
        lp1 = np.log(P)
        lp0 = np.log1p(-P)
    target_bits = bits[:, targets].astype(np.float64)
    step = max(1, _NUMPY_BLOCK // m)
    for lo in range(0, n, step):
        hi = min(n, lo + step)
        W = _log_weights_numpy(lp0[lo:hi], lp1[lo:hi]) + log_factor[None, :]
        W -= W.max(axis=1, keepdims=True)
        E = np.exp(W)
        out[lo:hi] = (E @ target_bits) / E.sum(axis=1)[:, None]
    return out


def _marginals_loop(P, bits, log_factor, targets):
    # bits is only used for its shape; assignments are decoded from the index
    n, k = P.shape
    m = bits.shape[0]
    n_t = targets.shape[0]
    out = np.empty((n, n_t))
    for s in prange(n):
        w = np.empty(m)
        w[0] = 0.0
        size = 1
        for i in range(k):
            p = P[s, i]
            l1 = math.log(p) if p > 0.0 else -np.inf
            l0 = math.log1p(-p) if p < 1.0 else -np.inf
            for a in range(size):
                w[size + a] = w[a] + l1
                w[a] = w[a] + l0
            size *= 2
        wmax = -np.inf
        for a in range(m):
            w[a] += log_factor[a]
            if w[a] > wmax:
                wmax = w[a]
        num = np.zeros(n_t)
        den = 0.0
        for a in range(m):
            if w[a] == -np.inf:
                continue
            e = math.exp(w[a] - wmax)
            den += e
            for t in range(n_t):
                if (a >> targets[t]) & 1:
                    num[t] += e
        for t in range(n_t):
            out[s, t] = num[t] / den
    return out


if HAVE_NUMBA:
    _marginals_jit = njit(parallel=True, cache=True)(_marginals_loop)
else:  # pragma: no cover
    _marginals_jit = None


def component_marginals(P, bits, log_factor, targets, use_jit=None):
    """Marginals of the ``targets`` columns for every row of ``P``.

    Parameters
    ----------
    P : (n, k) float array of beliefs in [0, 1]; exact 0 and 1 are allowed.
    bits : (2**k, k) uint8 assignment table.
    log_factor : (2**k,) log rule factor per assignment.
    targets : int array of column positions.
    use_jit : override the module-level switch.
    """
    P = np.ascontiguousarray(P, dtype=np.float64)
    targets = np.ascontiguousarray(targets, dtype=np.int64)
    log_factor = np.ascontiguousarray(log_factor, dtype=np.float64)
    bits = np.ascontiguousarray(bits, dtype=np.uint8)
    if use_jit is None:
        use_jit = JIT_ENABLED
    if use_jit and _marginals_jit is not None:
        return _marginals_jit(P, bits, log_factor, targets)
    return _marginals_numpy(P, bits, log_factor, targets)


def log_partial_sums(P, bits, log_factor, pos):
    """Log of the partial sums with the ``pos`` bit pinned to 0 and to 1.

    The Bernoulli term of column ``pos`` itself is left out, so the result is
    ``log sum_{a: a_pos = d} exp(sum_{i != pos} log Bern(a_i; P_i) + log F(a))``
    for ``d = 0, 1``.  Returns an ``(n, 2)`` array.
    """
    P = np.asarray(P, dtype=np.float64)
    with np.errstate(divide="ignore"):
        lp1 = np.log(P)
        lp0 = np.log1p(-P)
    mask = bits.astype(bool)
    W = np.repeat(np.asarray(log_factor, dtype=np.float64)[None, :], P.shape[0], axis=0)
    for i in range(P.shape[1]):
        if i == pos:
            continue
        W += np.where(mask[:, i][None, :], lp1[:, i, None], lp0[:, i, None])
    out = np.empty((P.shape[0], 2))
    for d in (0, 1):
        sel = W[:, mask[:, pos] == bool(d)]
        top = sel.max(axis=1)
        safe = np.where(np.isfinite(top), top, 0.0)
        with np.errstate(divide="ignore"):
            out[:, d] = safe + np.log(np.exp(sel - safe[:, None]).sum(axis=1))
    return out

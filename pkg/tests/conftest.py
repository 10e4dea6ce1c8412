"""Shared oracles: finite-difference gradients and brute-force CRF sums.

These deliberately avoid the library's own code paths so they stay
independent of what they check.
"""

from itertools import product

import numpy as np
import pytest


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of scalar-valued f at x, elementwise."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = f(x)
        flat[i] = orig - h
        lo = f(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float((np.abs(a - b) / denom).max())


def allowed_sequences(n, start_allowed, mask):
    """All tag sequences of length n permitted by the constraint mask."""
    seqs = []
    for seq in product(range(3), repeat=n):
        if not start_allowed[seq[0]]:
            continue
        if all(mask[a, b] for a, b in zip(seq, seq[1:])):
            seqs.append(seq)
    return seqs


def brute_force_score(seq, emissions, trans, start, end):
    s = start[seq[0]] + end[seq[-1]]
    s += sum(emissions[i, y] for i, y in enumerate(seq))
    s += sum(trans[a, b] for a, b in zip(seq, seq[1:]))
    return s


def brute_force_log_partition(emissions, trans, start, end, start_allowed, mask):
    seqs = allowed_sequences(emissions.shape[0], start_allowed, mask)
    scores = np.array([brute_force_score(s, emissions, trans, start, end) for s in seqs])
    m = scores.max()
    return float(np.log(np.exp(scores - m).sum()) + m)


def brute_force_marginals(emissions, trans, start, end, start_allowed, mask):
    n = emissions.shape[0]
    seqs = allowed_sequences(n, start_allowed, mask)
    scores = np.array([brute_force_score(s, emissions, trans, start, end) for s in seqs])
    m = scores.max()
    probs = np.exp(scores - m)
    probs /= probs.sum()
    out = np.zeros((n, 3))
    for seq, p in zip(seqs, probs):
        for i, y in enumerate(seq):
            out[i, y] += p
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

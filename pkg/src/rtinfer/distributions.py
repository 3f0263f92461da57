"""Small distribution helpers shared across modules."""

from __future__ import annotations

import numpy as np
from scipy.special import gammaln, xlog1py, xlogy
from scipy.stats import gamma as _gamma_dist


def as_generator(rng: int | np.random.Generator) -> np.random.Generator:
    """Coerce an integer seed into a Generator; pass Generators through."""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def log_binom_pmf(k, n, p) -> np.ndarray:
    """Elementwise log of the Binomial(n, p) pmf at k.

    Returns -inf outside the support {0, ..., n} and handles p = 0 and
    p = 1 without warnings. Direct gammaln evaluation; the scipy frozen
    distribution would add ~100x call overhead inside sampling loops.
    """
    k, n, p = np.broadcast_arrays(
        np.asarray(k, dtype=float), np.asarray(n, dtype=float), np.asarray(p, dtype=float)
    )
    out = np.full(k.shape, -np.inf)
    ok = (k >= 0) & (k <= n)
    if np.any(ok):
        kk, nn, pp = k[ok], n[ok], p[ok]
        out[ok] = (
            gammaln(nn + 1.0)
            - gammaln(kk + 1.0)
            - gammaln(nn - kk + 1.0)
            + xlogy(kk, pp)
            + xlog1py(nn - kk, -pp)
        )
    return out


def discretized_gamma_pmf(mean: float, sd: float, lo: int, hi: int):
    """Gamma(mean, sd) discretized onto the integers lo..hi.

    Mass at integer i is F(i) - F(i-1), renormalized over the support.
    Returns (values, probs).
    """
    if mean <= 0 or sd <= 0:
        raise ValueError("gamma mean and sd must be positive")
    if hi < lo:
        raise ValueError("empty discretization support")
    shape = (mean / sd) ** 2
    scale = sd * sd / mean
    values = np.arange(lo, hi + 1)
    probs = _gamma_dist.cdf(values, a=shape, scale=scale) - _gamma_dist.cdf(
        values - 1, a=shape, scale=scale
    )
    total = probs.sum()
    if total <= 0:
        raise ValueError("discretized gamma support carries no mass")
    return values, probs / total


def sample_pmf(values: np.ndarray, cum_probs: np.ndarray, size: int, rng) -> np.ndarray:
    """Inverse-CDF draws from a finite pmf with a precomputed cumsum.

    One uniform per draw; much cheaper than Generator.choice inside hot
    loops because the pmf is validated and summed once, up front.
    """
    idx = np.searchsorted(cum_probs, rng.random(size), side="right")
    return values[np.minimum(idx, values.size - 1)]


def trailing_moving_average(values, window: int) -> np.ndarray:
    """Trailing mean over the last `window` entries (shorter at the start)."""
    v = np.asarray(values, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    c = np.concatenate([[0.0], np.cumsum(v)])
    idx = np.arange(1, v.size + 1)
    start = np.maximum(idx - window, 0)
    return (c[idx] - c[start]) / (idx - start)

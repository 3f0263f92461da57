"""Sliding-window conjugate baseline estimator for R_t.

Treats the observed positive counts as if they were the infection series:
with a Gamma(a0, b0) prior and Poisson increments, the posterior for R_t
from the last `window` days is Gamma with

    shape = a0 + sum of counts in the window
    rate  = 1/b0 + sum of window total-infectiousness

computed on a delay-shifted copy of the series (y_t = x_{t+shift}), the
standard way to point the estimate at infection time rather than
detection time. Well calibrated when x is a thinned infection count;
knowingly mis-specified under prevalence-style sampling, which is exactly
what it is benchmarked to show.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import gamma as _gamma_dist

from .disease import InfectiousnessProfile
from .errors import ConfigurationError
from .observation import (
    CrossSectional,
    Longitudinal,
    ObservationScheme,
    UniformUndersampling,
)
from .testing import TestProfile

# A degenerate profile (serological positivity lasts a year) would other-
# wise shift the whole series out of frame.
MAX_DELAY_SHIFT = 30


@dataclass(frozen=True)
class CoriConfig:
    window: int = 7
    prior_shape: float = 1.0
    prior_scale: float = 5.0
    delay_shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")
        if self.prior_shape <= 0 or self.prior_scale <= 0:
            raise ConfigurationError("prior shape and scale must be positive")
        if self.delay_shift < 0:
            raise ConfigurationError("delay_shift must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "window": self.window,
            "prior_shape": self.prior_shape,
            "prior_scale": self.prior_scale,
            "delay_shift": self.delay_shift,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CoriConfig":
        known = {"window", "prior_shape", "prior_scale", "delay_shift"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown cori config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class CoriPosterior:
    """Per-day Gamma posteriors; invalid days carry no estimate."""

    shape: np.ndarray
    scale: np.ndarray
    valid: np.ndarray

    @property
    def mean_R(self) -> np.ndarray:
        return np.where(self.valid, self.shape * self.scale, np.nan)

    @property
    def sd_R(self) -> np.ndarray:
        return np.where(self.valid, np.sqrt(self.shape) * self.scale, np.nan)

    def interval(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        if not 0.0 < level < 1.0:
            raise ConfigurationError("interval level must lie in (0, 1)")
        lo = np.full(self.shape.size, np.nan)
        hi = np.full(self.shape.size, np.nan)
        v = self.valid
        lo[v] = _gamma_dist.ppf(0.5 - level / 2.0, a=self.shape[v], scale=self.scale[v])
        hi[v] = _gamma_dist.ppf(0.5 + level / 2.0, a=self.shape[v], scale=self.scale[v])
        return lo, hi

    def quantiles(self, qs) -> np.ndarray:
        qs = np.asarray(qs, dtype=float)
        out = np.full((self.shape.size, qs.size), np.nan)
        v = self.valid
        out[v] = _gamma_dist.ppf(qs[None, :], a=self.shape[v, None], scale=self.scale[v, None])
        return out


def cori_posterior(
    x, profile_weights, config: CoriConfig = CoriConfig()
) -> CoriPosterior:
    """Sliding-window conjugate posterior over all T days.

    profile_weights can be an InfectiousnessProfile or a bare weight
    vector; it drives the window's total-infectiousness denominator.
    Days shifted out of range, or whose window carries zero
    infectiousness, are marked invalid.
    """
    if isinstance(profile_weights, InfectiousnessProfile):
        w = profile_weights.weights
    else:
        w = np.asarray(profile_weights, dtype=float)
    xv = np.asarray(x)
    if xv.ndim != 1 or xv.size == 0:
        raise ConfigurationError("x must be a non-empty 1-d count vector")
    if np.any(xv < 0):
        raise ConfigurationError("observed counts must be non-negative")
    T = xv.size
    if config.delay_shift >= T:
        raise ConfigurationError("delay_shift leaves no usable days")

    y = xv[config.delay_shift :].astype(float)  # y_t = x_{t + shift}
    Tp = y.size
    lam = np.zeros(Tp)
    if Tp > 1:
        lam[1:] = np.convolve(y, w)[: Tp - 1]

    shape = np.full(T, np.nan)
    scale = np.full(T, np.nan)
    valid = np.zeros(T, dtype=bool)
    cy = np.concatenate([[0.0], np.cumsum(y)])
    cl = np.concatenate([[0.0], np.cumsum(lam)])
    for t in range(1, Tp + 1):
        lo = max(t - config.window, 0)
        sum_y = cy[t] - cy[lo]
        sum_lam = cl[t] - cl[lo]
        if sum_lam <= 0:
            continue
        shape[t - 1] = config.prior_shape + sum_y
        scale[t - 1] = 1.0 / (1.0 / config.prior_scale + sum_lam)
        valid[t - 1] = True
    return CoriPosterior(shape=shape, scale=scale, valid=valid)


def suggested_delay_shift(profile: TestProfile, scheme: ObservationScheme) -> int:
    """Heuristic infection-to-detection lag for a profile/scheme pair.

    Mean conversion offset (among converters) plus the scheme's residence
    term: the reporting delay (uniform undersampling), half the positivity
    duration (cross-sectional detection falls anywhere in the positive
    window), or half the cadence (longitudinal detection waits for the
    next scheduled test). Capped at MAX_DELAY_SHIFT days.
    """
    base = profile.mean_finite_offset()
    if isinstance(scheme, UniformUndersampling):
        extra = scheme.mean_delay()
    elif isinstance(scheme, CrossSectional):
        extra = profile.mean_duration() / 2.0
    elif isinstance(scheme, Longitudinal):
        extra = scheme.cadence / 2.0
    else:
        raise ConfigurationError(f"unknown observation scheme {type(scheme).__name__}")
    return min(int(round(base + extra)), MAX_DELAY_SHIFT)

"""Test positivity profiles.

A test is summarized by when an infected individual starts and stops
testing positive: an integer offset from infection to conversion (with
some probability "never", modelling false negatives as mass at infinity)
and an integer duration of positivity. Conversion and reversion times are
absolute days; infinity marks individuals who never convert.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .distributions import as_generator, discretized_gamma_pmf, sample_pmf
from .errors import ConfigurationError

NEVER = np.inf

_PMF_TOL = 1e-9


@dataclass(frozen=True)
class ConversionRecord:
    """Absolute conversion/reversion days for one individual (inf = never)."""

    t_convert: float
    t_revert: float


class ConversionBatch(NamedTuple):
    """Vectorized conversion/reversion days (inf = never converts)."""

    t_convert: np.ndarray
    t_revert: np.ndarray


def _check_pmf(values, probs, name, minimum, allow_empty=False):
    v = np.asarray(values, dtype=np.int64)
    p = np.asarray(probs, dtype=float)
    if v.ndim != 1 or p.shape != v.shape or (v.size == 0 and not allow_empty):
        raise ConfigurationError(f"{name} must be matching non-empty 1-d vectors")
    if np.any(v < minimum):
        raise ConfigurationError(f"{name} values must be >= {minimum}")
    if v.size != np.unique(v).size:
        raise ConfigurationError(f"{name} values must be distinct")
    if np.any(p < 0):
        raise ConfigurationError(f"{name} probabilities must be non-negative")
    return v, p


@dataclass(frozen=True)
class TestProfile:
    """Distribution of conversion offset and positivity duration.

    convert_offsets/convert_probs give the pmf of days from infection to
    first positivity; never_convert_prob is the remaining mass (the false
    negatives). duration_values/duration_probs give the pmf of how long
    positivity lasts (>= 1 day).
    """

    convert_offsets: np.ndarray
    convert_probs: np.ndarray
    never_convert_prob: float
    duration_values: np.ndarray
    duration_probs: np.ndarray

    def __post_init__(self):
        # an empty convert pmf is allowed when all mass sits at infinity
        # (a test that never detects anyone)
        off, offp = _check_pmf(
            self.convert_offsets, self.convert_probs, "convert pmf", 0, allow_empty=True
        )
        dur, durp = _check_pmf(self.duration_values, self.duration_probs, "duration pmf", 1)
        never = float(self.never_convert_prob)
        if not 0.0 <= never <= 1.0:
            raise ConfigurationError("never_convert_prob must lie in [0, 1]")
        if abs(float(offp.sum()) + never - 1.0) > _PMF_TOL:
            raise ConfigurationError("convert pmf plus never_convert_prob must sum to 1")
        if abs(float(durp.sum()) - 1.0) > _PMF_TOL:
            raise ConfigurationError("duration pmf must sum to 1")
        object.__setattr__(self, "convert_offsets", off)
        object.__setattr__(self, "convert_probs", offp)
        object.__setattr__(self, "never_convert_prob", never)
        object.__setattr__(self, "duration_values", dur)
        object.__setattr__(self, "duration_probs", durp)
        # extended value arrays and cumsums so sampling is one inverse-CDF
        # lookup per individual
        object.__setattr__(
            self, "_offset_choices", np.concatenate([off.astype(float), [NEVER]])
        )
        object.__setattr__(self, "_offset_cum", np.cumsum(np.concatenate([offp, [never]])))
        object.__setattr__(self, "_duration_choices", dur.astype(float))
        object.__setattr__(self, "_duration_cum", np.cumsum(durp))

    def sample_conversions(self, infection_days, rng: int | np.random.Generator):
        """Vectorized conversion/reversion days for a batch of infections.

        Returns float arrays (t_convert, t_revert); both are inf for
        never-converters. Draw order: one uniform per individual for the
        offset, then one for the duration (consumed even by
        never-converters, so the stream does not depend on who converts).
        """
        rng = as_generator(rng)
        days = np.asarray(infection_days, dtype=float)
        m = days.size
        offsets = sample_pmf(self._offset_choices, self._offset_cum, m, rng)
        durations = sample_pmf(self._duration_choices, self._duration_cum, m, rng)
        t_convert = days + offsets
        return ConversionBatch(t_convert, t_convert + durations)

    def mean_finite_offset(self) -> float:
        """Mean conversion offset among individuals who ever convert."""
        return float(
            np.dot(self.convert_offsets, self.convert_probs) / self.convert_probs.sum()
        )

    def mean_duration(self) -> float:
        return float(np.dot(self.duration_values, self.duration_probs))

    def to_json_dict(self) -> dict:
        return {
            "convert_pmf": [
                [int(v), float(p)] for v, p in zip(self.convert_offsets, self.convert_probs)
            ],
            "never_convert_prob": float(self.never_convert_prob),
            "duration_pmf": [
                [int(v), float(p)] for v, p in zip(self.duration_values, self.duration_probs)
            ],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TestProfile":
        known = {"convert_pmf", "never_convert_prob", "duration_pmf"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown test profile keys: {sorted(unknown)}")
        try:
            conv = np.asarray(d["convert_pmf"], dtype=float)
            dur = np.asarray(d["duration_pmf"], dtype=float)
        except KeyError as e:
            raise ConfigurationError(f"test profile is missing {e.args[0]!r}") from None
        if conv.ndim != 2 or conv.shape[1] != 2 or dur.ndim != 2 or dur.shape[1] != 2:
            raise ConfigurationError("pmf entries must be [value, prob] pairs")
        return cls(
            convert_offsets=conv[:, 0].astype(np.int64),
            convert_probs=conv[:, 1],
            never_convert_prob=float(d.get("never_convert_prob", 0.0)),
            duration_values=dur[:, 0].astype(np.int64),
            duration_probs=dur[:, 1],
        )


def sample_conversion(
    profile: TestProfile, infection_day: int, rng: int | np.random.Generator
) -> ConversionRecord:
    """One individual's conversion record (see sample_conversions)."""
    t_convert, t_revert = profile.sample_conversions(
        np.asarray([infection_day], dtype=float), rng
    )
    return ConversionRecord(float(t_convert[0]), float(t_revert[0]))


def builtin_profile(kind: str) -> TestProfile:
    """Built-in profiles: 'pcr' and 'serological'.

    pcr: conversion gamma(mean 4, sd 1.5) on offsets 1..10 with 5% never
    converting, duration gamma(mean 14, sd 4) on 3..35 days.
    serological: conversion gamma(mean 12, sd 3) on offsets 5..25 with 8%
    never converting, positivity effectively permanent (365 days).
    """
    if kind == "pcr":
        off, offp = discretized_gamma_pmf(4.0, 1.5, 1, 10)
        dur, durp = discretized_gamma_pmf(14.0, 4.0, 3, 35)
        return TestProfile(
            convert_offsets=off,
            convert_probs=offp * 0.95,
            never_convert_prob=0.05,
            duration_values=dur,
            duration_probs=durp,
        )
    if kind == "serological":
        off, offp = discretized_gamma_pmf(12.0, 3.0, 5, 25)
        return TestProfile(
            convert_offsets=off,
            convert_probs=offp * 0.92,
            never_convert_prob=0.08,
            duration_values=np.asarray([365]),
            duration_probs=np.asarray([1.0]),
        )
    raise ConfigurationError(f"unknown test profile kind {kind!r}")

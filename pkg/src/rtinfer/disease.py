"""Stochastic branching model of daily infection counts.

Days are indexed 1..T. Each day the number of new infections is

    n_t ~ Poisson(max(R_t, 0) * phi_t + max(gamma, 0))

where phi_t is the total infectiousness of everyone infected before day t
(profile weights summed by infection age) and gamma is the mean number of
infections imported from outside the population per day. The equivalent
per-individual picture (each infected person seeds an independent Poisson
number of cases weighted by their infection age) collapses to this single
draw by Poisson superposition.

Seed infections sit at day 0 with infection age 0, so a seed has age t on
day t. Sampling truncates so cumulative infections never exceed the
population size; the density functions ignore that truncation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .distributions import as_generator, discretized_gamma_pmf
from .errors import ConfigurationError

# Rates are floored here before any log; keeps densities finite for
# degenerate trajectories (all-negative R with gamma = 0).
RATE_FLOOR = 1e-10

DEFAULT_PROFILE_MEAN = 5.5
DEFAULT_PROFILE_SD = 2.0
DEFAULT_PROFILE_SUPPORT = 14


@dataclass(frozen=True)
class InfectiousnessProfile:
    """Relative infectiousness by days since infection.

    weights[h-1] is the weight at infection age h, h = 1..H. Weights are
    non-negative and sum to one, so R_t keeps its meaning as the expected
    number of secondary cases per primary case.
    """

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.size == 0:
            raise ConfigurationError("infectiousness weights must be a non-empty 1-d vector")
        if np.any(w < 0):
            raise ConfigurationError("infectiousness weights must be non-negative")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ConfigurationError("infectiousness weights must sum to 1")
        object.__setattr__(self, "weights", w)

    @property
    def support(self) -> int:
        return int(self.weights.size)

    @classmethod
    def default(cls) -> "InfectiousnessProfile":
        """Discretized gamma, mean 5.5 and sd 2.0 days, support 1..14."""
        _, probs = discretized_gamma_pmf(
            DEFAULT_PROFILE_MEAN, DEFAULT_PROFILE_SD, 1, DEFAULT_PROFILE_SUPPORT
        )
        return cls(probs)


@dataclass(frozen=True)
class DiseaseConfig:
    """Population, horizon, seeding and the infectiousness profile."""

    population_size: int
    horizon: int
    profile: InfectiousnessProfile
    initial_infected: int = 5
    importation_prior_mean: float = 0.5

    def __post_init__(self):
        if self.population_size < 1:
            raise ConfigurationError("population_size must be >= 1")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")
        if not 0 <= self.initial_infected <= self.population_size:
            raise ConfigurationError("initial_infected must lie in [0, population_size]")
        if self.importation_prior_mean <= 0:
            raise ConfigurationError("importation_prior_mean must be positive")

    def to_json_dict(self) -> dict:
        return {
            "population_size": int(self.population_size),
            "horizon": int(self.horizon),
            "initial_infected": int(self.initial_infected),
            "importation_prior_mean": float(self.importation_prior_mean),
            "infectiousness_weights": [float(w) for w in self.profile.weights],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DiseaseConfig":
        known = {
            "population_size",
            "horizon",
            "initial_infected",
            "importation_prior_mean",
            "infectiousness_weights",
        }
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown disease config keys: {sorted(unknown)}")
        for key in ("population_size", "horizon"):
            if key not in d:
                raise ConfigurationError(f"disease config is missing {key!r}")
        if "infectiousness_weights" in d:
            profile = InfectiousnessProfile(np.asarray(d["infectiousness_weights"], dtype=float))
        else:
            profile = InfectiousnessProfile.default()
        return cls(
            population_size=int(d["population_size"]),
            horizon=int(d["horizon"]),
            profile=profile,
            initial_infected=int(d.get("initial_infected", 5)),
            importation_prior_mean=float(d.get("importation_prior_mean", 0.5)),
        )


@dataclass(frozen=True)
class RtTrajectory:
    """Reproduction numbers R_1..R_T plus the daily importation rate.

    Raw values may be negative (they come from an unconstrained Gaussian);
    every consumer clamps with max(., 0) before using them as rates.
    """

    R: np.ndarray
    gamma: float

    def __post_init__(self):
        R = np.asarray(self.R, dtype=float)
        if R.ndim != 1 or R.size == 0:
            raise ConfigurationError("R must be a non-empty 1-d vector")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "gamma", float(self.gamma))


def _check_counts(counts, config: DiseaseConfig) -> np.ndarray:
    n = np.asarray(counts)
    if n.shape != (config.horizon,):
        raise ConfigurationError(
            f"infection series has shape {n.shape}, expected ({config.horizon},)"
        )
    if np.any(n < 0):
        raise ConfigurationError("infection counts must be non-negative")
    return n.astype(np.int64)


def _check_trajectory(trajectory: RtTrajectory, config: DiseaseConfig) -> None:
    if trajectory.R.size != config.horizon:
        raise ConfigurationError(
            f"trajectory has {trajectory.R.size} days, expected {config.horizon}"
        )


def infection_days(counts, config: DiseaseConfig) -> np.ndarray:
    """Day of infection for every individual, seeds first (day 0).

    Expands the daily count series into one entry per infection; the
    observation models attach per-individual latent variables to these.
    """
    n = _check_counts(counts, config)
    days = np.repeat(np.arange(1, config.horizon + 1), n)
    if config.initial_infected:
        days = np.concatenate([np.zeros(config.initial_infected, dtype=np.int64), days])
    return days


def compute_phi(counts, config: DiseaseConfig) -> np.ndarray:
    """Total infectiousness phi_1..phi_T given a daily infection series.

    phi_t depends only on infections strictly before day t (counts up to
    day t-1 plus the seeds), never on day t itself.
    """
    n = _check_counts(counts, config)
    T = config.horizon
    w = config.profile.weights
    phi = np.zeros(T)
    # infections on day s add w_h on day s+h
    if T > 1:
        phi[1:] += np.convolve(n.astype(float), w)[: T - 1]
    seeds = config.initial_infected
    if seeds:
        k = min(w.size, T)
        phi[:k] += seeds * w[:k]
    return phi


def _floored_rates(counts, trajectory: RtTrajectory, config: DiseaseConfig):
    phi = compute_phi(counts, config)
    lam = np.maximum(trajectory.R, 0.0) * phi + max(trajectory.gamma, 0.0)
    return phi, np.maximum(lam, RATE_FLOOR)


def simulate(
    trajectory: RtTrajectory, config: DiseaseConfig, rng: int | np.random.Generator
) -> np.ndarray:
    """Draw a daily infection series from the branching model.

    Sequential Poisson draws; each day's draw is truncated so seeds plus
    cumulative infections never exceed the population size. Deterministic
    given the rng (integer seed or Generator).
    """
    _check_trajectory(trajectory, config)
    rng = as_generator(rng)
    T = config.horizon
    w = config.profile.weights
    H = w.size
    gam = max(trajectory.gamma, 0.0)
    R_eff = np.maximum(trajectory.R, 0.0)

    phi = np.zeros(T)
    seeds = config.initial_infected
    if seeds:
        k = min(H, T)
        phi[:k] += seeds * w[:k]

    counts = np.zeros(T, dtype=np.int64)
    remaining = config.population_size - seeds
    for t in range(T):
        lam = R_eff[t] * phi[t] + gam
        draw = int(rng.poisson(lam))
        draw = min(draw, remaining)
        counts[t] = draw
        remaining -= draw
        if draw and t + 1 < T:
            k = min(H, T - (t + 1))
            phi[t + 1 : t + 1 + k] += draw * w[:k]
    return counts


def log_density(counts, trajectory: RtTrajectory, config: DiseaseConfig) -> float:
    """Log-probability of an infection series under the branching model.

    Sum of Poisson log-pmfs with rates max(R_t,0)*phi_t + max(gamma,0),
    floored at RATE_FLOOR. Population truncation is ignored, so this is
    the model density the variational objective differentiates.
    """
    n = _check_counts(counts, config)
    _check_trajectory(trajectory, config)
    _, lam = _floored_rates(n, trajectory, config)
    return float(np.sum(n * np.log(lam) - lam - gammaln(n + 1.0)))


def grad_log_density(counts, trajectory: RtTrajectory, config: DiseaseConfig):
    """Gradient of log_density with respect to (R, gamma).

    Subgradient convention for the clamps: the R_t component vanishes
    wherever R_t <= 0, the gamma component vanishes when gamma <= 0.
    Returns (dR, dgamma) with dR of length T.
    """
    n = _check_counts(counts, config)
    _check_trajectory(trajectory, config)
    phi, lam = _floored_rates(n, trajectory, config)
    resid = n / lam - 1.0
    dR = np.where(trajectory.R > 0, phi * resid, 0.0)
    dgamma = float(resid.sum()) if trajectory.gamma > 0 else 0.0
    return dR, dgamma

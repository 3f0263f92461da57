"""Observation models: how positive test counts arise from infections.

Three sampling designs over one infection series:

* uniform undersampling: every infected person independently seeks a test
  with a fixed probability, some delay after converting;
* cross-sectional: a fresh random sample of the population is tested each
  day and the number of currently-positive individuals recorded;
* longitudinal: fixed cohorts are enrolled and retested every d days, an
  individual's first positive result is recorded and they then leave the
  testing pool.

Each design has a forward sampler and a stochastic estimator of
log p(x | n). The estimators sample the per-individual latent variables
(conversion/reversion times plus design-specific bookkeeping) and evaluate
closed-form binomial terms given those latents; averaging many such draws
lower-bounds the true log-likelihood by Jensen's inequality, which is the
direction the variational objective needs.

Per-day log terms are floored (default -50) so a single impossible day
cannot blow up an otherwise informative sample; pass floor=None to get the
raw value. Impossible configurations are signalled through the floor, not
exceptions.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .disease import DiseaseConfig, infection_days
from .distributions import as_generator, log_binom_pmf, sample_pmf
from .errors import ConfigurationError
from .testing import TestProfile

DEFAULT_LOG_FLOOR = -50.0


@dataclass(frozen=True)
class UniformUndersampling:
    """Independent per-infection testing with a reporting delay.

    Each infected individual is tested with probability test_prob; a test
    taken by an individual who converts at t_convert is reported at
    t_convert + delay, with the delay drawn from delay_values/delay_probs
    (default: always 2 days). Never-converters are never reported.
    """

    test_prob: float
    delay_values: np.ndarray = field(default_factory=lambda: np.asarray([2]))
    delay_probs: np.ndarray = field(default_factory=lambda: np.asarray([1.0]))

    def __post_init__(self):
        if not 0.0 < self.test_prob <= 1.0:
            raise ConfigurationError("test_prob must lie in (0, 1]")
        v = np.asarray(self.delay_values, dtype=np.int64)
        p = np.asarray(self.delay_probs, dtype=float)
        if v.ndim != 1 or p.shape != v.shape or v.size == 0:
            raise ConfigurationError("delay pmf must be matching non-empty 1-d vectors")
        if np.any(v < 0) or np.any(p < 0) or abs(float(p.sum()) - 1.0) > 1e-9:
            raise ConfigurationError("delay pmf must be non-negative and sum to 1")
        object.__setattr__(self, "delay_values", v)
        object.__setattr__(self, "delay_probs", p)
        object.__setattr__(self, "_delay_choices", v.astype(float))
        object.__setattr__(self, "_delay_cum", np.cumsum(p))

    def sample_delays(self, size: int, rng: np.random.Generator) -> np.ndarray:
        return sample_pmf(self._delay_choices, self._delay_cum, size, rng)

    def mean_delay(self) -> float:
        return float(np.dot(self.delay_values, self.delay_probs))


@dataclass(frozen=True)
class CrossSectional:
    """A fresh random sample of sample_sizes[t-1] people tested on day t.

    false_positive_rate is the chance an uninfected (or not currently
    positive) sampled individual still tests positive; it enters forward
    sampling only, the likelihood estimator assumes it is zero.
    """

    sample_sizes: np.ndarray
    false_positive_rate: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.sample_sizes, dtype=np.int64)
        if s.ndim != 1 or s.size == 0:
            raise ConfigurationError("sample_sizes must be a non-empty 1-d vector")
        if np.any(s < 0):
            raise ConfigurationError("sample_sizes must be non-negative")
        if not 0.0 <= self.false_positive_rate <= 1.0:
            raise ConfigurationError("false_positive_rate must lie in [0, 1]")
        object.__setattr__(self, "sample_sizes", s)

    @classmethod
    def fraction(cls, frac: float, config: DiseaseConfig, **kwargs) -> "CrossSectional":
        """Sample a fixed fraction of the population every day."""
        per_day = int(round(frac * config.population_size))
        return cls(np.full(config.horizon, per_day, dtype=np.int64), **kwargs)


@dataclass(frozen=True)
class Longitudinal:
    """Fixed cohorts retested every `cadence` days, first positive recorded.

    The population is split into cadence cohorts; cohort c (sized
    sample_sizes[c-1]) is tested on days c, c+cadence, c+2*cadence, ...
    An individual leaves the pool permanently after a positive result, so
    sample_sizes must repeat with period cadence (the cohorts persist).
    """

    sample_sizes: np.ndarray
    cadence: int
    false_positive_rate: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.sample_sizes, dtype=np.int64)
        d = int(self.cadence)
        if d < 1:
            raise ConfigurationError("cadence must be >= 1")
        if s.ndim != 1 or s.size == 0:
            raise ConfigurationError("sample_sizes must be a non-empty 1-d vector")
        if np.any(s < 0):
            raise ConfigurationError("sample_sizes must be non-negative")
        for t in range(s.size):
            if s[t] != s[t % d]:
                raise ConfigurationError(
                    "sample_sizes must repeat with period cadence (fixed cohorts)"
                )
        if not 0.0 <= self.false_positive_rate <= 1.0:
            raise ConfigurationError("false_positive_rate must lie in [0, 1]")
        object.__setattr__(self, "sample_sizes", s)
        object.__setattr__(self, "cadence", d)

    def cohort_sizes(self) -> np.ndarray:
        return self.sample_sizes[: min(self.cadence, self.sample_sizes.size)]

    @classmethod
    def fraction(
        cls, frac: float, config: DiseaseConfig, cadence: int, **kwargs
    ) -> "Longitudinal":
        """Enroll a fraction of the population per testing cycle.

        The enrolled pool is split as evenly as possible across the
        cadence cohorts, so a fraction f means f*N people are under
        surveillance, each tested once per cycle.
        """
        enrolled = int(round(frac * config.population_size))
        base, extra = divmod(enrolled, cadence)
        cohorts = np.asarray(
            [base + (1 if c < extra else 0) for c in range(cadence)], dtype=np.int64
        )
        reps = -(-config.horizon // cadence)
        return cls(np.tile(cohorts, reps)[: config.horizon], cadence=cadence, **kwargs)


ObservationScheme = UniformUndersampling | CrossSectional | Longitudinal


def validate_scheme(scheme: ObservationScheme, config: DiseaseConfig) -> None:
    """Shape/size consistency between a scheme and the disease config."""
    if isinstance(scheme, UniformUndersampling):
        return
    if scheme.sample_sizes.size != config.horizon:
        raise ConfigurationError(
            f"sample_sizes has {scheme.sample_sizes.size} days, expected {config.horizon}"
        )
    if isinstance(scheme, CrossSectional):
        if np.any(scheme.sample_sizes > config.population_size):
            raise ConfigurationError("daily sample size exceeds the population")
    else:
        if int(scheme.cohort_sizes().sum()) > config.population_size:
            raise ConfigurationError("enrolled cohorts exceed the population")


def _check_observations(x, config: DiseaseConfig) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape != (config.horizon,):
        raise ConfigurationError(
            f"observation series has shape {arr.shape}, expected ({config.horizon},)"
        )
    if np.any(arr < 0):
        raise ConfigurationError("observed counts must be non-negative")
    return arr.astype(np.int64)


def _prevalence_counts(t_convert, t_revert, horizon: int) -> np.ndarray:
    """Number of test-positive individuals on each day 1..T.

    An individual counts on day t when t_convert <= t < t_revert.
    """
    diff = np.zeros(horizon + 2, dtype=np.int64)
    fin = np.isfinite(t_convert)
    start = np.maximum(t_convert[fin], 1.0)
    end = np.minimum(t_revert[fin], float(horizon + 1))
    sel = start < end
    np.add.at(diff, start[sel].astype(np.int64), 1)
    np.add.at(diff, end[sel].astype(np.int64), -1)
    return np.cumsum(diff)[1 : horizon + 1]


def _uniform_day_counts(t_convert, delays, horizon: int) -> np.ndarray:
    """Histogram over days 1..T of conversion-plus-delay reporting times."""
    t_report = t_convert + delays
    fin = np.isfinite(t_report)
    days = t_report[fin].astype(np.int64)
    days = days[(days >= 1) & (days <= horizon)]
    return np.bincount(days - 1, minlength=horizon).astype(np.int64)


def _first_test_days(t_convert, cohort_first_day, cadence: int):
    """First scheduled test day at or after conversion, per individual (inf ok)."""
    gap = np.ceil((t_convert - cohort_first_day) / cadence)
    return cohort_first_day + cadence * np.maximum(gap, 0.0)


def sample_observations(
    counts,
    scheme: ObservationScheme,
    profile: TestProfile,
    config: DiseaseConfig,
    rng: int | np.random.Generator,
) -> np.ndarray:
    """Draw an observed positive-count series x_1..x_T for the scheme.

    rng draw order: per-individual conversions (offsets then durations),
    then the scheme's own draws. Enabling false positives adds draws, so
    it changes the stream relative to false_positive_rate = 0.
    """
    n = np.asarray(counts)
    rng = as_generator(rng)
    validate_scheme(scheme, config)
    days = infection_days(n, config)
    t_convert, t_revert = profile.sample_conversions(days, rng)
    T = config.horizon
    x = np.zeros(T, dtype=np.int64)

    if isinstance(scheme, UniformUndersampling):
        delays = scheme.sample_delays(days.size, rng)
        tested = rng.random(days.size) < scheme.test_prob
        masked = np.where(tested, t_convert, np.inf)
        return _uniform_day_counts(masked, delays, T)

    if isinstance(scheme, CrossSectional):
        pos = _prevalence_counts(t_convert, t_revert, T)
        # the day's sample is drawn without replacement, so s_t = N is a census
        x = rng.hypergeometric(pos, config.population_size - pos, scheme.sample_sizes)
        fp = scheme.false_positive_rate
        if fp > 0:
            x = x + rng.binomial(scheme.sample_sizes - x, fp)
        return x.astype(np.int64)

    # longitudinal: assign infected individuals to distinct population slots;
    # slots below the enrolled total define cohort membership
    d = scheme.cadence
    cohort_sizes = scheme.cohort_sizes()
    bounds = np.cumsum(cohort_sizes)
    m = days.size
    if m:
        slots = rng.choice(config.population_size, size=m, replace=False)
        cohort = np.searchsorted(bounds, slots, side="right")  # 0-based; >= d untested
        enrolled = cohort < d
        first_day = cohort + 1.0
        tau = _first_test_days(t_convert, first_day, d)
        hit = enrolled & np.isfinite(tau) & (tau <= T) & (t_revert > tau)
        np.add.at(x, tau[hit].astype(np.int64) - 1, 1)
        infected_per_cohort = np.bincount(cohort[enrolled], minlength=d)
    else:
        infected_per_cohort = np.zeros(d, dtype=np.int64)

    fp = scheme.false_positive_rate
    if fp > 0:
        never_pos = (cohort_sizes - infected_per_cohort).astype(np.int64)
        for t in range(1, T + 1):
            c = (t - 1) % d
            if never_pos[c] > 0:
                draw = int(rng.binomial(never_pos[c], fp))
                x[t - 1] += draw
                never_pos[c] -= draw
    return x


def loglik_uniform(
    x,
    counts,
    scheme: UniformUndersampling,
    profile: TestProfile,
    config: DiseaseConfig,
    rng: int | np.random.Generator,
    floor: float | None = DEFAULT_LOG_FLOOR,
) -> float:
    """One-sample log-likelihood estimate under uniform undersampling.

    Samples conversions and delays, then scores
    Binomial(x_t; #individuals reporting on day t, test_prob) per day.
    """
    xv = _check_observations(x, config)
    rng = as_generator(rng)
    days = infection_days(counts, config)
    t_convert, _ = profile.sample_conversions(days, rng)
    delays = scheme.sample_delays(days.size, rng)
    day_counts = _uniform_day_counts(t_convert, delays, config.horizon)
    terms = log_binom_pmf(xv, day_counts, scheme.test_prob)
    if floor is not None:
        terms = np.maximum(terms, floor)
    return float(terms.sum())


def loglik_cross_sectional(
    x,
    counts,
    scheme: CrossSectional,
    profile: TestProfile,
    config: DiseaseConfig,
    rng: int | np.random.Generator,
    floor: float | None = DEFAULT_LOG_FLOOR,
) -> float:
    """One-sample log-likelihood estimate for the cross-sectional design.

    Samples conversions, forms each day's population prevalence, and
    scores Binomial(x_t; s_t, prevalence_t) per day.
    """
    xv = _check_observations(x, config)
    validate_scheme(scheme, config)
    rng = as_generator(rng)
    days = infection_days(counts, config)
    t_convert, t_revert = profile.sample_conversions(days, rng)
    prev = _prevalence_counts(t_convert, t_revert, config.horizon) / config.population_size
    terms = log_binom_pmf(xv, scheme.sample_sizes, prev)
    if floor is not None:
        terms = np.maximum(terms, floor)
    return float(terms.sum())


@dataclass
class LongitudinalTrace:
    """Per-day internals of one longitudinal likelihood evaluation."""

    terms: np.ndarray  # floored per-day log terms
    n_draws: np.ndarray  # scheduled minus already-found, per day
    n_conv: np.ndarray  # eligible newly-convertible count, per day
    probs: np.ndarray  # per-draw success probability used in the binomial
    removed: np.ndarray  # individuals removed from the matrix after the day
    matrix_totals: np.ndarray  # matrix population after each day's removal


def longitudinal_trace(
    x,
    counts,
    scheme: Longitudinal,
    profile: TestProfile,
    config: DiseaseConfig,
    rng: int | np.random.Generator,
    floor: float | None = DEFAULT_LOG_FLOOR,
) -> LongitudinalTrace:
    """One-sample longitudinal likelihood estimate with per-day internals.

    Bookkeeping is an eligibility matrix over (conversion day, reversion
    day) cells, holding everyone not yet found positive. Day t with cohort
    c scores

        Binomial(x_t; s_t - found_c, n_conv / (N - sum_{i<t} x_i))

    where n_conv counts cells with conversion in (t - cadence, t] and
    reversion after t. After scoring, min(x_t, n_conv) individuals are
    removed from the eligible cells by a joint urn draw
    (multivariate hypergeometric, i.e. iterated uniform removal), and the
    cohort's found-positive counter grows by x_t (capped at s_t).

    Infeasible days (x_t > n_draws, or an exhausted denominator) score
    -inf and are floored like any other term.
    """
    xv = _check_observations(x, config)
    validate_scheme(scheme, config)
    rng = as_generator(rng)
    T = config.horizon
    d = scheme.cadence
    N = config.population_size

    days = infection_days(counts, config)
    t_convert, t_revert = profile.sample_conversions(days, rng)

    # eligibility matrix as {conversion day: {reversion day: count}}
    by_conv: dict[int, dict[int, int]] = {}
    fin = np.isfinite(t_convert)
    for tc, tr in zip(t_convert[fin].astype(np.int64), t_revert[fin].astype(np.int64)):
        row = by_conv.setdefault(int(tc), {})
        row[int(tr)] = row.get(int(tr), 0) + 1
    matrix_total = int(fin.sum())

    found = np.zeros(d, dtype=np.int64)
    cum_x = 0
    terms = np.empty(T)
    n_draws_out = np.empty(T, dtype=np.int64)
    n_conv_out = np.empty(T, dtype=np.int64)
    probs = np.empty(T)
    removed_out = np.empty(T, dtype=np.int64)
    totals_out = np.empty(T, dtype=np.int64)

    for t in range(1, T + 1):
        c = (t - 1) % d
        n_draws = max(int(scheme.sample_sizes[t - 1]) - int(found[c]), 0)

        cells: list[tuple[int, int, int]] = []
        n_conv = 0
        for tc in range(t - d + 1, t + 1):
            row = by_conv.get(tc)
            if not row:
                continue
            for tr, cnt in row.items():
                if tr > t:
                    cells.append((tc, tr, cnt))
                    n_conv += cnt

        denom = N - cum_x
        if denom <= 0:
            term = -np.inf
            p = np.nan
        else:
            p = min(n_conv / denom, 1.0)
            term = float(log_binom_pmf(xv[t - 1], n_draws, p))
        if floor is not None:
            term = max(term, floor)

        k = min(int(xv[t - 1]), n_conv)
        if k > 0:
            take = rng.multivariate_hypergeometric([cnt for _, _, cnt in cells], k)
            for (tc, tr, cnt), r in zip(cells, take):
                if r:
                    row = by_conv[tc]
                    if r == cnt:
                        del row[tr]
                        if not row:
                            del by_conv[tc]
                    else:
                        row[tr] = cnt - r
            matrix_total -= k

        found[c] = min(int(found[c]) + int(xv[t - 1]), int(scheme.sample_sizes[t - 1]))
        cum_x += int(xv[t - 1])

        terms[t - 1] = term
        n_draws_out[t - 1] = n_draws
        n_conv_out[t - 1] = n_conv
        probs[t - 1] = p
        removed_out[t - 1] = k
        totals_out[t - 1] = matrix_total

    return LongitudinalTrace(
        terms=terms,
        n_draws=n_draws_out,
        n_conv=n_conv_out,
        probs=probs,
        removed=removed_out,
        matrix_totals=totals_out,
    )


def loglik_longitudinal(
    x,
    counts,
    scheme: Longitudinal,
    profile: TestProfile,
    config: DiseaseConfig,
    rng: int | np.random.Generator,
    floor: float | None = DEFAULT_LOG_FLOOR,
) -> float:
    """One-sample longitudinal log-likelihood estimate (see longitudinal_trace)."""
    return float(longitudinal_trace(x, counts, scheme, profile, config, rng, floor).terms.sum())


def estimate_log_likelihood(
    x,
    counts,
    scheme: ObservationScheme,
    profile: TestProfile,
    config: DiseaseConfig,
    rng: int | np.random.Generator,
    floor: float | None = DEFAULT_LOG_FLOOR,
) -> float:
    """Dispatch to the scheme's one-sample log-likelihood estimator."""
    if isinstance(scheme, UniformUndersampling):
        return loglik_uniform(x, counts, scheme, profile, config, rng, floor)
    if isinstance(scheme, CrossSectional):
        return loglik_cross_sectional(x, counts, scheme, profile, config, rng, floor)
    if isinstance(scheme, Longitudinal):
        return loglik_longitudinal(x, counts, scheme, profile, config, rng, floor)
    raise ConfigurationError(f"unknown observation scheme {type(scheme).__name__}")


def scheme_to_json_dict(scheme: ObservationScheme) -> dict:
    if isinstance(scheme, UniformUndersampling):
        return {
            "kind": "uniform_undersampling",
            "test_prob": float(scheme.test_prob),
            "delay_pmf": [
                [int(v), float(p)] for v, p in zip(scheme.delay_values, scheme.delay_probs)
            ],
        }
    if isinstance(scheme, CrossSectional):
        return {
            "kind": "cross_sectional",
            "sample_sizes": [int(s) for s in scheme.sample_sizes],
            "false_positive_rate": float(scheme.false_positive_rate),
        }
    if isinstance(scheme, Longitudinal):
        return {
            "kind": "longitudinal",
            "sample_sizes": [int(s) for s in scheme.sample_sizes],
            "cadence": int(scheme.cadence),
            "false_positive_rate": float(scheme.false_positive_rate),
        }
    raise ConfigurationError(f"unknown observation scheme {type(scheme).__name__}")


def scheme_from_json_dict(d: dict) -> ObservationScheme:
    kind = d.get("kind")
    if kind == "uniform_undersampling":
        known = {"kind", "test_prob", "delay_pmf"}
        _reject_unknown(d, known, "observation")
        if "test_prob" not in d:
            raise ConfigurationError("uniform_undersampling needs test_prob")
        kwargs = {"test_prob": float(d["test_prob"])}
        if "delay_pmf" in d:
            pmf = np.asarray(d["delay_pmf"], dtype=float)
            if pmf.ndim != 2 or pmf.shape[1] != 2:
                raise ConfigurationError("delay_pmf entries must be [value, prob] pairs")
            kwargs["delay_values"] = pmf[:, 0].astype(np.int64)
            kwargs["delay_probs"] = pmf[:, 1]
        return UniformUndersampling(**kwargs)
    if kind == "cross_sectional":
        _reject_unknown(d, {"kind", "sample_sizes", "false_positive_rate"}, "observation")
        if "sample_sizes" not in d:
            raise ConfigurationError("cross_sectional needs sample_sizes")
        return CrossSectional(
            np.asarray(d["sample_sizes"], dtype=np.int64),
            false_positive_rate=float(d.get("false_positive_rate", 0.0)),
        )
    if kind == "longitudinal":
        _reject_unknown(
            d, {"kind", "sample_sizes", "cadence", "false_positive_rate"}, "observation"
        )
        if "sample_sizes" not in d or "cadence" not in d:
            raise ConfigurationError("longitudinal needs sample_sizes and cadence")
        return Longitudinal(
            np.asarray(d["sample_sizes"], dtype=np.int64),
            cadence=int(d["cadence"]),
            false_positive_rate=float(d.get("false_positive_rate", 0.0)),
        )
    raise ConfigurationError(f"unknown observation kind {kind!r}")


def _reject_unknown(d: dict, known: set, section: str) -> None:
    unknown = set(d) - known
    if unknown:
        raise ConfigurationError(f"unknown {section} config keys: {sorted(unknown)}")

"""Tests for the sliding-window conjugate baseline."""

import numpy as np
import pytest
from scipy.stats import gamma as gamma_dist

from rtinfer.cori import (
    MAX_DELAY_SHIFT,
    CoriConfig,
    CoriPosterior,
    cori_posterior,
    suggested_delay_shift,
)
from rtinfer.disease import DiseaseConfig, InfectiousnessProfile, RtTrajectory, simulate
from rtinfer.engine import posterior_csv_rows
from rtinfer.errors import ConfigurationError
from rtinfer.observation import CrossSectional, Longitudinal, UniformUndersampling
from rtinfer.testing import TestProfile as Profile
from rtinfer.testing import builtin_profile


def make_profile(offset_pmf, duration_pmf, never=0.0):
    offs, offp = zip(*offset_pmf.items()) if never < 1.0 else ((), ())
    durs, durp = zip(*duration_pmf.items())
    return Profile(
        convert_offsets=np.asarray(offs),
        convert_probs=np.asarray(offp, dtype=float),
        never_convert_prob=never,
        duration_values=np.asarray(durs),
        duration_probs=np.asarray(durp, dtype=float),
    )


class TestConjugateUpdate:
    def test_textbook_window(self):
        # day 2 with a one-day window: case sum 10, infectiousness sum 8
        post = cori_posterior([8, 10], [1.0], CoriConfig(window=1))
        assert not post.valid[0]  # no infectiousness seen yet
        assert post.valid[1]
        assert post.mean_R[1] == pytest.approx(11.0 / 8.2, abs=5e-5)
        assert post.shape[1] == pytest.approx(11.0)
        assert post.scale[1] == pytest.approx(1.0 / 8.2)

    def test_matches_grid_integration(self):
        # posterior density for the window is Gamma(a, b) prior times
        # independent Poisson(R * lam_s) likelihoods; integrate it on a
        # grid over days whose window sees only positive infectiousness
        x = np.array([3.0, 2.0, 4.0, 5.0, 3.0])
        w = np.array([0.4, 0.6])
        cfg = CoriConfig(window=2, prior_shape=1.5, prior_scale=2.0)
        post = cori_posterior(x, w, cfg)
        y = x
        lam = np.zeros(5)
        lam[1] = 0.4 * y[0]
        for s in (2, 3, 4):
            lam[s] = 0.4 * y[s - 1] + 0.6 * y[s - 2]
        R = np.linspace(1e-9, 30.0, 300_001)
        for t in (2, 3, 4):
            dens = R ** (cfg.prior_shape - 1) * np.exp(-R / cfg.prior_scale)
            for s in range(t - 1, t + 1):
                dens = dens * (R * lam[s]) ** y[s] * np.exp(-R * lam[s])
            Z = np.trapezoid(dens, R)
            mean = np.trapezoid(R * dens, R) / Z
            sd = np.sqrt(np.trapezoid(R**2 * dens, R) / Z - mean**2)
            assert post.mean_R[t] == pytest.approx(mean, rel=1e-6)
            assert post.sd_R[t] == pytest.approx(sd, rel=1e-5)

    def test_flat_prior_limit_recovers_growth_ratio(self):
        # geometric counts keep x_t / lam_t at a constant rho, so the
        # vanishing-prior posterior mean lands on rho for every window size
        rho = 1.3
        x = 100.0 * rho ** np.arange(8)
        cfg = CoriConfig(window=3, prior_shape=1e-9, prior_scale=1e12)
        post = cori_posterior(x, [1.0], cfg)
        assert not post.valid[0]
        # full windows only: partial ones touch day 1, which carries cases
        # but no infectiousness and so distorts the ratio
        np.testing.assert_allclose(post.mean_R[3:], rho, rtol=1e-7)

    def test_partial_window_at_series_start(self):
        x = np.array([2.0, 3.0, 4.0])
        post = cori_posterior(x, [1.0], CoriConfig(window=3))
        # day 2 window clips to days 1..2; only day 2 carries infectiousness
        assert post.shape[1] == pytest.approx(1.0 + 5.0)
        assert post.scale[1] == pytest.approx(1.0 / (0.2 + 2.0))
        # day 3 window covers the whole series
        assert post.shape[2] == pytest.approx(1.0 + 9.0)
        assert post.scale[2] == pytest.approx(1.0 / (0.2 + 5.0))

    def test_all_zero_window_marked_invalid(self):
        post = cori_posterior([0, 0, 0, 5, 6], [1.0], CoriConfig(window=2))
        assert not post.valid[:3].any()  # zero infectiousness through day 3
        assert post.valid[4]
        assert np.isnan(post.mean_R[0])


class TestDelayShift:
    def test_shift_realigns_series(self):
        x = np.array([5.0, 6.0, 7.0, 8.0, 9.0])
        post = cori_posterior(x, [1.0], CoriConfig(window=1, delay_shift=2))
        # y = x[2:]; day 2 scores y_2 = 8 against lam = y_1 = 7
        assert post.valid[1]
        assert post.shape[1] == pytest.approx(1.0 + 8.0)
        assert post.scale[1] == pytest.approx(1.0 / (0.2 + 7.0))
        # days shifted past the end of the series carry no estimate
        assert not post.valid[3:].any()

    def test_shift_must_leave_days(self):
        with pytest.raises(ConfigurationError):
            cori_posterior([1, 2, 3], [1.0], CoriConfig(window=1, delay_shift=3))


class TestProperties:
    def test_monotone_in_window_case_sum(self):
        x = np.array([4.0, 5.0, 6.0, 7.0])
        bumped = x.copy()
        bumped[2] += 5.0
        cfg = CoriConfig(window=1)
        a = cori_posterior(x, [1.0], cfg)
        b = cori_posterior(bumped, [1.0], cfg)
        assert b.mean_R[2] > a.mean_R[2]
        # earlier days depend only on earlier counts
        np.testing.assert_array_equal(a.shape[:2], b.shape[:2])
        np.testing.assert_array_equal(a.scale[:2], b.scale[:2])

    def test_window_locality_bit_identical(self):
        rng = np.random.default_rng(5)
        x = rng.poisson(20.0, size=30).astype(float)
        other = x.copy()
        other[-1] += 50.0  # outside every earlier day's window
        cfg = CoriConfig(window=7)
        a = cori_posterior(x, [0.3, 0.7], cfg)
        b = cori_posterior(other, [0.3, 0.7], cfg)
        assert np.array_equal(a.shape[:-1], b.shape[:-1], equal_nan=True)
        assert np.array_equal(a.scale[:-1], b.scale[:-1], equal_nan=True)

        front = x.copy()
        front[0] += 50.0  # drops out of the window (and lam) after day 8
        c = cori_posterior(front, [1.0], cfg)
        assert np.array_equal(a_shape_tail := a.shape[8:], c.shape[8:], equal_nan=True)
        assert a_shape_tail.size > 0

    def test_recovers_unit_reproduction_number(self):
        # full observation of a critical branching process: x is the
        # infection series itself, so the window update is well specified
        T = 40
        disease = DiseaseConfig(
            population_size=10**6,
            horizon=T,
            profile=InfectiousnessProfile(np.asarray([0.4, 0.6])),
            initial_infected=50,
        )
        truth = RtTrajectory(R=np.full(T, 1.0), gamma=2.0)
        cfg = CoriConfig(window=7)
        interior = slice(8, T)
        total = 0
        hits = 0
        for rep in range(20):
            counts = simulate(truth, disease, np.random.default_rng(900 + rep))
            post = cori_posterior(counts.astype(float), disease.profile, cfg)
            mean = post.mean_R[interior]
            assert np.all(post.valid[interior])
            hits += int(np.sum(np.abs(mean - 1.0) <= 0.2))
            total += mean.size
        assert hits / total >= 0.8, f"{hits}/{total} interior day estimates within 0.2"


class TestPosteriorAccessors:
    def build(self):
        rng = np.random.default_rng(2)
        x = rng.poisson(30.0, size=20).astype(float)
        return cori_posterior(x, [0.5, 0.5], CoriConfig(window=5))

    def test_moments_match_gamma(self):
        post = self.build()
        v = post.valid
        np.testing.assert_allclose(
            post.mean_R[v], gamma_dist.mean(a=post.shape[v], scale=post.scale[v]), rtol=1e-12
        )
        np.testing.assert_allclose(
            post.sd_R[v], gamma_dist.std(a=post.shape[v], scale=post.scale[v]), rtol=1e-12
        )

    def test_quantiles_match_gamma_ppf(self):
        post = self.build()
        qs = np.array([0.05, 0.5, 0.95])
        got = post.quantiles(qs)
        v = post.valid
        for j, q in enumerate(qs):
            np.testing.assert_allclose(
                got[v, j], gamma_dist.ppf(q, a=post.shape[v], scale=post.scale[v]), rtol=1e-10
            )
        assert np.all(np.isnan(got[~v]))
        assert np.all(np.diff(got[v], axis=1) > 0)

    def test_intervals_nested(self):
        post = self.build()
        lo50, hi50 = post.interval(0.5)
        lo90, hi90 = post.interval(0.9)
        v = post.valid
        assert np.all(lo90[v] < lo50[v])
        assert np.all(hi50[v] < hi90[v])
        with pytest.raises(ConfigurationError):
            post.interval(0.0)

    def test_csv_rows_skip_invalid_days(self):
        post = self.build()
        rows = posterior_csv_rows(post)
        assert rows[0] == ["day", "mean_R", "sd_R", "q05", "q25", "q50", "q75", "q95"]
        days = [int(r[0]) for r in rows[1:]]
        assert days == [t + 1 for t in range(20) if post.valid[t]]
        assert len(days) == int(post.valid.sum())


class TestSuggestedDelayShift:
    def test_uniform_adds_reporting_delay(self):
        profile = make_profile({3: 1.0}, {8: 1.0})
        scheme = UniformUndersampling(test_prob=0.1, delay_values=np.asarray([2]), delay_probs=np.asarray([1.0]))
        assert suggested_delay_shift(profile, scheme) == 5

    def test_cross_sectional_adds_half_duration(self):
        profile = make_profile({3: 1.0}, {8: 1.0})
        assert suggested_delay_shift(profile, CrossSectional(np.full(4, 10))) == 7

    def test_longitudinal_adds_half_cadence(self):
        profile = make_profile({3: 1.0}, {8: 1.0})
        scheme = Longitudinal(np.full(4, 5), cadence=6)
        assert suggested_delay_shift(profile, scheme) == 6

    def test_serological_cap(self):
        profile = builtin_profile("serological")
        shift = suggested_delay_shift(profile, CrossSectional(np.full(4, 10)))
        assert shift == MAX_DELAY_SHIFT

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ConfigurationError):
            suggested_delay_shift(make_profile({3: 1.0}, {8: 1.0}), object())


class TestConfig:
    def test_defaults(self):
        cfg = CoriConfig()
        assert (cfg.window, cfg.prior_shape, cfg.prior_scale) == (7, 1.0, 5.0)

    def test_validation(self):
        for kwargs in (
            {"window": 0},
            {"prior_shape": 0.0},
            {"prior_scale": -1.0},
            {"delay_shift": -1},
        ):
            with pytest.raises(ConfigurationError):
                CoriConfig(**kwargs)

    def test_json_round_trip(self):
        cfg = CoriConfig(window=5, prior_shape=2.0, prior_scale=3.0, delay_shift=4)
        assert CoriConfig.from_json_dict(cfg.to_json_dict()) == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            CoriConfig.from_json_dict({"window": 7, "tau": 7})

    def test_input_validation(self):
        with pytest.raises(ConfigurationError):
            cori_posterior([], [1.0], CoriConfig())
        with pytest.raises(ConfigurationError):
            cori_posterior([1, -2], [1.0], CoriConfig())

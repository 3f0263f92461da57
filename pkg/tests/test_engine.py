"""Tests for the stochastic variational inference engine."""

import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from oracles import exact_capped_branching_likelihood
from rtinfer.disease import (
    DiseaseConfig,
    InfectiousnessProfile,
    grad_log_density,
    simulate,
)
from rtinfer.distributions import trailing_moving_average
from rtinfer.engine import (
    InferenceProblem,
    SviConfig,
    element_streams,
    estimate_elbo,
    estimate_gradient,
    fit,
    load_checkpoint,
    posterior_csv_rows,
    save_checkpoint,
    summarize,
    write_elbo_csv,
    write_posterior_csv,
)
from rtinfer.errors import ConfigurationError, NonFiniteGradientError
from rtinfer.observation import (
    CrossSectional,
    UniformUndersampling,
    estimate_log_likelihood,
    sample_observations,
)
from rtinfer.prior import (
    GpKernelConfig,
    PriorConfig,
    VariationalState,
    entropy,
    gaussian_block_kl,
    grad_prior_terms,
    initial_state,
    prior_cross_entropy,
    sample_q,
    softplus_inv,
)
from rtinfer.testing import TestProfile as Profile


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


def cross_problem(horizon, population, seeds, samples_per_day, duration=9, gamma_bar=0.5):
    disease = DiseaseConfig(
        population_size=population,
        horizon=horizon,
        profile=InfectiousnessProfile(np.asarray([1.0])),
        initial_infected=seeds,
    )
    return InferenceProblem(
        disease=disease,
        scheme=CrossSectional(np.full(horizon, samples_per_day)),
        profile=make_profile({0: 1.0}, {duration: 1.0}),
        prior=PriorConfig(kernel=GpKernelConfig(), importation_mean=gamma_bar),
    )


def silent_problem(horizon):
    """Nobody ever tests positive, so the likelihood term is identically zero."""
    disease = DiseaseConfig(
        population_size=500,
        horizon=horizon,
        profile=InfectiousnessProfile(np.asarray([1.0])),
        initial_infected=2,
    )
    return InferenceProblem(
        disease=disease,
        scheme=UniformUndersampling(test_prob=0.5),
        profile=make_profile({0: 1.0}, {5: 1.0}, never=1.0),
        # short lengthscale keeps the Gram matrix well conditioned, so the
        # noiseless objective converges tightly within the iteration budget
        prior=PriorConfig(kernel=GpKernelConfig(lengthscale=1.5), importation_mean=0.5),
    )


class TestSviConfig:
    def test_defaults_valid(self):
        cfg = SviConfig()
        assert cfg.batch_size == 16
        assert cfg.iterations == 4000
        assert cfg.learning_rate == 0.02

    def test_batch_size_floor(self):
        with pytest.raises(ConfigurationError):
            SviConfig(batch_size=1)
        SviConfig(batch_size=2)  # smallest batch the centring supports

    def test_other_validation(self):
        for kwargs in (
            {"iterations": 0},
            {"learning_rate": 0.0},
            {"warmup_iterations": 0},
            {"adam_beta1": 1.0},
            {"adam_beta2": -0.1},
            {"elbo_samples": 0},
            {"checkpoint_every": -1},
            {"rng_seed": -1},
        ):
            with pytest.raises(ConfigurationError):
                SviConfig(**kwargs)

    def test_json_round_trip(self):
        cfg = SviConfig(batch_size=8, iterations=50, likelihood_floor=None, rng_seed=9)
        clone = SviConfig.from_json_dict(json.loads(json.dumps(cfg.to_json_dict())))
        assert clone == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigurationError, match="unknown"):
            SviConfig.from_json_dict({"momentum": 0.9})


class TestElementStreams:
    def test_same_key_reproduces(self):
        a = element_streams(3, 17, 4)
        b = element_streams(3, 17, 4)
        for ga, gb in zip(a, b):
            assert ga.standard_normal() == gb.standard_normal()

    def test_distinct_elements_differ(self):
        streams = element_streams(0, 0, 6)
        draws = [g.standard_normal() for g in streams]
        assert len(set(draws)) == 6


class TestGradientEstimator:
    def test_constant_payoff_reduces_to_prior_gradient(self):
        # every log-likelihood is exactly zero, the centring removes the
        # constant, so the estimate equals the closed-form prior gradient
        problem = silent_problem(5)
        state = initial_state(problem.prior, 5)
        x = np.zeros(5, dtype=int)
        est = estimate_gradient(state, x, problem, 4, rng=11)
        pmu, praw = grad_prior_terms(state, problem.prior)
        np.testing.assert_allclose(est.grad_mu, pmu, atol=1e-14)
        np.testing.assert_allclose(est.grad_raw, praw, atol=1e-14)
        assert est.loglik_mean == 0.0
        ce = prior_cross_entropy(state, problem.prior)
        assert est.elbo_estimate == pytest.approx(ce + entropy(state), rel=1e-12)

    def test_matches_manual_recomposition(self):
        problem = cross_problem(3, 200, 3, 20)
        T = 3
        rng = np.random.default_rng(8)
        state = initial_state(problem.prior, T)
        state = VariationalState(
            mu=state.mu + 0.1 * rng.standard_normal(T + 1), raw_chol=state.raw_chol
        )
        x = np.array([2, 3, 1])
        b = 6

        est = estimate_gradient(state, x, problem, b, rng_streams=element_streams(5, 0, b))

        scores, xis, lls = [], [], []
        for stream in element_streams(5, 0, b):
            traj, xi = sample_q(state, stream)
            counts = simulate(traj, problem.disease, stream)
            ll = estimate_log_likelihood(
                x, counts, problem.scheme, problem.profile, problem.disease, stream
            )
            dR, dg = grad_log_density(counts, traj, problem.disease)
            scores.append(np.append(dR, dg))
            xis.append(xi)
            lls.append(ll)
        scores = np.stack(scores)
        xis = np.stack(xis)
        lls = np.asarray(lls)

        centred = lls - (lls.sum() - lls) / (b - 1)
        gmu = scores.T @ centred / b
        gL = (scores * centred[:, None]).T @ xis / b
        graw = np.tril(gL)
        diag = np.diag_indices(state.dim)
        from scipy.special import expit

        graw[diag] *= expit(np.diag(state.raw_chol))
        pmu, praw = grad_prior_terms(state, problem.prior)

        np.testing.assert_allclose(est.grad_mu, gmu + pmu, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(est.grad_raw, graw + praw, rtol=1e-12, atol=1e-12)
        assert est.loglik_mean == pytest.approx(lls.mean(), rel=1e-12)
        ce = prior_cross_entropy(state, problem.prior)
        assert est.elbo_estimate == pytest.approx(ce + entropy(state) + lls.mean(), rel=1e-12)

    def test_centring_keeps_mean_and_cuts_variance(self):
        # the leave-one-out control variate must not move the estimator's
        # expectation, and should shrink its variance substantially
        problem = cross_problem(3, 200, 3, 20)
        T = 3
        state = initial_state(problem.prior, T)
        x = np.array([2, 3, 1])
        b = 4
        n_batches = 2500
        dim = T + 1
        plain = np.empty((n_batches, dim))
        loo = np.empty((n_batches, dim))
        for i in range(n_batches):
            scores, lls = [], []
            for stream in element_streams(i, 0, b):
                traj, _ = sample_q(state, stream)
                counts = simulate(traj, problem.disease, stream)
                lls.append(
                    estimate_log_likelihood(
                        x, counts, problem.scheme, problem.profile, problem.disease, stream
                    )
                )
                dR, dg = grad_log_density(counts, traj, problem.disease)
                scores.append(np.append(dR, dg))
            scores = np.stack(scores)
            lls = np.asarray(lls)
            plain[i] = scores.T @ lls / b
            loo[i] = scores.T @ (lls - (lls.sum() - lls) / (b - 1)) / b

        diff = plain - loo
        se = diff.std(axis=0, ddof=1) / np.sqrt(n_batches)
        np.testing.assert_array_less(np.abs(diff.mean(axis=0)), 4 * se + 1e-12)
        assert loo.var(axis=0, ddof=1).sum() < 0.5 * plain.var(axis=0, ddof=1).sum()

    def test_same_streams_reproduce(self):
        problem = cross_problem(4, 100, 2, 10)
        state = initial_state(problem.prior, 4)
        x = np.array([1, 0, 2, 1])
        a = estimate_gradient(state, x, problem, 4, rng_streams=element_streams(2, 3, 4))
        b = estimate_gradient(state, x, problem, 4, rng_streams=element_streams(2, 3, 4))
        np.testing.assert_array_equal(a.grad_mu, b.grad_mu)
        np.testing.assert_array_equal(a.grad_raw, b.grad_raw)
        assert a.elbo_estimate == b.elbo_estimate

    def test_executor_matches_serial(self):
        problem = cross_problem(4, 100, 2, 10)
        state = initial_state(problem.prior, 4)
        x = np.array([1, 0, 2, 1])
        serial = estimate_gradient(state, x, problem, 8, rng_streams=element_streams(7, 1, 8))
        with ThreadPoolExecutor(max_workers=4) as ex:
            threaded = estimate_gradient(
                state, x, problem, 8, rng_streams=element_streams(7, 1, 8), executor=ex
            )
        np.testing.assert_array_equal(serial.grad_mu, threaded.grad_mu)
        np.testing.assert_array_equal(serial.grad_raw, threaded.grad_raw)

    def test_argument_validation(self):
        problem = cross_problem(3, 100, 2, 10)
        state = initial_state(problem.prior, 3)
        x = np.zeros(3, dtype=int)
        with pytest.raises(ConfigurationError):
            estimate_gradient(state, x, problem, 1, rng=0)
        with pytest.raises(ConfigurationError):
            estimate_gradient(state, x, problem, 4, rng_streams=element_streams(0, 0, 3))
        with ThreadPoolExecutor(max_workers=2) as ex:
            with pytest.raises(ConfigurationError):
                estimate_gradient(state, x, problem, 4, rng=0, executor=ex)


class TestElboEstimator:
    def test_deterministic_given_seed(self):
        problem = cross_problem(3, 100, 2, 10)
        state = initial_state(problem.prior, 3)
        x = np.array([1, 1, 0])
        a = estimate_elbo(state, x, problem, 40, rng=7)
        b = estimate_elbo(state, x, problem, 40, rng=7)
        assert a == b

    def test_bounded_by_log_evidence(self):
        # tiny capped instance: at most 4 infections in total, so the count
        # series enumerates exactly; the marginal likelihood integral over
        # the prior is estimated by Monte Carlo with that exact inner sum
        T = 3
        seeds = 2
        N = 6
        s = np.array([3, 3, 3])
        problem = cross_problem(T, N, seeds, 3, duration=9, gamma_bar=0.5)
        x = np.array([1, 1, 2])

        rng = np.random.default_rng(1234)
        K = problem.prior.kernel.gram(T)
        L_K = np.linalg.cholesky(K)
        m = 3000
        R_draws = 1.0 + rng.standard_normal((m, T)) @ L_K.T
        g_draws = rng.exponential(0.5, size=m)
        p_vals = np.array(
            [
                exact_capped_branching_likelihood(x, R_draws[i], g_draws[i], seeds, N, s)
                for i in range(m)
            ]
        )
        p_bar = p_vals.mean()
        p_se = p_vals.std(ddof=1) / np.sqrt(m)
        log_p_ucb = np.log(p_bar + 4 * p_se)

        states = [initial_state(problem.prior, T)]
        srng = np.random.default_rng(55)
        for scale in (0.2, 0.4):
            base = initial_state(problem.prior, T)
            mu = base.mu + scale * srng.standard_normal(T + 1)
            mu[-1] = abs(mu[-1]) + 0.2  # keep the importation mean clearly positive
            states.append(VariationalState(mu=mu, raw_chol=base.raw_chol))

        for state in states:
            reps = [estimate_elbo(state, x, problem, 150, rng=1000 + r) for r in range(10)]
            e_bar = np.mean(reps)
            e_se = np.std(reps, ddof=1) / np.sqrt(len(reps))
            assert e_bar + 4 * e_se <= log_p_ucb, (
                f"elbo {e_bar:.4f} (+{4 * e_se:.4f}) exceeds log evidence {log_p_ucb:.4f}"
            )

    def test_silent_model_gives_exact_prior_terms(self):
        problem = silent_problem(4)
        state = initial_state(problem.prior, 4)
        value = estimate_elbo(state, np.zeros(4, dtype=int), problem, 5, rng=0)
        expected = prior_cross_entropy(state, problem.prior) + entropy(state)
        assert value == pytest.approx(expected, rel=1e-12)


class TestSilentOptimization:
    def test_recovers_prior_mean_and_shape(self):
        # with nothing observed the objective is cross-entropy + entropy,
        # maximized at the prior itself: mu_R pinned at 1 and the R block
        # of the covariance pulled from the quarter-scale start to K
        T = 8
        problem = silent_problem(T)
        x = np.zeros(T, dtype=int)
        config = SviConfig(batch_size=2, iterations=800, rng_seed=0)
        summary = fit(x, problem, config)
        assert np.max(np.abs(summary.mean_R - 1.0)) < 0.05
        assert gaussian_block_kl(summary.state, problem.prior) < 0.1


class TestFit:
    def small_setup(self, T=5):
        problem = cross_problem(T, 300, 3, 25)
        rng = np.random.default_rng(99)
        truth = simulate(
            sample_q(initial_state(problem.prior, T), rng)[0], problem.disease, rng
        )
        x = sample_observations(truth, problem.scheme, problem.profile, problem.disease, rng)
        return problem, x

    def test_same_seed_reproduces(self):
        problem, x = self.small_setup()
        config = SviConfig(batch_size=4, iterations=25, rng_seed=3)
        a = fit(x, problem, config)
        b = fit(x, problem, config)
        np.testing.assert_array_equal(a.state.mu, b.state.mu)
        np.testing.assert_array_equal(a.state.raw_chol, b.state.raw_chol)
        np.testing.assert_array_equal(a.elbo_trace_raw, b.elbo_trace_raw)
        assert a.final_elbo == b.final_elbo

    def test_thread_count_does_not_change_result(self):
        problem, x = self.small_setup()
        config = SviConfig(batch_size=6, iterations=20, rng_seed=5)
        serial = fit(x, problem, config, threads=1)
        threaded = fit(x, problem, config, threads=4)
        np.testing.assert_array_equal(serial.state.mu, threaded.state.mu)
        np.testing.assert_array_equal(serial.state.raw_chol, threaded.state.raw_chol)
        np.testing.assert_array_equal(serial.elbo_trace_raw, threaded.elbo_trace_raw)
        assert serial.final_elbo == threaded.final_elbo

    def test_checkpoint_resume_matches_uninterrupted(self, tmp_path):
        problem, x = self.small_setup()
        ckpt = str(tmp_path / "state.json")
        straight = fit(x, problem, SviConfig(batch_size=4, iterations=24, rng_seed=7))
        fit(x, problem, SviConfig(batch_size=4, iterations=16, rng_seed=7), checkpoint_path=ckpt)
        resumed = fit(
            x,
            problem,
            SviConfig(batch_size=4, iterations=24, rng_seed=7),
            resume_from=ckpt,
        )
        np.testing.assert_array_equal(straight.state.mu, resumed.state.mu)
        np.testing.assert_array_equal(straight.state.raw_chol, resumed.state.raw_chol)
        np.testing.assert_array_equal(straight.elbo_trace_raw, resumed.elbo_trace_raw)
        assert straight.final_elbo == resumed.final_elbo

    def test_periodic_checkpoints_written(self, tmp_path):
        problem, x = self.small_setup()
        ckpt = str(tmp_path / "periodic.json")
        fit(
            x,
            problem,
            SviConfig(batch_size=4, iterations=10, checkpoint_every=4, rng_seed=1),
            checkpoint_path=ckpt,
        )
        payload = load_checkpoint(ckpt)
        assert payload["iteration"] == 10
        assert len(payload["elbo_trace_raw"]) == 10

    def test_checkpoint_missing_key_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"iteration": 3}))
        with pytest.raises(ConfigurationError, match="missing"):
            load_checkpoint(str(path))

    def test_resume_horizon_mismatch_rejected(self, tmp_path):
        problem, x = self.small_setup(T=5)
        other, x8 = self.small_setup(T=8)
        ckpt = str(tmp_path / "mismatch.json")
        fit(x8, other, SviConfig(batch_size=4, iterations=4, rng_seed=0), checkpoint_path=ckpt)
        with pytest.raises(ConfigurationError, match="horizon"):
            fit(x, problem, SviConfig(batch_size=4, iterations=8, rng_seed=0), resume_from=ckpt)

    def test_impossible_data_without_floor_aborts(self):
        # x demands more positives than the population can produce; with the
        # floor disabled every batch log-likelihood is -inf and the centred
        # payoff turns nan
        T = 2
        disease = DiseaseConfig(
            population_size=20,
            horizon=T,
            profile=InfectiousnessProfile(np.asarray([1.0])),
            initial_infected=3,
        )
        problem = InferenceProblem(
            disease=disease,
            scheme=CrossSectional(np.full(T, 20)),
            profile=make_profile({0: 1.0}, {9: 1.0}, never=1.0),
            prior=PriorConfig(kernel=GpKernelConfig(), importation_mean=0.5),
        )
        x = np.array([5, 5])  # nobody ever converts, so any positive count is impossible
        config = SviConfig(batch_size=4, iterations=3, likelihood_floor=None, rng_seed=0)
        with pytest.raises(NonFiniteGradientError) as excinfo:
            fit(x, problem, config)
        assert excinfo.value.diagnostics["iteration"] == 0
        assert "state" in excinfo.value.diagnostics

    def test_recovers_constant_growth_rate(self):
        # synthetic truth with R fixed at 1.2 and a 5% daily cross-section:
        # the posterior mean should track the truth on most interior days.
        # The horizon is kept short so that even optimizer excursions well
        # above the truth stay far from the population cap, where the
        # untruncated-density gradient stops matching the capped sampler.
        T = 12
        N = 2_000_000
        disease = DiseaseConfig(
            population_size=N,
            horizon=T,
            profile=InfectiousnessProfile(np.asarray([1.0])),
            initial_infected=100,
        )
        problem = InferenceProblem(
            disease=disease,
            scheme=CrossSectional(np.full(T, N // 20)),
            profile=make_profile({0: 1.0}, {20: 1.0}),
            prior=PriorConfig(kernel=GpKernelConfig(), importation_mean=0.5),
        )
        rng = np.random.default_rng(424)
        from rtinfer.disease import RtTrajectory

        truth = RtTrajectory(R=np.full(T, 1.2), gamma=0.5)
        counts = simulate(truth, disease, rng)
        assert counts.sum() < 0.01 * N  # instance stays deep inside the cap
        x = sample_observations(counts, problem.scheme, problem.profile, disease, rng)
        config = SviConfig(
            batch_size=24, iterations=1500, learning_rate=0.01, warmup_iterations=400, rng_seed=2
        )
        summary = fit(x, problem, config, threads=2)
        interior = slice(2, T - 2)
        hits = np.abs(summary.mean_R[interior] - 1.2) <= 0.15
        assert hits.mean() >= 0.8, f"only {hits.sum()}/{hits.size} interior days within 0.15"


class TestSummary:
    def build(self):
        rng = np.random.default_rng(42)
        T = 6
        prior = PriorConfig(kernel=GpKernelConfig(), importation_mean=0.5)
        state = initial_state(prior, T)
        state = VariationalState(
            mu=state.mu + 0.1 * rng.standard_normal(T + 1), raw_chol=state.raw_chol
        )
        trace = rng.standard_normal(120).cumsum()
        return summarize(state, trace, final_elbo=-12.5)

    def test_moments_and_validity(self):
        s = self.build()
        assert s.mean_R.shape == (6,)
        assert np.all(s.sd_R > 0)
        assert s.sd_gamma > 0
        assert s.valid.all()
        assert s.iterations == 120

    def test_intervals_nested_and_ordered(self):
        s = self.build()
        lo50, hi50 = s.interval(0.5)
        lo90, hi90 = s.interval(0.9)
        assert np.all(lo90 < lo50)
        assert np.all(hi50 < hi90)
        assert np.all(lo50 < s.mean_R)
        assert np.all(s.mean_R < hi50)
        with pytest.raises(ConfigurationError):
            s.interval(1.0)

    def test_quantiles_monotone_and_centred(self):
        s = self.build()
        qs = s.quantiles([0.05, 0.25, 0.5, 0.75, 0.95])
        assert np.all(np.diff(qs, axis=1) > 0)
        np.testing.assert_allclose(qs[:, 2], s.mean_R, rtol=1e-12)

    def test_trace_smoothing(self):
        s = self.build()
        np.testing.assert_allclose(
            s.elbo_trace, trailing_moving_average(s.elbo_trace_raw, 100), rtol=1e-12
        )

    def test_csv_layout(self, tmp_path):
        s = self.build()
        rows = posterior_csv_rows(s)
        assert rows[0] == ["day", "mean_R", "sd_R", "q05", "q25", "q50", "q75", "q95"]
        assert len(rows) == 7
        assert [r[0] for r in rows[1:]] == [str(d) for d in range(1, 7)]
        for row in rows[1:]:
            assert float(row[5]) == pytest.approx(float(row[1]), rel=1e-9)

        path = tmp_path / "posterior.csv"
        write_posterior_csv(s, str(path))
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "day,mean_R,sd_R,q05,q25,q50,q75,q95"
        assert len(lines) == 7

    def test_elbo_csv(self, tmp_path):
        s = self.build()
        path = tmp_path / "elbo.csv"
        write_elbo_csv(s, str(path))
        lines = path.read_text().strip().split("\n")
        assert lines[0] == "iteration,elbo,elbo_smoothed"
        assert len(lines) == 121
        first = lines[1].split(",")
        assert first[0] == "1"
        assert float(first[1]) == pytest.approx(s.elbo_trace_raw[0], rel=1e-9)


class TestCheckpointRoundTrip:
    def test_save_and_load(self, tmp_path):
        prior = PriorConfig(kernel=GpKernelConfig(), importation_mean=0.5)
        state = initial_state(prior, 4)
        from rtinfer.engine import _AdamState

        adam = _AdamState.zeros(state.dim)
        adam.step = 3
        adam.m_mu += 0.5
        path = str(tmp_path / "ck.json")
        save_checkpoint(path, state, adam, 12, [1.0, 2.0, 3.0], SviConfig())
        payload = load_checkpoint(path)
        assert payload["iteration"] == 12
        restored = VariationalState.from_json_dict(payload["state"])
        np.testing.assert_array_equal(restored.mu, state.mu)
        np.testing.assert_array_equal(restored.raw_chol, state.raw_chol)
        restored_adam = _AdamState.from_json_dict(payload["adam"])
        assert restored_adam.step == 3
        np.testing.assert_array_equal(restored_adam.m_mu, adam.m_mu)
        assert payload["elbo_trace_raw"] == [1.0, 2.0, 3.0]

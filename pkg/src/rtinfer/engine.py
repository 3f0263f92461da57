"""Stochastic variational inference for the reproduction-number posterior.

Maximizes an evidence lower bound over a Gaussian variational family on
(R_1..R_T, gamma). The bound is

    prior cross-entropy + E_q[ E_{n ~ M(.|R,gamma)} log p(x | n) ] + entropy

where the inner expectation is itself estimated one sample at a time by
the observation model's latent-variable estimators, so the whole object
is a nested (doubly stochastic) lower bound on log p(x).

Gradients: the prior and entropy terms are exact; the likelihood part is
a score-function estimator through the simulated infection series,
reparameterized through the variational draw (R, gamma) = mu + L xi. Each
batch element contributes

    score_k * (ll_k - mean of the other elements' ll)          (wrt mu)
    score_k xi_k^T * (same centring), lower-triangle masked    (wrt L)

with score_k the gradient of the branching-model log-density at the
simulated series. The leave-one-out centring is a control variate with
zero expectation, so the estimator stays unbiased for every batch size
b >= 2.

Ascent uses Adam with linear learning-rate warmup, run in prior-whitened
coordinates: mu = m0 + W u and L = W B with W = blockdiag(chol(K), 1).
The squared-exponential Gram matrix is near-singular at practical
lengthscales, so the prior terms seen in (mu, L) coordinates have
condition numbers around amplitude^2 / jitter and per-coordinate
optimizers stall or diverge; in (u, B) coordinates the same terms are
identity-conditioned. The chain rule maps the (mu, L) gradient estimates
to (u, B), so this changes the path the optimizer takes, never the
objective or the estimator's unbiasedness.

Batch element k of iteration i draws from an rng stream keyed
(seed, i, k), so results do not depend on thread count and an
interrupted run resumed from a checkpoint reproduces the uninterrupted
one exactly.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import expit, ndtri

from .disease import DiseaseConfig, grad_log_density, simulate
from .distributions import as_generator, trailing_moving_average
from .errors import ConfigurationError, NonFiniteGradientError
from .observation import (
    DEFAULT_LOG_FLOOR,
    ObservationScheme,
    estimate_log_likelihood,
    validate_scheme,
    _check_observations,
)
from .prior import (
    PriorConfig,
    VariationalState,
    entropy,
    grad_prior_terms,
    initial_state,
    prior_cross_entropy,
    sample_q,
    softplus,
    softplus_inv,
)
from .testing import TestProfile

ELBO_SMOOTHING_WINDOW = 100


@dataclass(frozen=True)
class InferenceProblem:
    """Everything the objective needs besides the observations themselves."""

    disease: DiseaseConfig
    scheme: ObservationScheme
    profile: TestProfile
    prior: PriorConfig

    def __post_init__(self):
        validate_scheme(self.scheme, self.disease)


@dataclass(frozen=True)
class SviConfig:
    batch_size: int = 16
    iterations: int = 4000
    learning_rate: float = 0.02
    warmup_iterations: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    elbo_samples: int = 200
    likelihood_floor: float = DEFAULT_LOG_FLOOR
    gradient_clip_norm: float = 100.0  # 0 disables clipping
    checkpoint_every: int = 0  # 0 disables checkpoint writing
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (leave-one-out centring)")
        if self.iterations < 1:
            raise ConfigurationError("iterations must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.warmup_iterations < 1:
            raise ConfigurationError("warmup_iterations must be >= 1")
        if not 0 <= self.adam_beta1 < 1 or not 0 <= self.adam_beta2 < 1:
            raise ConfigurationError("adam betas must lie in [0, 1)")
        if self.elbo_samples < 1:
            raise ConfigurationError("elbo_samples must be >= 1")
        if self.gradient_clip_norm < 0:
            raise ConfigurationError("gradient_clip_norm must be >= 0")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint_every must be >= 0")
        if self.rng_seed < 0:
            raise ConfigurationError("rng_seed must be non-negative")

    def to_json_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "warmup_iterations": self.warmup_iterations,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_epsilon": self.adam_epsilon,
            "elbo_samples": self.elbo_samples,
            "likelihood_floor": self.likelihood_floor,
            "gradient_clip_norm": self.gradient_clip_norm,
            "checkpoint_every": self.checkpoint_every,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SviConfig":
        fields = set(cls().to_json_dict())
        unknown = set(d) - fields
        if unknown:
            raise ConfigurationError(f"unknown svi config keys: {sorted(unknown)}")
        return cls(**d)


def element_streams(seed: int, iteration: int, batch_size: int) -> list[np.random.Generator]:
    """Independent rng streams for one gradient batch, keyed (seed, i, k)."""
    return [
        np.random.default_rng(np.random.SeedSequence(entropy=(seed, iteration, k)))
        for k in range(batch_size)
    ]


@dataclass
class GradientEstimate:
    grad_mu: np.ndarray
    grad_raw: np.ndarray
    loglik_mean: float
    elbo_estimate: float  # cross-entropy + entropy + batch mean log-likelihood


def _batch_element(state, x, problem, floor, rng):
    trajectory, xi = sample_q(state, rng)
    counts = simulate(trajectory, problem.disease, rng)
    ll = estimate_log_likelihood(
        x, counts, problem.scheme, problem.profile, problem.disease, rng, floor
    )
    dR, dgamma = grad_log_density(counts, trajectory, problem.disease)
    return np.append(dR, dgamma), xi, ll


def estimate_gradient(
    state: VariationalState,
    x,
    problem: InferenceProblem,
    batch_size: int,
    rng: int | np.random.Generator | None = None,
    *,
    floor: float | None = DEFAULT_LOG_FLOOR,
    rng_streams: list[np.random.Generator] | None = None,
    executor: ThreadPoolExecutor | None = None,
) -> GradientEstimate:
    """One unbiased gradient estimate of the objective at `state`.

    Either pass a single rng (elements drawn from it sequentially) or
    explicit per-element rng_streams; an executor needs the latter so the
    draw each element sees is independent of scheduling.
    """
    if batch_size < 2:
        raise ConfigurationError("batch_size must be >= 2")
    xv = _check_observations(x, problem.disease)
    if rng_streams is None:
        base = as_generator(rng if rng is not None else 0)
        if executor is not None:
            raise ConfigurationError("threaded estimation needs explicit rng_streams")
        rng_streams = [base] * batch_size
    elif len(rng_streams) != batch_size:
        raise ConfigurationError("rng_streams must have one entry per batch element")

    if executor is None:
        results = [
            _batch_element(state, xv, problem, floor, rng_streams[k])
            for k in range(batch_size)
        ]
    else:
        results = list(
            executor.map(
                lambda k: _batch_element(state, xv, problem, floor, rng_streams[k]),
                range(batch_size),
            )
        )

    scores = np.stack([r[0] for r in results])
    xis = np.stack([r[1] for r in results])
    lls = np.asarray([r[2] for r in results])

    # leave-one-out centring: element k is scored against the other b-1;
    # a floorless -inf payoff turns nan here and trips fit's finite check
    with np.errstate(invalid="ignore"):
        loo_mean = (lls.sum() - lls) / (batch_size - 1)
        centred = lls - loo_mean
        grad_mu = scores.T @ centred / batch_size
        grad_L = (scores * centred[:, None]).T @ xis / batch_size

    grad_raw = np.tril(grad_L)
    diag = np.diag_indices(state.dim)
    grad_raw[diag] *= expit(np.diag(state.raw_chol))

    pmu, praw = grad_prior_terms(state, problem.prior)
    grad_mu = grad_mu + pmu
    grad_raw = grad_raw + praw

    ce = prior_cross_entropy(state, problem.prior)
    ent = entropy(state)
    ll_mean = float(lls.mean())
    return GradientEstimate(
        grad_mu=grad_mu,
        grad_raw=grad_raw,
        loglik_mean=ll_mean,
        elbo_estimate=ce + ent + ll_mean,
    )


def estimate_elbo(
    state: VariationalState,
    x,
    problem: InferenceProblem,
    num_samples: int,
    rng: int | np.random.Generator,
    floor: float | None = DEFAULT_LOG_FLOOR,
) -> float:
    """Monte Carlo estimate of the bound: exact prior terms, sampled likelihood."""
    xv = _check_observations(x, problem.disease)
    rng = as_generator(rng)
    total = 0.0
    for _ in range(num_samples):
        trajectory, _ = sample_q(state, rng)
        counts = simulate(trajectory, problem.disease, rng)
        total += estimate_log_likelihood(
            xv, counts, problem.scheme, problem.profile, problem.disease, rng, floor
        )
    return prior_cross_entropy(state, problem.prior) + entropy(state) + total / num_samples


@dataclass
class PosteriorSummary:
    """Marginal posterior summaries plus the fitted state and ELBO trace."""

    mean_R: np.ndarray
    sd_R: np.ndarray
    mean_gamma: float
    sd_gamma: float
    elbo_trace: np.ndarray  # trailing moving average, one entry per iteration
    elbo_trace_raw: np.ndarray
    final_elbo: float
    iterations: int
    state: VariationalState

    @property
    def valid(self) -> np.ndarray:
        """Days with an estimate; the variational posterior covers them all."""
        return np.ones(self.mean_R.size, dtype=bool)

    def interval(self, level: float) -> tuple[np.ndarray, np.ndarray]:
        """Central credible interval for each day's R (normal marginals)."""
        if not 0.0 < level < 1.0:
            raise ConfigurationError("interval level must lie in (0, 1)")
        z = float(ndtri(0.5 + level / 2.0))
        return self.mean_R - z * self.sd_R, self.mean_R + z * self.sd_R

    def quantiles(self, qs) -> np.ndarray:
        z = ndtri(np.asarray(qs, dtype=float))
        return self.mean_R[:, None] + z[None, :] * self.sd_R[:, None]


def summarize(state: VariationalState, trace_raw, final_elbo: float) -> PosteriorSummary:
    sd = np.sqrt(np.diag(state.covariance()))
    trace_raw = np.asarray(trace_raw, dtype=float)
    smoothed = (
        trailing_moving_average(trace_raw, ELBO_SMOOTHING_WINDOW)
        if trace_raw.size
        else trace_raw
    )
    return PosteriorSummary(
        mean_R=state.mu[:-1].copy(),
        sd_R=sd[:-1],
        mean_gamma=float(state.mu[-1]),
        sd_gamma=float(sd[-1]),
        elbo_trace=smoothed,
        elbo_trace_raw=trace_raw,
        final_elbo=final_elbo,
        iterations=trace_raw.size,
        state=state,
    )


@dataclass
class _AdamState:
    m_mu: np.ndarray
    v_mu: np.ndarray
    m_raw: np.ndarray
    v_raw: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, dim: int) -> "_AdamState":
        return cls(
            m_mu=np.zeros(dim),
            v_mu=np.zeros(dim),
            m_raw=np.zeros((dim, dim)),
            v_raw=np.zeros((dim, dim)),
        )

    def update(self, grad, moments, cfg: SviConfig, lr: float):
        m, v = moments
        m *= cfg.adam_beta1
        m += (1.0 - cfg.adam_beta1) * grad
        v *= cfg.adam_beta2
        v += (1.0 - cfg.adam_beta2) * grad**2
        mhat = m / (1.0 - cfg.adam_beta1**self.step)
        vhat = v / (1.0 - cfg.adam_beta2**self.step)
        return lr * mhat / (np.sqrt(vhat) + cfg.adam_epsilon)

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "m_mu": self.m_mu.tolist(),
            "v_mu": self.v_mu.tolist(),
            "m_raw": self.m_raw.tolist(),
            "v_raw": self.v_raw.tolist(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "_AdamState":
        return cls(
            m_mu=np.asarray(d["m_mu"], dtype=float),
            v_mu=np.asarray(d["v_mu"], dtype=float),
            m_raw=np.asarray(d["m_raw"], dtype=float),
            v_raw=np.asarray(d["v_raw"], dtype=float),
            step=int(d["step"]),
        )


def save_checkpoint(
    path: str, state, adam, iteration: int, trace_raw, config: SviConfig, whitened=None
):
    payload = {
        "iteration": iteration,
        "state": state.to_json_dict(),
        "adam": adam.to_json_dict(),
        "elbo_trace_raw": list(map(float, trace_raw)),
        "svi": config.to_json_dict(),
    }
    if whitened is not None:
        u, raw_b = whitened
        payload["whitened"] = {
            "u": [float(v) for v in u],
            "raw_b": [[float(v) for v in row] for row in raw_b],
        }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(payload, f)
    os.replace(tmp, path)


def load_checkpoint(path: str) -> dict:
    with open(path) as f:
        payload = json.load(f)
    for key in ("iteration", "state", "adam", "elbo_trace_raw"):
        if key not in payload:
            raise ConfigurationError(f"checkpoint is missing {key!r}")
    return payload


def _whitener(prior: PriorConfig, horizon: int):
    """Lower-triangular W = blockdiag(chol(K), 1) and the prior mean m0."""
    K = prior.kernel.gram(horizon)
    try:
        L_K = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise ConfigurationError(
            "kernel Gram matrix is not positive definite; increase jitter"
        ) from None
    D = horizon + 1
    W = np.zeros((D, D))
    W[:horizon, :horizon] = L_K
    W[-1, -1] = 1.0
    m0 = np.ones(D)
    m0[-1] = prior.importation_mean
    return W, m0


def _natural_from_whitened(u, raw_b, W, m0) -> VariationalState:
    D = u.size
    diag = np.diag_indices(D)
    B = np.tril(raw_b, k=-1)
    B[diag] = softplus(np.diag(raw_b))
    L = W @ B
    raw = np.tril(L, k=-1)
    raw[diag] = softplus_inv(L[diag])
    return VariationalState(mu=m0 + W @ u, raw_chol=raw)


def _whitened_from_natural(state: VariationalState, W, m0):
    u = solve_triangular(W, state.mu - m0, lower=True)
    B = solve_triangular(W, state.chol(), lower=True)
    diag = np.diag_indices(state.dim)
    raw_b = np.tril(B, k=-1)
    raw_b[diag] = softplus_inv(np.maximum(B[diag], 1e-300))
    return u, raw_b


def _whitened_gradients(est: GradientEstimate, state: VariationalState, raw_b, W):
    """Chain-rule the (mu, raw L) estimate into (u, raw B) coordinates."""
    diag = np.diag_indices(state.dim)
    g_L = est.grad_raw.copy()
    g_L[diag] /= expit(state.raw_chol[diag])  # undo the natural softplus chain
    g_u = W.T @ est.grad_mu
    g_raw_b = np.tril(W.T @ g_L)
    g_raw_b[diag] *= expit(raw_b[diag])
    return g_u, g_raw_b


def fit(
    x,
    problem: InferenceProblem,
    config: SviConfig = SviConfig(),
    *,
    threads: int = 1,
    checkpoint_path: str | None = None,
    resume_from: str | dict | None = None,
) -> PosteriorSummary:
    """Run the full SVI loop and summarize the fitted posterior.

    threads caps the worker pool for batch elements; results are
    identical for every thread count. checkpoint_path enables periodic
    checkpoint writes (config.checkpoint_every); resume_from continues an
    interrupted run and reproduces the uninterrupted trajectory exactly.
    """
    xv = _check_observations(x, problem.disease)
    T = problem.disease.horizon
    W, m0 = _whitener(problem.prior, T)

    if resume_from is not None:
        payload = load_checkpoint(resume_from) if isinstance(resume_from, str) else resume_from
        state = VariationalState.from_json_dict(payload["state"])
        if state.horizon != T:
            raise ConfigurationError("checkpoint horizon does not match the problem")
        if "whitened" in payload:
            u = np.asarray(payload["whitened"]["u"], dtype=float)
            raw_b = np.asarray(payload["whitened"]["raw_b"], dtype=float)
        else:
            u, raw_b = _whitened_from_natural(state, W, m0)
        adam = _AdamState.from_json_dict(payload["adam"])
        start = int(payload["iteration"])
        trace_raw = [float(v) for v in payload["elbo_trace_raw"]]
    else:
        u, raw_b = _whitened_from_natural(initial_state(problem.prior, T), W, m0)
        state = _natural_from_whitened(u, raw_b, W, m0)
        adam = _AdamState.zeros(state.dim)
        start = 0
        trace_raw = []

    executor = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for i in range(start, config.iterations):
            state = _natural_from_whitened(u, raw_b, W, m0)
            streams = element_streams(config.rng_seed, i, config.batch_size)
            est = estimate_gradient(
                state,
                xv,
                problem,
                config.batch_size,
                floor=config.likelihood_floor,
                rng_streams=streams,
                executor=executor,
            )
            if not (
                np.all(np.isfinite(est.grad_mu)) and np.all(np.isfinite(est.grad_raw))
            ):
                raise NonFiniteGradientError(
                    f"non-finite gradient at iteration {i}",
                    diagnostics={
                        "iteration": i,
                        "state": state.to_json_dict(),
                        "loglik_mean": est.loglik_mean,
                        "grad_mu": est.grad_mu.tolist(),
                    },
                )
            g_u, g_raw_b = _whitened_gradients(est, state, raw_b, W)
            if config.gradient_clip_norm > 0:
                # the payoff-times-score products are heavy tailed; a single
                # spike would otherwise steer Adam's momentum for dozens of
                # iterations, so cap the step input's global norm
                norm = float(np.sqrt(np.sum(g_u**2) + np.sum(g_raw_b**2)))
                if norm > config.gradient_clip_norm:
                    scale = config.gradient_clip_norm / norm
                    g_u = g_u * scale
                    g_raw_b = g_raw_b * scale
            lr = config.learning_rate * min(1.0, (i + 1) / config.warmup_iterations)
            adam.step += 1
            u = u + adam.update(g_u, (adam.m_mu, adam.v_mu), config, lr)
            raw_b = raw_b + adam.update(g_raw_b, (adam.m_raw, adam.v_raw), config, lr)
            trace_raw.append(est.elbo_estimate)
            if (
                checkpoint_path is not None
                and config.checkpoint_every > 0
                and (i + 1) % config.checkpoint_every == 0
            ):
                save_checkpoint(
                    checkpoint_path,
                    _natural_from_whitened(u, raw_b, W, m0),
                    adam,
                    i + 1,
                    trace_raw,
                    config,
                    whitened=(u, raw_b),
                )
    finally:
        if executor is not None:
            executor.shutdown()

    state = _natural_from_whitened(u, raw_b, W, m0)
    if checkpoint_path is not None:
        save_checkpoint(
            checkpoint_path, state, adam, config.iterations, trace_raw, config, whitened=(u, raw_b)
        )

    final_rng = np.random.default_rng(
        np.random.SeedSequence(entropy=(config.rng_seed, config.iterations + 1))
    )
    final_elbo = estimate_elbo(
        state, xv, problem, config.elbo_samples, final_rng, config.likelihood_floor
    )
    return summarize(state, trace_raw, final_elbo)


_CSV_QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)


def posterior_csv_rows(summary) -> list[list[str]]:
    """Shared posterior CSV layout: day, mean, sd and five quantiles."""
    header = ["day", "mean_R", "sd_R", "q05", "q25", "q50", "q75", "q95"]
    rows = [header]
    qs = summary.quantiles(_CSV_QUANTILES)
    for t in range(summary.mean_R.size):
        if not summary.valid[t]:
            continue
        rows.append(
            [str(t + 1)]
            + [
                format(v, ".10g")
                for v in (summary.mean_R[t], summary.sd_R[t], *qs[t])
            ]
        )
    return rows


def write_posterior_csv(summary, path: str) -> None:
    with open(path, "w", newline="") as f:
        for row in posterior_csv_rows(summary):
            f.write(",".join(row) + "\n")


def write_elbo_csv(summary: PosteriorSummary, path: str) -> None:
    with open(path, "w", newline="") as f:
        f.write("iteration,elbo,elbo_smoothed\n")
        for i, (raw, smooth) in enumerate(zip(summary.elbo_trace_raw, summary.elbo_trace)):
            f.write(f"{i + 1},{format(raw, '.10g')},{format(smooth, '.10g')}\n")

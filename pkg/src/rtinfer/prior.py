"""Gaussian-process prior and the Gaussian variational family.

The latent vector is (R_1..R_T, gamma). The prior factorizes as a GP over
R, N(1, K) with a squared-exponential Gram matrix K, times an exponential
prior with mean gamma_bar on the importation rate. The variational family
is a joint Gaussian N(mu, L L^T) with L lower-triangular; the diagonal of
L goes through a softplus so the underlying parameter matrix is fully
unconstrained.

The exponential prior's log-density -gamma/gamma_bar - log(gamma_bar) is
extended linearly to gamma < 0, so its expectation under the Gaussian is
available in closed form (-mu_gamma/gamma_bar - log gamma_bar); negative
gamma samples are clamped downstream by the disease model, not here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import expit

from .disease import RtTrajectory
from .distributions import as_generator
from .errors import ConfigurationError


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    """Inverse of softplus; y must be positive."""
    y = np.asarray(y, dtype=float)
    with np.errstate(over="ignore"):
        out = np.where(y > 30.0, y, np.log(np.expm1(np.minimum(y, 30.0))))
    return out


@dataclass(frozen=True)
class GpKernelConfig:
    """Squared-exponential kernel over days, plus diagonal jitter."""

    lengthscale: float = 10.0
    amplitude: float = 0.3
    jitter: float = 1e-6

    def __post_init__(self):
        if self.lengthscale <= 0 or self.amplitude <= 0 or self.jitter < 0:
            raise ConfigurationError("kernel needs lengthscale > 0, amplitude > 0, jitter >= 0")

    def gram(self, horizon: int) -> np.ndarray:
        """K[i, j] = amplitude^2 exp(-(i-j)^2 / (2 lengthscale^2)) + jitter I."""
        return _gram(float(self.lengthscale), float(self.amplitude), float(self.jitter), horizon)


@lru_cache(maxsize=32)
def _gram(lengthscale: float, amplitude: float, jitter: float, horizon: int) -> np.ndarray:
    t = np.arange(horizon, dtype=float)
    sq = (t[:, None] - t[None, :]) ** 2
    K = amplitude**2 * np.exp(-sq / (2.0 * lengthscale**2))
    K[np.diag_indices(horizon)] += jitter
    K.setflags(write=False)
    return K


@dataclass(frozen=True)
class PriorConfig:
    kernel: GpKernelConfig
    importation_mean: float = 0.5  # gamma_bar

    def __post_init__(self):
        if self.importation_mean <= 0:
            raise ConfigurationError("importation_mean must be positive")

    def to_json_dict(self) -> dict:
        return {
            "lengthscale": float(self.kernel.lengthscale),
            "amplitude": float(self.kernel.amplitude),
            "jitter": float(self.kernel.jitter),
            "importation_mean": float(self.importation_mean),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "PriorConfig":
        known = {"lengthscale", "amplitude", "jitter", "importation_mean"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown prior config keys: {sorted(unknown)}")
        return cls(
            kernel=GpKernelConfig(
                lengthscale=float(d.get("lengthscale", 10.0)),
                amplitude=float(d.get("amplitude", 0.3)),
                jitter=float(d.get("jitter", 1e-6)),
            ),
            importation_mean=float(d.get("importation_mean", 0.5)),
        )


@dataclass
class VariationalState:
    """Mean vector and unconstrained Cholesky parameters, dimension T+1.

    mu[:T] are the R means, mu[T] the gamma mean. raw_chol is lower
    triangular; its diagonal maps through softplus to the Cholesky
    diagonal, off-diagonal entries pass straight through.
    """

    mu: np.ndarray
    raw_chol: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        raw = np.asarray(self.raw_chol, dtype=float)
        if mu.ndim != 1 or mu.size < 2:
            raise ConfigurationError("mu must be a vector of length horizon + 1 >= 2")
        if raw.shape != (mu.size, mu.size):
            raise ConfigurationError("raw_chol must be square with mu's dimension")
        self.mu = mu
        self.raw_chol = np.tril(raw)

    @property
    def dim(self) -> int:
        return self.mu.size

    @property
    def horizon(self) -> int:
        return self.mu.size - 1

    def chol(self) -> np.ndarray:
        L = np.tril(self.raw_chol, k=-1)
        L[np.diag_indices(self.dim)] = softplus(np.diag(self.raw_chol))
        return L

    def covariance(self) -> np.ndarray:
        L = self.chol()
        return L @ L.T

    def to_json_dict(self) -> dict:
        return {
            "mu": [float(v) for v in self.mu],
            "raw_chol": [[float(v) for v in row] for row in self.raw_chol],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "VariationalState":
        return cls(
            mu=np.asarray(d["mu"], dtype=float),
            raw_chol=np.asarray(d["raw_chol"], dtype=float),
        )


def initial_state(prior: PriorConfig, horizon: int) -> VariationalState:
    """Start at the prior mean with a quarter of the prior covariance.

    mu = (1, ..., 1, gamma_bar); Sigma = 0.25 * blockdiag(K, gamma_bar^2),
    whose Cholesky factor is halved blockdiag(chol(K), gamma_bar).
    """
    K = prior.kernel.gram(horizon)
    try:
        L_K = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        raise ConfigurationError(
            "kernel Gram matrix is not positive definite; increase jitter"
        ) from None
    D = horizon + 1
    mu = np.ones(D)
    mu[-1] = prior.importation_mean
    L = np.zeros((D, D))
    L[:horizon, :horizon] = 0.5 * L_K
    L[-1, -1] = 0.5 * prior.importation_mean
    raw = np.tril(L, k=-1)
    raw[np.diag_indices(D)] = softplus_inv(np.diag(L))
    return VariationalState(mu=mu, raw_chol=raw)


def sample_q(state: VariationalState, rng: int | np.random.Generator):
    """Draw (trajectory, xi) with trajectory = mu + L xi, xi standard normal."""
    rng = as_generator(rng)
    xi = rng.standard_normal(state.dim)
    v = state.mu + state.chol() @ xi
    return RtTrajectory(R=v[:-1], gamma=float(v[-1])), xi


def _solve_gram(prior: PriorConfig, horizon: int):
    K = prior.kernel.gram(horizon)
    try:
        return cho_factor(np.asarray(K), lower=True)
    except LinAlgError:
        raise ConfigurationError(
            "kernel Gram matrix is not positive definite; increase jitter"
        ) from None


def prior_cross_entropy(state: VariationalState, prior: PriorConfig) -> float:
    """E_q[log p(R, gamma)] in closed form.

    Gaussian block: -T/2 log 2pi - 1/2 log|K|
    - 1/2 [(mu_R - 1)^T K^{-1} (mu_R - 1) + tr(K^{-1} Sigma_RR)].
    Exponential block (linearly extended): -mu_gamma/gamma_bar - log gamma_bar.
    """
    T = state.horizon
    cf = _solve_gram(prior, T)
    m = state.mu[:T] - 1.0
    L = state.chol()
    Sigma_RR = L[:T, :] @ L[:T, :].T
    quad = float(m @ cho_solve(cf, m))
    trace = float(np.trace(cho_solve(cf, Sigma_RR)))
    logdet_K = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    gauss = -0.5 * (T * np.log(2.0 * np.pi) + logdet_K + quad + trace)
    expo = -state.mu[-1] / prior.importation_mean - np.log(prior.importation_mean)
    return float(gauss + expo)


def entropy(state: VariationalState) -> float:
    """Entropy of N(mu, L L^T): D/2 (1 + log 2pi) + sum log L_ii."""
    L_diag = softplus(np.diag(state.raw_chol))
    return float(0.5 * state.dim * (1.0 + np.log(2.0 * np.pi)) + np.sum(np.log(L_diag)))


def grad_prior_terms(state: VariationalState, prior: PriorConfig):
    """Gradient of prior_cross_entropy + entropy wrt (mu, raw_chol).

    Closed form: no sampling, so these terms add no variance to the
    objective's gradient estimate.
    """
    T = state.horizon
    D = state.dim
    cf = _solve_gram(prior, T)
    m = state.mu[:T] - 1.0

    grad_mu = np.empty(D)
    grad_mu[:T] = -cho_solve(cf, m)
    grad_mu[-1] = -1.0 / prior.importation_mean

    L = state.chol()
    grad_L = np.zeros((D, D))
    grad_L[:T, :] = -cho_solve(cf, L[:T, :])  # from -1/2 tr(K^{-1} L_R L_R^T)
    diag = np.diag_indices(D)
    grad_L[diag] += 1.0 / L[diag]  # entropy

    grad_raw = np.tril(grad_L)
    grad_raw[diag] *= expit(np.diag(state.raw_chol))  # softplus chain rule
    return grad_mu, grad_raw


def gaussian_block_kl(state: VariationalState, prior: PriorConfig) -> float:
    """KL divergence of the R block against the GP prior N(1, K).

    Always non-negative; the full objective's -(cross-entropy + entropy)
    is not a KL because of the linearly extended exponential block, so
    this is the quantity worth sanity-checking.
    """
    T = state.horizon
    cf = _solve_gram(prior, T)
    m = state.mu[:T] - 1.0
    L = state.chol()
    Sigma_RR = L[:T, :] @ L[:T, :].T
    quad = float(m @ cho_solve(cf, m))
    trace = float(np.trace(cho_solve(cf, Sigma_RR)))
    logdet_K = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    sign, logdet_S = np.linalg.slogdet(Sigma_RR)
    if sign <= 0:
        raise ConfigurationError("variational covariance block is not positive definite")
    return 0.5 * (trace + quad - T + logdet_K - logdet_S)

"""Likelihood and prior for the stratified binomial logistic model.

Counts follow y[j,s] ~ Binomial(n_s, expit(alpha_j.x_s + beta_j v_s)) with
v_s the vaccine indicator. The log reporting-odds-ratio beta_j carries either
a truncated stick-breaking mixture prior

    beta_j | z_j=k ~ Normal(mu_k, 1/tau_k),  P(z_j=k) = pi_k(v),
    v_k ~ Beta(a0, b0),  mu_k ~ Normal(mu_base, u^2),  tau_k ~ Gamma(r_tau, lam),
    mu_base ~ Normal(0, 1/tau0),  u ~ Uniform(0, f0),  lam ~ Gamma(r_lambda, lambda0),

or an independent Normal(0, 1/il_precision) prior. Gamma is shape-rate
throughout. Regression coefficients are alpha_j ~ Normal(0, 1/tau_alpha)
independently per entry.

All precision parameters are precisions, not variances; tau_base = 1/u^2.
"""
from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln, log_expit, logit

LOG_2PI = math.log(2.0 * math.pi)


class PriorMode(enum.Enum):
    DPM = "dpm"
    IL = "il"


@dataclass(frozen=True)
class Hyperparams:
    k: int = 5
    tau_alpha: float = 0.01
    tau0: float = 0.01
    f0: float = 3.0
    a0: float = 1.0
    b0: float = 1.0
    r_tau: float = 3.0
    r_lambda: float = 0.03
    lambda0: float = 0.03
    prior_mode: PriorMode = PriorMode.DPM
    il_precision: float = 0.1   # 0.1 informative, 0.01 vague

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        for name in ("tau_alpha", "tau0", "f0", "a0", "b0", "r_tau",
                     "r_lambda", "lambda0", "il_precision"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def replace(self, **kw) -> "Hyperparams":
        return dataclasses.replace(self, **kw)


@dataclass
class ModelState:
    """One point in parameter space. Component labels ``z`` are 0-based."""

    alpha: np.ndarray        # (J, P)
    beta: np.ndarray         # (J,)
    z: np.ndarray            # (J,) int, in 0..K-1
    v: np.ndarray            # (K-1,) stick fractions
    pi: np.ndarray           # (K,) mixture weights
    mu: np.ndarray           # (K,) component means
    tau: np.ndarray          # (K,) component precisions
    mu_base: float
    u: float                 # component-mean prior sd, in (0, f0)
    lam: float               # rate of the tau_k prior

    @property
    def tau_base(self) -> float:
        return 1.0 / (self.u * self.u)

    def copy(self) -> "ModelState":
        return ModelState(self.alpha.copy(), self.beta.copy(), self.z.copy(),
                          self.v.copy(), self.pi.copy(), self.mu.copy(),
                          self.tau.copy(), self.mu_base, self.u, self.lam)

    def validate(self, hyper: Hyperparams):
        k = hyper.k
        if self.mu.shape != (k,) or self.tau.shape != (k,) \
                or self.pi.shape != (k,) or self.v.shape != (max(k - 1, 0),):
            raise ValueError("mixture block shapes disagree with k")
        if self.alpha.shape[0] != self.beta.shape[0] \
                or self.z.shape != self.beta.shape:
            raise ValueError("per-AE block shapes disagree")
        if np.any((self.z < 0) | (self.z >= k)):
            raise ValueError("labels out of range")
        if abs(self.pi.sum() - 1.0) > 1e-12 \
                or np.max(np.abs(self.pi - stick_to_simplex(self.v))) > 1e-12:
            raise ValueError("pi inconsistent with stick fractions")
        if np.any(self.tau <= 0):
            raise ValueError("component precisions must be positive")
        if not (0.0 < self.u < hyper.f0):
            raise ValueError("u outside (0, f0)")


def stick_to_simplex(v: np.ndarray) -> np.ndarray:
    """Weights pi_k = v_k prod_{h<k}(1-v_h), last stick implicit."""
    v = np.asarray(v, dtype=float)
    k = v.shape[0] + 1
    pi = np.empty(k)
    remain = np.concatenate(([1.0], np.cumprod(1.0 - v)))
    pi[:-1] = v * remain[:-1]
    pi[-1] = remain[-1]
    return pi


def simplex_to_stick(pi: np.ndarray) -> np.ndarray:
    """Left inverse of :func:`stick_to_simplex` for interior points."""
    pi = np.asarray(pi, dtype=float)
    remain = 1.0 - np.concatenate(([0.0], np.cumsum(pi[:-2])))
    return pi[:-1] / remain


# ---------------------------------------------------------------------------
# Likelihood

def linear_predictor(alpha, beta, table) -> np.ndarray:
    """(J, S) array of alpha_j.x_s + beta_j v_s."""
    eta = np.outer(beta, table.vaccine_indicator)
    if alpha.shape[1]:
        eta = eta + alpha @ table.design_matrix.T
    return eta


def loglik_cells(eta, table) -> np.ndarray:
    """Per-cell binomial log pmf, stable for |eta| in the hundreds."""
    y = table.counts
    n = table.exposures[None, :]
    return (y * log_expit(eta) + (n - y) * log_expit(-eta)
            + table.log_binom_coeff)


def per_ae_log_likelihood(alpha, beta, table) -> np.ndarray:
    return loglik_cells(linear_predictor(alpha, beta, table), table).sum(axis=1)


def log_likelihood(state: ModelState, table) -> float:
    return float(per_ae_log_likelihood(state.alpha, state.beta, table).sum())


def deviance(state: ModelState, table) -> float:
    return -2.0 * log_likelihood(state, table)


# ---------------------------------------------------------------------------
# Prior

def _norm_logpdf(x, mean, prec):
    return 0.5 * (np.log(prec) - LOG_2PI) - 0.5 * prec * (x - mean) ** 2


def _gamma_logpdf(x, shape, rate):
    # shape-rate parameterization
    return shape * np.log(rate) - gammaln(shape) \
        + (shape - 1.0) * np.log(x) - rate * x


def log_prior(state: ModelState, hyper: Hyperparams) -> float:
    """Joint log prior density at ``state``; -inf outside the support."""
    lp = float(np.sum(_norm_logpdf(state.alpha, 0.0, hyper.tau_alpha)))
    if hyper.prior_mode is PriorMode.IL:
        lp += float(np.sum(_norm_logpdf(state.beta, 0.0, hyper.il_precision)))
        return lp
    if not (0.0 < state.u < hyper.f0):
        return -np.inf
    if np.any(state.tau <= 0) or state.lam <= 0 \
            or np.any((state.v <= 0) | (state.v >= 1)):
        return -np.inf
    lp += float(np.sum(_norm_logpdf(state.beta, state.mu[state.z],
                                    state.tau[state.z])))
    with np.errstate(divide="ignore"):
        logpi = np.log(state.pi)
    lp += float(logpi[state.z].sum())
    # sticks: Beta(a0, b0) density per fraction
    lp += float(np.sum((hyper.a0 - 1) * np.log(state.v)
                       + (hyper.b0 - 1) * np.log1p(-state.v)
                       - betaln(hyper.a0, hyper.b0)))
    lp += float(np.sum(_norm_logpdf(state.mu, state.mu_base, state.tau_base)))
    lp += float(np.sum(_gamma_logpdf(state.tau, hyper.r_tau, state.lam)))
    lp += _norm_logpdf(state.mu_base, 0.0, hyper.tau0)
    lp += -math.log(hyper.f0)   # u ~ Uniform(0, f0)
    lp += float(_gamma_logpdf(state.lam, hyper.r_lambda, hyper.lambda0))
    return lp


@dataclass(frozen=True)
class LogDensity:
    log_likelihood: float
    log_prior: float

    @property
    def deviance(self) -> float:
        return -2.0 * self.log_likelihood

    @property
    def log_posterior(self) -> float:
        return self.log_likelihood + self.log_prior


def evaluate(state: ModelState, table, hyper: Hyperparams) -> LogDensity:
    return LogDensity(log_likelihood(state, table), log_prior(state, hyper))


# ---------------------------------------------------------------------------
# Initial state

def init_state(table, hyper: Hyperparams, rng=None) -> ModelState:
    """Deterministic starting point: pooled empirical-logit intercepts,
    zero effects, uniform labels over a fixed mean grid."""
    j, p = table.n_aes, table.n_covariates
    k = hyper.k
    alpha = np.zeros((j, p))
    if p:
        tot = table.exposures.sum()
        pooled = (table.counts.sum(axis=1) + 0.5) / (tot + 1.0)
        alpha[:, 0] = logit(pooled)
    beta = np.zeros(j)
    z = np.arange(j) % k
    v = np.full(max(k - 1, 0), 0.5)
    pi = stick_to_simplex(v)
    mu = np.linspace(-3.0, 3.0, k) if k > 1 else np.zeros(1)
    tau = np.ones(k)
    return ModelState(alpha, beta, z, v, pi, mu, tau,
                      mu_base=0.0, u=hyper.f0 / 2.0,
                      lam=hyper.r_lambda / hyper.lambda0)

"""Convergence and fit diagnostics: R_c, DIC, and recovery metrics.

The potential scale reduction factor follows the corrected, degrees-of-
freedom-adjusted form of Brooks & Gelman (1998): with m chains of length n,
within-chain variance W and between-chain variance B,

    V = (n-1)W/n + (1 + 1/m)B/n,
    R_c = sqrt((d+3)/(d+1) * V/W),   d = 2 V^2 / Var(V),

where Var(V) uses the method-of-moments estimate over chains. Values are
floored at 1.0; degenerate chains (W = 0) give 1.0 when B = 0 and +inf
otherwise.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .model import linear_predictor, loglik_cells

log = logging.getLogger(__name__)


def _chain_cov(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # covariance across the chain axis (axis 0), ddof 1
    m = a.shape[0]
    return ((a - a.mean(0)) * (b - b.mean(0))).sum(0) / (m - 1)


def gelman_rubin(chains: np.ndarray) -> np.ndarray | float:
    """Corrected PSRF per parameter.

    ``chains`` is (m, n) for one parameter or (m, n, J) for J parameters;
    the return is a float or a length-J array accordingly.
    """
    x = np.asarray(chains, dtype=float)
    scalar = x.ndim == 2
    if scalar:
        x = x[:, :, None]
    m, n, _ = x.shape
    if m < 2:
        raise ValueError("need at least two chains")
    if n < 2:
        raise ValueError("need at least two draws per chain")
    s2 = x.var(axis=1, ddof=1)               # (m, J)
    xbar = x.mean(axis=1)                    # (m, J)
    w = s2.mean(axis=0)
    b = n * xbar.var(axis=0, ddof=1)
    v = (n - 1) / n * w + (1 + 1 / m) * b / n
    var_w = s2.var(axis=0, ddof=1) / m
    var_b = 2.0 * b ** 2 / (m - 1)
    mu_hat = xbar.mean(axis=0)
    cov_wb = n / m * (_chain_cov(s2, xbar ** 2)
                      - 2.0 * mu_hat * _chain_cov(s2, xbar))
    var_v = ((n - 1) ** 2 * var_w + (1 + 1 / m) ** 2 * var_b
             + 2.0 * (n - 1) * (1 + 1 / m) * cov_wb) / n ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        d = 2.0 * v ** 2 / var_v
        adj = np.where(var_v > 0, (d + 3.0) / (d + 1.0), 1.0)
        ratio = np.where(w > 0, v / w, np.where(b > 0, np.inf, 1.0))
        rc = np.sqrt(adj * ratio)
    rc = np.maximum(rc, 1.0)                 # floored at exact equality
    return float(rc[0]) if scalar else rc


@dataclass(frozen=True)
class DicResult:
    dic: float
    pd: float                                # effective parameter count

    @property
    def mean_deviance(self) -> float:
        return self.dic - self.pd


def dic(deviance_draws: np.ndarray, plug_in_deviance: float) -> DicResult:
    """DIC = mean deviance + pD with pD = mean deviance - plug-in deviance."""
    dbar = float(np.mean(deviance_draws))
    p_d = dbar - float(plug_in_deviance)
    if p_d < 0:
        log.warning("negative effective parameter count pD=%.3f", p_d)
    return DicResult(dbar + p_d, p_d)


def plug_in_deviance(alpha_hat: np.ndarray, beta_hat: np.ndarray,
                     table) -> float:
    """Deviance at the pooled posterior-mean regression coefficients."""
    eta = linear_predictor(alpha_hat, beta_hat, table)
    return -2.0 * float(loglik_cells(eta, table).sum())


def mse(estimate: np.ndarray, truth: np.ndarray) -> float:
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    return float(np.mean((estimate - truth) ** 2))


def coverage(lo: np.ndarray, hi: np.ndarray, truth: np.ndarray) -> float:
    """Fraction of closed intervals [lo, hi] containing the truth."""
    truth = np.asarray(truth, dtype=float)
    return float(np.mean((truth >= np.asarray(lo)) & (truth <= np.asarray(hi))))


def rc_summary(rc: np.ndarray, threshold: float = 1.2) -> dict:
    rc = np.asarray(rc, dtype=float)
    return {
        "max": float(np.max(rc)),
        "p99": float(np.quantile(rc, 0.99)),
        "frac_below_1.2": float(np.mean(rc < threshold)),
    }


@dataclass
class DiagnosticsReport:
    dic: float
    pd: float
    rc: np.ndarray | None                    # per-AE R_c of beta
    rc_threshold: float = 1.2
    mse: float | None = None
    coverage: float | None = None

    def to_dict(self) -> dict:
        out = {"dic": self.dic, "pd": self.pd}
        if self.rc is not None:
            out["rc_summary"] = rc_summary(self.rc, self.rc_threshold)
        if self.mse is not None:
            out["mse"] = self.mse
        if self.coverage is not None:
            out["coverage"] = self.coverage
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compute_diagnostics(draws, table, truth: np.ndarray | None = None,
                        level: float = 0.95,
                        rc_threshold: float = 1.2) -> DiagnosticsReport:
    """DIC, per-AE R_c (multi-chain fits), and truth-recovery metrics."""
    plug = plug_in_deviance(draws.alpha_posterior_mean(),
                            draws.beta_posterior_mean(), table)
    res = dic(draws.pooled_deviance(), plug)
    rc = gelman_rubin(draws.beta) if draws.n_chains >= 2 else None
    m = cov = None
    if truth is not None:
        pooled = draws.pooled_beta()
        m = mse(pooled.mean(axis=0), truth)
        tail = (1.0 - level) / 2.0
        lo = np.quantile(pooled, tail, axis=0)
        hi = np.quantile(pooled, 1.0 - tail, axis=0)
        cov = coverage(lo, hi, truth)
    return DiagnosticsReport(res.dic, res.pd, rc, rc_threshold, m, cov)

"""Posterior summaries, calibrated signal detection, and enrichment.

Signal detection is calibrated against a panel of negative-control (NC)
AEs: at each retained iteration an AE is flagged when its beta draw
strictly exceeds the draws of more than ``exceed_count`` of the NC AEs,
and the signal probability is the fraction of iterations flagged. For an
NC AE the comparison panel excludes itself, and the exceedance threshold
caps at the reduced panel size minus one so the rule stays attainable.

Enrichment over ontology groups uses the per-iteration exceedance odds
ratio (EOR) of the 2x2 table (signals in group, non-signals in group,
signals outside, non-signals outside), with the Haldane-Anscombe 0.5
correction when a nonzero numerator meets a zero denominator cell.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import ConfigError

log = logging.getLogger(__name__)


def posterior_summary(draws_2d: np.ndarray, level: float = 0.95):
    """Mean and central interval per column of a (T, J) draw matrix."""
    draws_2d = np.asarray(draws_2d, dtype=float)
    tail = (1.0 - level) / 2.0
    return (draws_2d.mean(axis=0),
            np.quantile(draws_2d, tail, axis=0),
            np.quantile(draws_2d, 1.0 - tail, axis=0))


def nc_exceedance_indicators(beta_draws: np.ndarray, nc_mask: np.ndarray,
                             exceed_count: int) -> np.ndarray:
    """(T, J) boolean matrix of per-iteration NC-calibrated flags.

    ``nc_mask`` marks the NC columns. Strict exceedance makes an NC draw
    never count against itself, so no explicit self-exclusion is needed in
    the rank computation; only the threshold cap differs for NC columns.
    """
    beta_draws = np.asarray(beta_draws, dtype=float)
    nc_mask = np.asarray(nc_mask, dtype=bool)
    n_nc = int(nc_mask.sum())
    if n_nc <= exceed_count:
        raise ConfigError(
            f"exceed_count={exceed_count} needs more than that many "
            f"negative controls, got {n_nc}")
    t, j = beta_draws.shape
    exceeded = np.empty((t, j), dtype=np.int64)
    nc_sorted = np.sort(beta_draws[:, nc_mask], axis=1)
    for i in range(t):   # row-wise rank of each draw among the NC panel
        exceeded[i] = np.searchsorted(nc_sorted[i], beta_draws[i],
                                      side="left")
    thresholds = np.full(j, exceed_count)
    thresholds[nc_mask] = min(exceed_count, n_nc - 2)
    return exceeded > thresholds[None, :]


@dataclass
class SignalReport:
    ae_index: list[str]
    beta_mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    signal_prob: np.ndarray
    is_signal: np.ndarray          # bool
    is_nc: np.ndarray              # bool
    indicators: np.ndarray         # (T, J) per-iteration flags
    exceed_count: int
    cutoff: float

    def to_frame(self, names: dict[str, str] | None = None) -> pd.DataFrame:
        names = names or {}
        return pd.DataFrame({
            "ae_id": self.ae_index,
            "name": [names.get(ae, ae) for ae in self.ae_index],
            "beta_mean": self.beta_mean,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "signal_prob": self.signal_prob,
            "is_signal": self.is_signal.astype(int),
            "is_nc": self.is_nc.astype(int),
        })


def nc_signal_report(beta_draws: np.ndarray, ae_index, nc_ids,
                     exceed_count: int = 35, cutoff: float = 0.90,
                     level: float = 0.95) -> SignalReport:
    """Apply the NC exceedance rule to pooled draws.

    The decision rule is monotone-transform invariant: any strictly
    increasing map of all draws leaves the flags unchanged.
    """
    ae_index = list(ae_index)
    nc_ids = set(nc_ids)
    nc_mask = np.array([ae in nc_ids for ae in ae_index])
    ind = nc_exceedance_indicators(beta_draws, nc_mask, exceed_count)
    prob = ind.mean(axis=0)
    mean, lo, hi = posterior_summary(beta_draws, level)
    return SignalReport(ae_index, mean, lo, hi, prob, prob >= cutoff,
                        nc_mask, ind, exceed_count, cutoff)


# ---------------------------------------------------------------------------
# Enrichment

@dataclass
class EnrichmentReport:
    soc_names: list[str]
    eor_mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    is_enriched: np.ndarray        # bool
    group_sizes: np.ndarray        # J_s per group
    mean_threshold: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "soc": self.soc_names,
            "eor_mean": self.eor_mean,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "is_enriched": self.is_enriched.astype(int),
            "J_s": self.group_sizes.astype(int),
        })


def eor_from_counts(a, group_size, c, complement_size):
    """EOR of one 2x2 table per iteration, with the zero conventions.

    ``a`` flagged in group, ``c`` flagged outside; a = 0 gives EOR = 0
    regardless of the other cells, and a > 0 against a zero denominator
    cell applies the Haldane-Anscombe 0.5 to all four cells.
    """
    scalar = np.isscalar(a) and np.isscalar(c)
    a = np.atleast_1d(np.asarray(a, dtype=float))
    c = np.atleast_1d(np.asarray(c, dtype=float))
    a, c = np.broadcast_arrays(a, c)
    b = group_size - a
    d = complement_size - c
    eor = np.zeros(a.shape)
    plain = (a > 0) & (b > 0) & (c > 0)
    corr = (a > 0) & ~plain
    eor[plain] = (a * d)[plain] / ((b * c)[plain])
    eor[corr] = ((a + 0.5) * (d + 0.5))[corr] / (((b + 0.5) * (c + 0.5))[corr])
    return float(eor[0]) if scalar else eor


def enrichment_eor(indicators: np.ndarray, ae_index, memberships,
                   mean_threshold: float = 2.0,
                   level: float = 0.95) -> EnrichmentReport:
    """Per-group EOR summaries from per-iteration signal indicators.

    ``memberships`` maps AE name to a set of group names. Groups with no
    modeled members are omitted with a warning. A group is called
    enriched when its interval lower bound exceeds 1 and its mean exceeds
    ``mean_threshold``.
    """
    ae_index = list(ae_index)
    j = len(ae_index)
    socs = sorted({s for ae in ae_index for s in memberships.get(ae, ())})
    if not socs:
        log.warning("no ontology groups cover the modeled AEs")
    ind = np.asarray(indicators, dtype=bool)
    total = ind.sum(axis=1)
    tail = (1.0 - level) / 2.0
    names, means, los, his, calls, sizes = [], [], [], [], [], []
    for soc in socs:
        mask = np.array([soc in memberships.get(ae, ()) for ae in ae_index])
        j_s = int(mask.sum())
        if j_s == 0:
            log.warning("ontology group %s has no modeled members", soc)
            continue
        a = ind[:, mask].sum(axis=1)
        eor = eor_from_counts(a, j_s, total - a, j - j_s)
        m = float(eor.mean())
        lo = float(np.quantile(eor, tail))
        hi = float(np.quantile(eor, 1.0 - tail))
        names.append(soc)
        means.append(m)
        los.append(lo)
        his.append(hi)
        calls.append(lo > 1.0 and m > mean_threshold)
        sizes.append(j_s)
    return EnrichmentReport(names, np.array(means), np.array(los),
                            np.array(his), np.array(calls, dtype=bool),
                            np.array(sizes, dtype=np.int64), mean_threshold)


# ---------------------------------------------------------------------------
# Mixture structure summaries

def coclustering(z_draws: np.ndarray, k: int) -> np.ndarray:
    """(J, J) fraction of iterations with AEs i and j in one component."""
    z = np.asarray(z_draws)
    t, j = z.shape
    out = np.zeros((j, j))
    for comp in range(k):
        a = (z == comp).astype(float)
        out += a.T @ a
    return out / t


def used_components(z_draws: np.ndarray, k: int,
                    threshold: float = 0.05) -> float:
    """Mean number of components holding at least ``threshold`` of AEs."""
    z = np.asarray(z_draws)
    t, j = z.shape
    counts = np.stack([(z == comp).sum(axis=1) for comp in range(k)], axis=1)
    # float guard: 0.05*20 evaluates just above 1 in binary floating point
    cut = threshold * j - 1e-9
    return float((counts >= cut).sum(axis=1).mean())

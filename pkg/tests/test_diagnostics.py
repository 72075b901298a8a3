import logging
import math
import statistics

import numpy as np
import pytest

from vaxsignal import diagnostics, model
from vaxsignal.diagnostics import (DicResult, compute_diagnostics, coverage,
                                   dic, gelman_rubin, mse, plug_in_deviance,
                                   rc_summary)
from vaxsignal.model import Hyperparams
from vaxsignal.sampler import ChainConfig, run_chains

from conftest import two_stratum_table


def psrf_loops(x):
    """Corrected scale-reduction factor, coded with plain loops for use
    as an oracle against the vectorized implementation."""
    m, n = x.shape
    xbar = [statistics.fmean(row) for row in x]
    s2 = [statistics.variance(row) for row in x]
    w = statistics.fmean(s2)
    grand = statistics.fmean(xbar)
    b = n * sum((mi - grand) ** 2 for mi in xbar) / (m - 1)
    v = (n - 1) / n * w + (1 + 1 / m) * b / n
    var_w = statistics.variance(s2) / m

    def cov(a, bb):
        ma, mb = statistics.fmean(a), statistics.fmean(bb)
        return sum((ai - ma) * (bi - mb) for ai, bi in zip(a, bb)) / (m - 1)

    var_b = 2.0 * b * b / (m - 1)
    xbar2 = [mi * mi for mi in xbar]
    cov_wb = n / m * (cov(s2, xbar2) - 2.0 * grand * cov(s2, xbar))
    var_v = ((n - 1) ** 2 * var_w + (1 + 1 / m) ** 2 * var_b
             + 2.0 * (n - 1) * (1 + 1 / m) * cov_wb) / n ** 2
    if var_v <= 0 or w <= 0:
        return 1.0
    d = 2.0 * v * v / var_v
    return max(math.sqrt((d + 3.0) / (d + 1.0) * v / w), 1.0)


class TestGelmanRubin:
    def test_loop_oracle_random_inputs(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            m = int(rng.integers(2, 6))
            n = int(rng.integers(5, 60))
            x = rng.normal(rng.normal(0, 0.3, (m, 1)), 1.0, (m, n))
            assert gelman_rubin(x) == pytest.approx(psrf_loops(x),
                                                    abs=1e-10)

    def test_vectorized_matches_per_parameter(self):
        rng = np.random.default_rng(1)
        x = rng.normal(0, 1, (3, 50, 7))
        out = gelman_rubin(x)
        assert out.shape == (7,)
        for j in range(7):
            assert out[j] == pytest.approx(gelman_rubin(x[:, :, j]),
                                           abs=1e-12)

    def test_identical_chains_floor_at_one(self):
        row = np.random.default_rng(2).normal(0, 1, 40)
        x = np.stack([row, row, row])
        assert gelman_rubin(x) == 1.0

    def test_well_mixed_chains_near_one(self):
        x = np.random.default_rng(3).normal(0, 1, (4, 4000))
        assert gelman_rubin(x) < 1.01

    def test_separated_chains_large(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0, 0.1, (2, 200)) + np.array([[0.0], [5.0]])
        assert gelman_rubin(x) > 5.0

    def test_affine_invariance(self):
        x = np.random.default_rng(5).normal(0, 1, (3, 80))
        a = gelman_rubin(x)
        b = gelman_rubin(3.7 * x - 11.0)
        assert b == pytest.approx(a, rel=1e-9)

    def test_degenerate_cases(self):
        same = np.full((3, 10), 2.5)
        assert gelman_rubin(same) == 1.0
        apart = np.stack([np.full(10, 0.0), np.full(10, 1.0)])
        assert gelman_rubin(apart) == np.inf

    def test_shape_errors(self):
        with pytest.raises(ValueError, match="two chains"):
            gelman_rubin(np.zeros((1, 10)))
        with pytest.raises(ValueError, match="two draws"):
            gelman_rubin(np.zeros((3, 1)))


class TestDic:
    def test_hand_example(self):
        res = dic(np.array([10.0, 12.0]), 9.0)
        assert res == DicResult(13.0, 2.0)
        assert res.mean_deviance == 11.0

    def test_negative_pd_warns(self, caplog):
        with caplog.at_level(logging.WARNING, logger="vaxsignal.diagnostics"):
            res = dic(np.array([5.0, 5.0]), 9.0)
        assert res.pd == -4.0
        assert "negative effective parameter count" in caplog.text

    def test_plug_in_matches_state_deviance(self, tiny_table):
        rng = np.random.default_rng(6)
        alpha = rng.normal(0, 1, (3, 1))
        beta = rng.normal(0, 1, 3)
        st = model.init_state(tiny_table, Hyperparams())
        st.alpha = alpha
        st.beta = beta
        assert plug_in_deviance(alpha, beta, tiny_table) == pytest.approx(
            model.deviance(st, tiny_table), abs=1e-10)


class TestRecoveryMetrics:
    def test_mse(self):
        assert mse([1.0, 2.0], [0.0, 0.0]) == 2.5
        assert mse([3.0], [3.0]) == 0.0

    def test_coverage_closed_endpoints(self):
        lo = np.array([0.0, 0.0, 0.0, 0.0])
        hi = np.array([1.0, 1.0, 1.0, 1.0])
        truth = np.array([0.0, 1.0, 0.5, 1.0 + 1e-9])
        assert coverage(lo, hi, truth) == 0.75

    def test_rc_summary(self):
        out = rc_summary(np.array([1.0, 1.1, 1.3]))
        assert out["max"] == pytest.approx(1.3)
        assert out["frac_below_1.2"] == pytest.approx(2 / 3)
        assert set(out) == {"max", "p99", "frac_below_1.2"}


class TestReport:
    def fit(self, n_chains=2):
        rng = np.random.default_rng(7)
        counts = np.column_stack([rng.binomial(300, 0.05, 4),
                                  rng.binomial(500, 0.07, 4)])
        t = two_stratum_table(counts.tolist(), n_control=300, n_target=500)
        cfg = ChainConfig(n_chains=n_chains, n_burnin=150, thin=2,
                          n_retained=60, seed=13)
        return run_chains(t, Hyperparams(), cfg), t

    def test_full_report(self):
        draws, t = self.fit()
        rep = compute_diagnostics(draws, t, truth=np.zeros(4))
        assert rep.rc is not None and rep.rc.shape == (4,)
        assert rep.mse is not None and rep.coverage is not None
        assert rep.dic - rep.pd == pytest.approx(
            float(draws.pooled_deviance().mean()), abs=1e-9)
        d = rep.to_dict()
        assert set(d) == {"dic", "pd", "rc_summary", "mse", "coverage"}
        assert '"dic"' in rep.to_json()

    def test_single_chain_omits_rc(self):
        draws, t = self.fit(n_chains=1)
        rep = compute_diagnostics(draws, t)
        assert rep.rc is None
        assert set(rep.to_dict()) == {"dic", "pd"}

import math

import numpy as np
import pandas as pd
import pytest

from vaxsignal.data_model import CONTROL, TARGET
from vaxsignal.model import Hyperparams, PriorMode
from vaxsignal.sampler import ChainConfig
from vaxsignal.simulation import (MODES, SimulationSpec, draw_intercepts,
                                  exact_joint_draw, hyper_for_mode,
                                  load_dataset, regenerate_counts, run_study,
                                  save_dataset, simulate_betas,
                                  simulate_dataset, simulate_replicate,
                                  summarize_study, zero_fractions,
                                  _fit_seed)


class TestSpec:
    def test_defaults(self):
        spec = SimulationSpec()
        assert spec.n_aes == 300
        assert spec.cluster_means == (-2.5, 0.0, 2.5)
        assert (spec.n_control, spec.n_target) == (20_000, 260_000)

    def test_ae_names_padded_and_unique(self):
        names = SimulationSpec().ae_names()
        assert names[0] == "AE_001" and names[-1] == "AE_300"
        assert len(set(names)) == 300

    def test_validation(self):
        with pytest.raises(ValueError):
            SimulationSpec(cluster_means=(0.0,), cluster_sizes=(1, 2))
        with pytest.raises(ValueError):
            SimulationSpec(sigma=-0.1)
        with pytest.raises(ValueError):
            SimulationSpec(n_control=0)


class TestGenerators:
    def test_cluster_multiplicities_and_block_order(self):
        beta, clusters = simulate_betas(SimulationSpec(),
                                        np.random.default_rng(0))
        assert beta.shape == (300,)
        assert np.bincount(clusters).tolist() == [50, 150, 100]
        assert np.all(np.diff(clusters) >= 0)

    def test_sigma_zero_collapses_to_centers(self):
        spec = SimulationSpec(sigma=0.0)
        beta, clusters = simulate_betas(spec, np.random.default_rng(1))
        want = np.asarray(spec.cluster_means)[clusters]
        assert np.array_equal(beta, want)

    def test_cluster_means_recovered(self):
        spec = SimulationSpec(sigma=0.5)
        beta, clusters = simulate_betas(spec, np.random.default_rng(2))
        for g, (center, size) in enumerate(zip(spec.cluster_means,
                                               spec.cluster_sizes)):
            got = beta[clusters == g].mean()
            assert abs(got - center) < 4 * spec.sigma / math.sqrt(size)

    def test_intercept_pool_resampling(self):
        spec = SimulationSpec(intercept_pool=(-9.0, -7.0, -5.0))
        a = draw_intercepts(spec, np.random.default_rng(3))
        assert set(np.unique(a)) <= {-9.0, -7.0, -5.0}

    def test_intercept_normal_moments(self):
        spec = SimulationSpec()
        rng = np.random.default_rng(4)
        a = np.concatenate([draw_intercepts(spec, rng) for _ in range(20)])
        n = a.size
        assert abs(a.mean() + 8.95) < 4 * 3.2 / math.sqrt(n)
        assert abs(a.std() - 3.2) < 0.2

    def test_dataset_layout(self):
        spec = SimulationSpec()
        ds = simulate_replicate(spec, np.random.default_rng(5))
        t = ds.table
        assert t.counts.shape == (300, 2)
        assert [s.vaccine_group for s in t.strata] == [CONTROL, TARGET]
        assert t.exposures.tolist() == [20_000, 260_000]
        assert np.all(t.counts >= 0)
        assert np.all(t.counts <= t.exposures[None, :])
        assert ds.cluster_truth.dtype == np.int64

    def test_dataset_deterministic(self):
        spec = SimulationSpec()
        a = simulate_replicate(spec, np.random.default_rng(6))
        b = simulate_replicate(spec, np.random.default_rng(6))
        assert np.array_equal(a.table.counts, b.table.counts)
        assert np.array_equal(a.beta_truth, b.beta_truth)

    def test_zero_fraction_extremes(self):
        spec = SimulationSpec(sigma=0.0, intercept_pool=(-20.0,))
        ds = simulate_replicate(spec, np.random.default_rng(7))
        zf = zero_fractions(ds)
        assert set(zf) == {"control", "target_cluster_0",
                           "target_cluster_1", "target_cluster_2"}
        assert zf["control"] == 1.0
        dense = SimulationSpec(sigma=0.0, intercept_pool=(0.0,))
        zf2 = zero_fractions(simulate_replicate(dense,
                                                np.random.default_rng(8)))
        assert zf2["control"] == 0.0

    def test_zero_fraction_calibration_single_replicate(self):
        ds = simulate_replicate(SimulationSpec(), np.random.default_rng(9))
        zf = zero_fractions(ds)
        assert 0.26 < zf["control"] < 0.42
        assert 0.18 < zf["target_cluster_0"] < 0.48
        assert 0.06 < zf["target_cluster_1"] < 0.17
        assert zf["target_cluster_2"] < 0.13


class TestJointDraws:
    def test_exact_draw_is_valid_and_deterministic(self):
        h = Hyperparams()
        s1, t1 = exact_joint_draw(h, 20, 500, 800, np.random.default_rng(10))
        s2, t2 = exact_joint_draw(h, 20, 500, 800, np.random.default_rng(10))
        s1.validate(h)
        assert np.array_equal(s1.beta, s2.beta)
        assert np.array_equal(t1.counts, t2.counts)
        assert t1.exposures.tolist() == [500, 800]
        assert np.all(t1.counts <= t1.exposures[None, :])

    def test_lambda_marginal_mean(self):
        h = Hyperparams()
        rng = np.random.default_rng(11)
        lams = np.array([exact_joint_draw(h, 2, 10, 10, rng)[0].lam
                         for _ in range(3000)])
        want = h.r_lambda / h.lambda0
        se = math.sqrt(h.r_lambda) / h.lambda0 / math.sqrt(lams.size)
        assert abs(lams.mean() - want) < 4 * se

    def test_il_mode_beta_scale(self):
        h = Hyperparams(prior_mode=PriorMode.IL, il_precision=0.1)
        rng = np.random.default_rng(12)
        st, _ = exact_joint_draw(h, 2000, 10, 10, rng)
        assert abs(st.beta.std() - math.sqrt(10.0)) < 0.3

    def test_regenerate_counts_mean(self, tiny_table):
        from vaxsignal.model import init_state
        st = init_state(tiny_table, Hyperparams())
        st.alpha[:, 0] = 0.0      # success probability one half everywhere
        st.beta[:] = 0.0
        rng = np.random.default_rng(13)
        totals = np.zeros_like(tiny_table.counts, dtype=float)
        n = 400
        for _ in range(n):
            totals += regenerate_counts(st, tiny_table, rng).counts
        frac = totals / n / tiny_table.exposures[None, :]
        assert np.all(np.abs(frac - 0.5) < 4 * 0.5 / math.sqrt(
            n * tiny_table.exposures.min()))

    def test_regenerate_preserves_structure(self, tiny_table):
        from vaxsignal.model import init_state
        st = init_state(tiny_table, Hyperparams())
        out = regenerate_counts(st, tiny_table, np.random.default_rng(14))
        assert out.ae_index == tiny_table.ae_index
        assert out.strata == tiny_table.strata
        assert out is not tiny_table


class TestStudy:
    def small_spec(self):
        return SimulationSpec(cluster_sizes=(2, 3, 2), n_control=500,
                              n_target=800)

    def cfg(self):
        return ChainConfig(n_chains=2, n_burnin=100, thin=2, n_retained=40,
                           seed=0)

    def test_fit_seeds_distinct(self):
        seeds = {_fit_seed(3, si, r, m)
                 for si in range(2) for r in range(3) for m in MODES}
        assert len(seeds) == 18

    def test_hyper_for_mode(self):
        base = Hyperparams()
        assert hyper_for_mode(base, "dpm").prior_mode is PriorMode.DPM
        assert hyper_for_mode(base, "il-informative").il_precision == 0.1
        assert hyper_for_mode(base, "il-vague").il_precision == 0.01
        with pytest.raises(ValueError):
            hyper_for_mode(base, "bogus")

    def test_run_study_report(self, tmp_path):
        report = run_study(self.small_spec(), sigmas=[0.5], modes=MODES,
                           n_replicates=2, chain_config=self.cfg(), seed=21,
                           artifact_dir=tmp_path)
        assert list(report.columns) == ["sigma", "model", "replicate",
                                        "dic", "mse", "coverage"]
        assert len(report) == 6
        assert report["dic"].notna().all()
        assert set(report["model"]) == set(MODES)
        d = tmp_path / "sigma_0.5"
        for f in ("caterpillar.svg", "caterpillar.csv",
                  "cocluster_heatmap.svg", "cocluster_heatmap.csv"):
            assert (d / f).exists()

    def test_run_study_deterministic(self):
        kw = dict(sigmas=[0.5], modes=("dpm",), n_replicates=2,
                  chain_config=self.cfg(), seed=22)
        a = run_study(self.small_spec(), **kw)
        b = run_study(self.small_spec(), **kw)
        pd.testing.assert_frame_equal(a, b)

    def test_summarize_study(self):
        report = pd.DataFrame({
            "sigma": [0.5] * 4,
            "model": ["dpm", "dpm", "il-vague", "il-vague"],
            "replicate": [0, 1, 0, 1],
            "dic": [10.0, 12.0, 20.0, np.nan],
            "mse": [1.0, 3.0, 5.0, np.nan],
            "coverage": [0.9, 1.0, 0.8, np.nan],
        })
        out = summarize_study(report, modes=("dpm", "il-vague"))
        assert list(out.columns) == ["sigma", "metric", "dpm", "il-vague"]
        dic_row = out[out["metric"] == "mean_dic"].iloc[0]
        assert dic_row["dpm"] == 11.0
        assert dic_row["il-vague"] == 20.0      # failed fit excluded
        cov_row = out[out["metric"] == "coverage_pct"].iloc[0]
        assert cov_row["dpm"] == pytest.approx(95.0)


class TestDatasetIo:
    def test_roundtrip(self, tmp_path):
        spec = SimulationSpec(cluster_sizes=(2, 2, 2), n_control=100,
                              n_target=150)
        ds = simulate_replicate(spec, np.random.default_rng(30))
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert np.array_equal(back.table.counts, ds.table.counts)
        assert back.table.ae_index == ds.table.ae_index
        assert np.array_equal(back.beta_truth, ds.beta_truth)
        assert np.array_equal(back.cluster_truth, ds.cluster_truth)
        truth = pd.read_csv(tmp_path / "truth.csv")
        assert truth["cluster"].min() == 1     # labels are 1-based on disk

    def test_order_mismatch_detected(self, tmp_path):
        spec = SimulationSpec(cluster_sizes=(1, 1, 1), n_control=50,
                              n_target=60)
        ds = simulate_replicate(spec, np.random.default_rng(31))
        save_dataset(ds, tmp_path)
        truth = pd.read_csv(tmp_path / "truth.csv")
        truth = truth.iloc[::-1]
        truth.to_csv(tmp_path / "truth.csv", index=False)
        with pytest.raises(ValueError, match="order"):
            load_dataset(tmp_path)

"""Command-line pipeline: ingest, fit, signals, enrich, plot, simulate,
study, verify. All stages share one run directory whose manifest pins the
seed and records input and output digests.

Exit codes: 0 success, 2 configuration or usage error, 3 convergence or
sampling failure, 4 data error.
"""
from __future__ import annotations

import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import click
import numpy as np
import pandas as pd

from . import data_model, diagnostics, inference, plots, simulation
from .config import RunConfig, load_config
from .errors import (ChainDivergedError, ConfigError, ConvergenceError,
                     DataError)
from .model import PriorMode
from .rundir import RunDir, stage_in
from .sampler import load_draws, run_chains, save_draws
from .simulation import MODES, hyper_for_mode

log = logging.getLogger(__name__)


@dataclass
class App:
    cfg: RunConfig
    rundir: RunDir | None
    seed: int | None
    threads: int

    def rundir_lock(self):
        if self.rundir is None:
            raise ConfigError("--run-dir is required for this command")
        return self.rundir.lock()


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False),
              default=None, help="INI configuration file.")
@click.option("--run-dir", "run_dir", type=click.Path(file_okay=False),
              default=None, help="Run directory for artifacts.")
@click.option("--seed", type=int, default=None,
              help="Base seed; pinned at run-directory creation.")
@click.option("--threads", type=int, default=1, show_default=True,
              help="Worker processes for chains and study replicates.")
@click.pass_context
def cli(ctx, config_path, run_dir, seed, threads):
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    cfg = load_config(config_path)
    ctx.obj = App(cfg, RunDir(run_dir) if run_dir else None, seed, threads)


def _open_run(app: App) -> dict:
    if app.rundir is None:
        raise ConfigError("--run-dir is required for this command")
    if app.rundir.exists():
        return app.rundir.create_or_open(app.seed, app.cfg.snapshot())
    seed = app.seed if app.seed is not None else app.cfg.chains.seed
    return app.rundir.create_or_open(seed, app.cfg.snapshot())


def _fit_dir(app: App, mode: str) -> Path:
    return app.rundir.path / "fits" / mode


def _load_table(app: App, manifest, simulated=None):
    """Returns (table, truth array or None)."""
    if simulated is not None:
        ds = simulation.load_dataset(simulated)
        return ds.table, ds.beta_truth
    if stage_in(manifest, "simulate"):
        ds = simulation.load_dataset(app.rundir.path / "simulate")
        return ds.table, ds.beta_truth
    if stage_in(manifest, "ingest"):
        return data_model.load_table(app.rundir.path / "ingest"), None
    raise ConfigError("no dataset in the run directory; run ingest or "
                      "simulate first, or pass --simulated DIR")


def _load_nc_ids(app: App, manifest, ae_index) -> tuple[list[str], dict]:
    """NC names and SOC memberships from the ingest dictionary when
    available, else from the configured files."""
    dict_path = app.rundir.path / "ingest" / "ae_dictionary.csv"
    if stage_in(manifest, "ingest") and dict_path.exists():
        d = data_model.load_dictionary(dict_path)
        return sorted(d.nc_ids), dict(d.memberships)
    nc_ids: list[str] = []
    memberships: dict = {}
    if app.cfg.data.nc_list:
        with open(app.cfg.data.nc_list) as fh:
            nc_ids = [n for n in data_model.load_nc_list(fh)
                      if n in set(ae_index)]
    if app.cfg.data.soc_map:
        with open(app.cfg.data.soc_map) as fh:
            soc = data_model.load_soc_map(fh)
        memberships = {ae: soc.get(ae, frozenset()) for ae in ae_index}
    return nc_ids, memberships


# ---------------------------------------------------------------------------

@cli.command()
@click.pass_obj
def ingest(app: App):
    """Parse reports, apply exclusions, and build the stratified table."""
    d = app.cfg.data
    with app.rundir_lock():
        manifest = _open_run(app)
        inputs = {}
        if d.format == "canonical":
            if not d.reports:
                raise ConfigError("data.reports is required for "
                                  "canonical format")
            inputs["reports"] = d.reports
            with open(d.reports, newline="") as fh:
                parsed = data_model.parse_canonical(fh)
        else:
            for key in ("raw_data", "raw_vax", "raw_symptoms"):
                if not getattr(d, key):
                    raise ConfigError(f"data.{key} is required for raw "
                                      "format")
                inputs[key] = getattr(d, key)
            with open(d.raw_data, newline="") as f1, \
                    open(d.raw_vax, newline="") as f2, \
                    open(d.raw_symptoms, newline="") as f3:
                parsed = data_model.parse_raw_reports(
                    f1, f2, f3, d.target_codes, d.control_codes)
        kept, audit = data_model.apply_exclusions(parsed.reports, d.policy)
        retained = data_model.filter_aes(kept, d.policy)
        table = data_model.aggregate(kept, retained)

        soc_map: dict = {}
        nc_names: list[str] = []
        if d.soc_map:
            inputs["soc_map"] = d.soc_map
            with open(d.soc_map, newline="") as fh:
                soc_map = data_model.load_soc_map(fh)
        if d.nc_list:
            inputs["nc_list"] = d.nc_list
            with open(d.nc_list) as fh:
                nc_names = data_model.load_nc_list(fh)
        dictionary = data_model.build_ae_dictionary(retained, soc_map,
                                                    nc_names)

        out = app.rundir.path / "ingest"
        out.mkdir(parents=True, exist_ok=True)
        paths = data_model.save_table(table, out)
        paths.append(data_model.save_dictionary(dictionary,
                                                out / "ae_dictionary.csv"))
        audit_payload = {
            "parsed_reports": len(parsed.reports),
            "rejected": parsed.reject_counts(),
            "excluded": audit,
            "analyzed_reports": len(kept),
            "retained_aes": len(retained),
            "strata": table.n_strata,
        }
        p = out / "audit.json"
        p.write_text(json.dumps(audit_payload, indent=2, sort_keys=True)
                     + "\n")
        paths.append(p)
        app.rundir.record_inputs(inputs)
        app.rundir.record_stage("ingest", paths)
        click.echo(f"ingest: {len(kept)} reports, {len(retained)} AEs, "
                   f"{table.n_strata} strata")


@cli.command()
@click.option("--mode", type=click.Choice(MODES), default="dpm",
              show_default=True)
@click.option("--simulated", type=click.Path(exists=True, file_okay=False),
              default=None, help="Fit a dataset directory written by "
              "simulate instead of this run's ingest output.")
@click.option("--no-strict-convergence", is_flag=True,
              help="Warn instead of failing when the R_c gate misses.")
@click.pass_obj
def fit(app: App, mode, simulated, no_strict_convergence):
    """Run the MCMC chains and write draws plus diagnostics."""
    with app.rundir_lock():
        manifest = _open_run(app)
        table, truth = _load_table(app, manifest, simulated)
        hyper = hyper_for_mode(app.cfg.model, mode)
        chain_cfg = app.cfg.chains.replace(seed=manifest["seed"])
        out = _fit_dir(app, mode)
        try:
            draws = run_chains(table, hyper, chain_cfg,
                               n_workers=app.threads)
        except ChainDivergedError as exc:
            out.mkdir(parents=True, exist_ok=True)
            dump = {k: v for k, v in exc.dump.items()
                    if not isinstance(v, np.ndarray)}
            (out / "abort_dump.json").write_text(
                json.dumps(dump, indent=2, sort_keys=True) + "\n")
            beta = exc.dump.get("beta_partial")
            if beta is not None and len(beta):
                pd.DataFrame(beta, columns=table.ae_index).to_csv(
                    out / "draws_beta_partial.csv", index=False)
            raise
        paths = save_draws(draws, out)
        diag = diagnostics.compute_diagnostics(
            draws, table, truth=truth,
            level=app.cfg.signals.level,
            rc_threshold=app.cfg.fit.rc_threshold)
        p = out / "diagnostics.json"
        p.write_text(diag.to_json())
        paths.append(p)
        app.rundir.record_stage(f"fit:{mode}", paths)
        click.echo(f"fit[{mode}]: DIC={diag.dic:.1f} pD={diag.pd:.1f}")
        if diag.rc is not None:
            frac = float(np.mean(diag.rc < app.cfg.fit.rc_threshold))
            click.echo(f"fit[{mode}]: {100 * frac:.1f}% of R_c below "
                       f"{app.cfg.fit.rc_threshold}")
            strict = app.cfg.fit.strict_convergence \
                and not no_strict_convergence
            if frac < app.cfg.fit.rc_frac_required:
                msg = (f"convergence gate failed: {100 * frac:.1f}% of "
                       f"R_c below {app.cfg.fit.rc_threshold}, need "
                       f">= {100 * app.cfg.fit.rc_frac_required:.0f}%")
                if strict:
                    raise ConvergenceError(msg)
                log.warning("%s (continuing: strict convergence off)", msg)


@cli.command()
@click.option("--mode", type=click.Choice(MODES), default="dpm",
              show_default=True)
@click.pass_obj
def signals(app: App, mode):
    """Apply the NC-calibrated signal rule; DPM fits also get the
    co-clustering matrix."""
    with app.rundir_lock():
        manifest = _open_run(app)
        fit_dir = _fit_dir(app, mode)
        if not stage_in(manifest, f"fit:{mode}"):
            raise ConfigError(f"fit --mode {mode} has not completed")
        draws = load_draws(fit_dir)
        nc_ids, _ = _load_nc_ids(app, manifest, draws.ae_index)
        if not nc_ids:
            raise ConfigError("no negative controls available; provide "
                              "data.nc_list or ingest with one")
        s = app.cfg.signals
        report = inference.nc_signal_report(
            draws.pooled_beta(), draws.ae_index, nc_ids,
            exceed_count=s.exceed_count, cutoff=s.cutoff, level=s.level)
        p = fit_dir / "signals.csv"
        report.to_frame().to_csv(p, index=False)
        paths = [p]
        if draws.mode is PriorMode.DPM:
            mat = inference.coclustering(draws.pooled_z(), draws.k)
            frame = pd.DataFrame(mat, columns=draws.ae_index)
            frame.insert(0, "ae_id", draws.ae_index)
            p = fit_dir / "cocluster.csv"
            frame.to_csv(p, index=False)
            paths.append(p)
            used = inference.used_components(draws.pooled_z(), draws.k)
            p = fit_dir / "cocluster_meta.json"
            p.write_text(json.dumps({"used_components_mean": used,
                                     "threshold": 0.05},
                                    indent=2, sort_keys=True) + "\n")
            paths.append(p)
        app.rundir.record_stage(f"signals:{mode}", paths)
        n_sig = int(report.is_signal.sum())
        click.echo(f"signals[{mode}]: {n_sig} of {len(draws.ae_index)} AEs "
                   f"flagged at cutoff {s.cutoff}")


@cli.command()
@click.option("--mode", type=click.Choice(MODES), default="dpm",
              show_default=True)
@click.pass_obj
def enrich(app: App, mode):
    """Ontology-group enrichment from per-iteration signal indicators."""
    with app.rundir_lock():
        manifest = _open_run(app)
        fit_dir = _fit_dir(app, mode)
        if not stage_in(manifest, f"fit:{mode}"):
            raise ConfigError(f"fit --mode {mode} has not completed")
        draws = load_draws(fit_dir)
        nc_ids, memberships = _load_nc_ids(app, manifest, draws.ae_index)
        if not nc_ids:
            raise ConfigError("no negative controls available; provide "
                              "data.nc_list or ingest with one")
        if not any(memberships.values()):
            raise ConfigError("no SOC memberships available; provide "
                              "data.soc_map or ingest with one")
        s = app.cfg.signals
        report = inference.nc_signal_report(
            draws.pooled_beta(), draws.ae_index, nc_ids,
            exceed_count=s.exceed_count, cutoff=s.cutoff, level=s.level)
        e = app.cfg.enrichment
        enr = inference.enrichment_eor(report.indicators, draws.ae_index,
                                       memberships,
                                       mean_threshold=e.eor_mean_threshold,
                                       level=e.level)
        p = fit_dir / "enrichment.csv"
        enr.to_frame().to_csv(p, index=False)
        app.rundir.record_stage(f"enrich:{mode}", [p])
        click.echo(f"enrich[{mode}]: {int(enr.is_enriched.sum())} of "
                   f"{len(enr.soc_names)} groups enriched")


@cli.command()
@click.option("--mode", type=click.Choice(MODES), default="dpm",
              show_default=True)
@click.option("--kind", type=click.Choice(["caterpillar", "heatmap",
                                           "enrichment", "all"]),
              default="all", show_default=True)
@click.pass_obj
def plot(app: App, mode, kind):
    """Render SVG figures (with CSV backers) from fitted artifacts."""
    with app.rundir_lock():
        manifest = _open_run(app)
        fit_dir = _fit_dir(app, mode)
        if not stage_in(manifest, f"fit:{mode}"):
            raise ConfigError(f"fit --mode {mode} has not completed")
        draws = load_draws(fit_dir)
        _, truth = _load_table(app, manifest)
        out = app.rundir.path / "plots" / mode
        paths = []
        if kind in ("caterpillar", "all"):
            mean, lo, hi = inference.posterior_summary(
                draws.pooled_beta(), app.cfg.signals.level)
            paths += plots.caterpillar_plot(
                mean, lo, hi, draws.ae_index, truth=truth,
                svg_path=out / "caterpillar.svg",
                csv_path=out / "caterpillar.csv")
        if kind in ("heatmap", "all"):
            if draws.mode is not PriorMode.DPM:
                if kind == "heatmap":
                    raise ConfigError("co-clustering heatmap needs a "
                                      "mixture-prior fit")
            else:
                mat = inference.coclustering(draws.pooled_z(), draws.k)
                order = truth if truth is not None \
                    else draws.beta_posterior_mean()
                paths += plots.cocluster_heatmap(
                    mat, draws.ae_index, order_values=order,
                    svg_path=out / "cocluster_heatmap.svg",
                    csv_path=out / "cocluster_heatmap.csv")
        if kind in ("enrichment", "all"):
            src = fit_dir / "enrichment.csv"
            if not src.exists():
                if kind == "enrichment":
                    raise ConfigError("run enrich before plotting "
                                      "enrichment intervals")
            else:
                frame = pd.read_csv(src)
                paths += plots.enrichment_plot(
                    frame, app.cfg.enrichment.eor_mean_threshold,
                    svg_path=out / "enrichment.svg",
                    csv_path=out / "enrichment.csv")
        if not paths:
            raise ConfigError("nothing to plot for this fit")
        app.rundir.record_stage(f"plot:{mode}", paths)
        click.echo(f"plot[{mode}]: wrote {len(paths)} files under "
                   f"{out}")


@cli.command()
@click.pass_obj
def simulate(app: App):
    """Write one synthetic dataset (with truth) into the run directory."""
    with app.rundir_lock():
        manifest = _open_run(app)
        rng = np.random.default_rng(
            np.random.SeedSequence((manifest["seed"], 0, 0)))
        ds = simulation.simulate_replicate(app.cfg.simulation, rng)
        out = app.rundir.path / "simulate"
        paths = simulation.save_dataset(ds, out)
        app.rundir.record_stage("simulate", paths)
        zf = simulation.zero_fractions(ds)
        click.echo(f"simulate: J={ds.table.n_aes} "
                   f"sigma={app.cfg.simulation.sigma:g} "
                   f"control zeros {100 * zf['control']:.1f}%")


@cli.command()
@click.pass_obj
def study(app: App):
    """Replicated three-model comparison; writes the per-fit report and
    the summary table, plus figures for replicate 0 of each sigma."""
    with app.rundir_lock():
        manifest = _open_run(app)
        st = app.cfg.study
        out = app.rundir.path / "study"
        out.mkdir(parents=True, exist_ok=True)
        report = simulation.run_study(
            app.cfg.simulation, st.sigmas, st.modes, st.n_replicates,
            app.cfg.chains, manifest["seed"], n_workers=app.threads,
            artifact_dir=out, hyper=app.cfg.model)
        p1 = out / "study_report.csv"
        report.to_csv(p1, index=False)
        summary = simulation.summarize_study(report, st.modes)
        p2 = out / "study_summary.csv"
        summary.to_csv(p2, index=False)
        paths = [p1, p2]
        for sig in st.sigmas:
            d = out / f"sigma_{sig:g}"
            if d.exists():
                paths += sorted(d.iterdir())
        app.rundir.record_stage("study", paths)
        click.echo(summary.to_string(index=False))


@cli.command()
@click.pass_obj
def verify(app: App):
    """Recheck recorded artifact digests."""
    if app.rundir is None:
        raise ConfigError("--run-dir is required for this command")
    problems = app.rundir.verify()
    if problems:
        for p in problems:
            click.echo(p, err=True)
        raise DataError(f"{len(problems)} artifact(s) failed verification")
    click.echo("verify: all recorded artifacts match")


# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    """Console entry point mapping errors onto exit codes."""
    try:
        cli(args=argv, standalone_mode=False)
        return 0
    except ConfigError as exc:
        click.echo(f"error: {exc}", err=True)
        return 2
    except (ConvergenceError, ChainDivergedError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 3
    except DataError as exc:
        click.echo(f"error: {exc}", err=True)
        return 4
    except click.UsageError as exc:
        exc.show()
        return 2
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())

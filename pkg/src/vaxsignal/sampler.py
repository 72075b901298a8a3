"""Metropolis-within-Gibbs sampler for the mixture logistic model.

Regression coefficients (alpha rows and beta) take coordinate-wise adaptive
random-walk Metropolis steps, vectorized across AEs: the likelihood and the
conditional beta prior factorize over AEs given the mixture block, so all J
accept/reject decisions for one coordinate are independent and can be drawn
at once. Two extra moves keep the per-AE block mobile: an antithetic
proposal (alpha_j0 + d, beta_j - d) that slides along the ridge left when
heavy target counts pin alpha_j0 + beta_j, and an independence proposal of
beta_j from its conditional prior whose acceptance reduces to a likelihood
ratio (this lets effects with near-flat likelihoods traverse the mixture).
The mixture block (z, v, (mu_k, tau_k), mu_base, lam) uses exact conjugate
draws; u takes a reflected random walk on (0, f0).

Step sizes follow a Robbins-Monro recursion toward a 0.44 acceptance rate in
windows of ``adapt_window`` iterations and freeze at the end of burn-in, so
retained draws come from a fixed transition kernel. Chain c uses a Philox
counter-based stream keyed ``seed XOR c``.
"""
from __future__ import annotations

import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ChainDivergedError
from .model import (Hyperparams, ModelState, PriorMode, init_state,
                    linear_predictor, loglik_cells, stick_to_simplex)

STEP_MIN, STEP_MAX = 1e-5, 50.0


@dataclass(frozen=True)
class ChainConfig:
    n_chains: int = 3
    n_burnin: int = 15_000
    thin: int = 5
    n_retained: int = 1_000
    seed: int = 0
    target_accept: float = 0.44
    adapt_window: int = 50
    adapt_until: int | None = None   # default: end of burn-in
    save_alpha: bool = False

    def __post_init__(self):
        if self.n_chains < 1 or self.n_retained < 1 or self.thin < 1:
            raise ValueError("chain counts must be positive")
        if self.n_burnin < 0:
            raise ValueError("n_burnin must be non-negative")
        if not 0 < self.target_accept < 1:
            raise ValueError("target_accept must be in (0, 1)")

    @property
    def total_iterations(self) -> int:
        return self.n_burnin + self.thin * self.n_retained

    def replace(self, **kw) -> "ChainConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# Update blocks. All mutate ``state`` in place and share one rng so a fixed
# call order gives reproducible streams.

def n_step_columns(p: int) -> int:
    """Adapted proposal count per AE: alpha columns, beta, and (when a
    design intercept exists) the antithetic intercept-beta move."""
    return p + 1 + (1 if p else 0)


def _beta_prior_moments(state, hyper):
    if hyper.prior_mode is PriorMode.IL:
        j = state.beta.shape[0]
        return np.zeros(j), np.full(j, hyper.il_precision)
    return state.mu[state.z], state.tau[state.z]


def update_regression(state: ModelState, table, hyper: Hyperparams,
                      steps: np.ndarray, rng, accept: np.ndarray | None = None
                      ) -> np.ndarray:
    """One Metropolis scan of the per-AE regression block.

    Passes, in order: random walks on each alpha column, a random walk on
    beta, the antithetic (alpha_j0 + d, beta_j - d) walk, and a beta
    independence proposal from the conditional prior. ``steps`` is
    (J, n_step_columns(P)): per-AE proposal sds for the adapted passes.
    Returns the per-AE log likelihood at the new state. A zero step
    proposes the current value, which is always accepted. ``accept``
    accumulates per-pass acceptance counts when given.
    """
    j, p = state.alpha.shape
    x = table.design_matrix
    vacc = table.vaccine_indicator
    eta = linear_predictor(state.alpha, state.beta, table)
    cur = loglik_cells(eta, table).sum(axis=1)
    for c in range(p):
        prop = state.alpha[:, c] + steps[:, c] * rng.standard_normal(j)
        eta_prop = eta + (prop - state.alpha[:, c])[:, None] * x[:, c][None, :]
        ll = loglik_cells(eta_prop, table).sum(axis=1)
        dprior = -0.5 * hyper.tau_alpha * (prop ** 2 - state.alpha[:, c] ** 2)
        keep = np.log(rng.random(j)) < ll - cur + dprior
        state.alpha[keep, c] = prop[keep]
        eta[keep] = eta_prop[keep]
        cur[keep] = ll[keep]
        if accept is not None:
            accept[:, c] += keep

    b_mean, b_prec = _beta_prior_moments(state, hyper)
    prop = state.beta + steps[:, p] * rng.standard_normal(j)
    eta_prop = eta + (prop - state.beta)[:, None] * vacc[None, :]
    ll = loglik_cells(eta_prop, table).sum(axis=1)
    dprior = -0.5 * b_prec * ((prop - b_mean) ** 2
                              - (state.beta - b_mean) ** 2)
    keep = np.log(rng.random(j)) < ll - cur + dprior
    state.beta[keep] = prop[keep]
    eta[keep] = eta_prop[keep]
    cur[keep] = ll[keep]
    if accept is not None:
        accept[:, p] += keep

    if p:
        # joint move: eta shifts only where the vaccine indicator is 0
        delta = steps[:, p + 1] * rng.standard_normal(j)
        a_prop = state.alpha[:, 0] + delta
        b_prop = state.beta - delta
        eta_prop = eta + delta[:, None] * (x[:, 0] - vacc)[None, :]
        ll = loglik_cells(eta_prop, table).sum(axis=1)
        dprior = -0.5 * hyper.tau_alpha * (a_prop ** 2
                                           - state.alpha[:, 0] ** 2) \
            - 0.5 * b_prec * ((b_prop - b_mean) ** 2
                              - (state.beta - b_mean) ** 2)
        keep = np.log(rng.random(j)) < ll - cur + dprior
        state.alpha[keep, 0] = a_prop[keep]
        state.beta[keep] = b_prop[keep]
        eta[keep] = eta_prop[keep]
        cur[keep] = ll[keep]
        if accept is not None:
            accept[:, p + 1] += keep

    # independence refresh from the conditional prior; the prior ratio
    # cancels the proposal ratio, leaving a pure likelihood test
    prop = b_mean + rng.standard_normal(j) / np.sqrt(b_prec)
    eta_prop = eta + (prop - state.beta)[:, None] * vacc[None, :]
    ll = loglik_cells(eta_prop, table).sum(axis=1)
    keep = np.log(rng.random(j)) < ll - cur
    state.beta[keep] = prop[keep]
    cur[keep] = ll[keep]
    return cur


def update_labels(state: ModelState, hyper: Hyperparams, rng):
    """Exact categorical draw of z_j given beta and the mixture block."""
    with np.errstate(divide="ignore"):
        logw = np.log(state.pi)[None, :] + 0.5 * np.log(state.tau)[None, :] \
            - 0.5 * state.tau[None, :] * (state.beta[:, None]
                                          - state.mu[None, :]) ** 2
    gumb = rng.gumbel(size=logw.shape)
    state.z = np.argmax(logw + gumb, axis=1)


def update_sticks(state: ModelState, hyper: Hyperparams, rng):
    """Conjugate Beta draw: v_k ~ Beta(a0 + m_k, b0 + sum_{h>k} m_h)."""
    k = hyper.k
    if k == 1:
        state.pi = np.ones(1)
        return
    m = np.bincount(state.z, minlength=k).astype(float)
    above = m.sum() - np.cumsum(m)               # counts in components > k
    state.v = rng.beta(hyper.a0 + m[:-1], hyper.b0 + above[:-1])
    state.pi = stick_to_simplex(state.v)


def update_components(state: ModelState, hyper: Hyperparams, rng):
    """Normal then Gamma conjugate draws of (mu_k, tau_k) per component.

    Empty components fall back to their priors because the sufficient
    statistics vanish. tau_k is drawn against the freshly sampled mu_k.
    """
    k = hyper.k
    m = np.bincount(state.z, minlength=k).astype(float)
    sums = np.bincount(state.z, weights=state.beta, minlength=k)
    prec = state.tau_base + m * state.tau
    mean = (state.tau_base * state.mu_base + state.tau * sums) / prec
    state.mu = mean + rng.standard_normal(k) / np.sqrt(prec)
    ss = np.bincount(state.z, weights=(state.beta - state.mu[state.z]) ** 2,
                     minlength=k)
    state.tau = rng.gamma(hyper.r_tau + 0.5 * m,
                          1.0 / (state.lam + 0.5 * ss))


def update_shared(state: ModelState, hyper: Hyperparams, rng,
                  u_step: float) -> bool:
    """Draw mu_base and lam exactly; propose u by reflected random walk.

    Returns whether the u proposal was accepted. Proposals folding onto
    the boundary are rejected (the target density is zero there).
    """
    k = hyper.k
    prec = hyper.tau0 + k * state.tau_base
    state.mu_base = (state.tau_base * state.mu.sum()) / prec \
        + rng.standard_normal() / math.sqrt(prec)
    state.lam = rng.gamma(hyper.r_lambda + k * hyper.r_tau,
                          1.0 / (hyper.lambda0 + state.tau.sum()))
    ss = float(np.sum((state.mu - state.mu_base) ** 2))

    def logt(uu):
        return -k * math.log(uu) - 0.5 * ss / (uu * uu)

    prop = _reflect(state.u + u_step * rng.standard_normal(), 0.0, hyper.f0)
    logu = math.log(rng.random() + 1e-300)
    if prop <= 0.0 or prop >= hyper.f0:
        return False
    if logu < logt(prop) - logt(state.u):
        state.u = prop
        return True
    return False


def _reflect(x: float, lo: float, hi: float) -> float:
    period = 2.0 * (hi - lo)
    t = (x - lo) % period
    return lo + min(t, period - t)


def sweep(state: ModelState, table, hyper: Hyperparams, steps, u_step, rng,
          accept=None) -> tuple[np.ndarray, bool]:
    """One full scan; returns (per-AE log likelihood, u accepted)."""
    ll = update_regression(state, table, hyper, steps, rng, accept)
    u_acc = False
    if hyper.prior_mode is PriorMode.DPM:
        update_labels(state, hyper, rng)
        update_sticks(state, hyper, rng)
        update_components(state, hyper, rng)
        u_acc = update_shared(state, hyper, rng, u_step)
    return ll, u_acc


# ---------------------------------------------------------------------------
# Chains

@dataclass
class ChainDraws:
    beta: np.ndarray             # (T, J)
    z: np.ndarray | None         # (T, J) int16, DPM only
    deviance: np.ndarray         # (T,)
    alpha: np.ndarray | None     # (T, J, P) when saved
    alpha_mean: np.ndarray       # (J, P) running mean over retained draws
    accept_rates: np.ndarray     # (J, n_step_columns(P)) sampling phase
    u_accept_rate: float
    steps: np.ndarray            # (J, n_step_columns(P)) frozen sizes
    u_step: float


def run_chain(table, hyper: Hyperparams, config: ChainConfig,
              chain_index: int) -> ChainDraws:
    """Run one chain to completion; deterministic in (config.seed, index)."""
    rng = np.random.Generator(np.random.Philox(key=config.seed ^ chain_index))
    state = init_state(table, hyper)
    j, p = state.alpha.shape
    steps = np.full((j, n_step_columns(p)), 0.5)
    log_steps = np.log(steps)
    u_step = hyper.f0 / 4.0
    log_u_step = math.log(u_step)
    adapt_until = config.adapt_until
    if adapt_until is None:
        adapt_until = config.n_burnin

    t_out = config.n_retained
    beta_out = np.empty((t_out, j))
    z_out = np.empty((t_out, j), dtype=np.int16) \
        if hyper.prior_mode is PriorMode.DPM else None
    dev_out = np.empty(t_out)
    alpha_out = np.empty((t_out, j, p)) if config.save_alpha else None
    alpha_sum = np.zeros((j, p))

    accept = np.zeros((j, n_step_columns(p)), dtype=np.int64)
    u_accepts = 0
    post_accept = np.zeros((j, n_step_columns(p)), dtype=np.int64)
    post_u = 0
    n_window = 0
    kept = 0
    for it in range(1, config.total_iterations + 1):
        adapting = it <= adapt_until
        ll, u_acc = sweep(state, table, hyper, steps, u_step, rng,
                          accept if adapting else post_accept)
        if not adapting:
            post_u += u_acc
        else:
            u_accepts += u_acc
            if it % config.adapt_window == 0:
                n_window += 1
                gain = 1.0 / math.sqrt(n_window)
                rate = accept / config.adapt_window
                log_steps += gain * (rate - config.target_accept)
                np.clip(log_steps, math.log(STEP_MIN), math.log(STEP_MAX),
                        out=log_steps)
                steps = np.exp(log_steps)
                log_u_step += gain * (u_accepts / config.adapt_window
                                      - config.target_accept)
                log_u_step = min(max(log_u_step, math.log(STEP_MIN)),
                                 math.log(STEP_MAX))
                u_step = math.exp(log_u_step)
                accept[:] = 0
                u_accepts = 0
        if it > config.n_burnin and (it - config.n_burnin) % config.thin == 0:
            dev = -2.0 * float(ll.sum())
            if not np.isfinite(dev):
                bad = np.flatnonzero(~np.isfinite(ll)).tolist()
                raise ChainDivergedError(
                    f"chain {chain_index}: non-finite deviance at "
                    f"iteration {it}",
                    dump={"chain": chain_index, "iteration": it,
                          "bad_aes": bad,
                          "beta_partial": beta_out[:kept].copy(),
                          "deviance_partial": dev_out[:kept].copy()})
            beta_out[kept] = state.beta
            if z_out is not None:
                z_out[kept] = state.z
            dev_out[kept] = dev
            if alpha_out is not None:
                alpha_out[kept] = state.alpha
            alpha_sum += state.alpha
            kept += 1

    n_post = config.total_iterations - adapt_until
    rates = post_accept / n_post if n_post > 0 else np.zeros_like(steps)
    u_rate = post_u / n_post if n_post > 0 else 0.0
    return ChainDraws(beta_out, z_out, dev_out, alpha_out,
                      alpha_sum / max(kept, 1), rates, float(u_rate),
                      steps, u_step)


def _chain_task(args):
    table, hyper, config, idx = args
    return run_chain(table, hyper, config, idx)


@dataclass
class PosteriorDraws:
    """Retained draws from all chains, chain-major."""

    beta: np.ndarray             # (C, T, J)
    z: np.ndarray | None         # (C, T, J) or None for IL fits
    deviance: np.ndarray         # (C, T)
    alpha: np.ndarray | None     # (C, T, J, P) when saved
    alpha_mean: np.ndarray       # (C, J, P)
    ae_index: list[str]
    mode: PriorMode
    k: int
    config: ChainConfig
    acceptance: list[dict]

    @property
    def n_chains(self) -> int:
        return self.beta.shape[0]

    @property
    def n_retained(self) -> int:
        return self.beta.shape[1]

    @property
    def n_aes(self) -> int:
        return self.beta.shape[2]

    def pooled_beta(self) -> np.ndarray:
        return self.beta.reshape(-1, self.n_aes)

    def pooled_z(self) -> np.ndarray:
        if self.z is None:
            raise ValueError("labels unavailable for independent-prior draws")
        return self.z.reshape(-1, self.n_aes)

    def pooled_deviance(self) -> np.ndarray:
        return self.deviance.reshape(-1)

    def beta_posterior_mean(self) -> np.ndarray:
        return self.pooled_beta().mean(axis=0)

    def alpha_posterior_mean(self) -> np.ndarray:
        return self.alpha_mean.mean(axis=0)


def run_chains(table, hyper: Hyperparams, config: ChainConfig,
               n_workers: int = 1) -> PosteriorDraws:
    """Run all chains (optionally in worker processes) and stack draws."""
    tasks = [(table, hyper, config, c) for c in range(config.n_chains)]
    if n_workers > 1 and config.n_chains > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            chains = list(pool.map(_chain_task, tasks))
    else:
        chains = [_chain_task(t) for t in tasks]
    acceptance = []
    for i, ch in enumerate(chains):
        acceptance.append({
            "chain": i,
            "coord_rates": [round(float(r), 6)
                            for r in ch.accept_rates.mean(axis=0)],
            "mean_rate": round(float(ch.accept_rates.mean()), 6),
            "u_rate": round(ch.u_accept_rate, 6),
        })
    return PosteriorDraws(
        beta=np.stack([c.beta for c in chains]),
        z=(np.stack([c.z for c in chains])
           if chains[0].z is not None else None),
        deviance=np.stack([c.deviance for c in chains]),
        alpha=(np.stack([c.alpha for c in chains])
               if chains[0].alpha is not None else None),
        alpha_mean=np.stack([c.alpha_mean for c in chains]),
        ae_index=list(table.ae_index),
        mode=hyper.prior_mode,
        k=hyper.k,
        config=config,
        acceptance=acceptance)


# ---------------------------------------------------------------------------
# Persistence

def _long_frame(draws: PosteriorDraws, values: np.ndarray) -> pd.DataFrame:
    c, t, j = values.shape
    return pd.DataFrame({
        "chain": np.repeat(np.arange(c), t * j),
        "iter": np.tile(np.repeat(np.arange(1, t + 1), j), c),
        "ae_id": np.tile(np.asarray(draws.ae_index, dtype=object), c * t),
        "value": values.reshape(-1),
    })


def save_draws(draws: PosteriorDraws, directory) -> list[Path]:
    """Write draws_beta.csv, draws_z.csv (DPM), deviance.csv,
    alpha_mean.csv, acceptance.json, and meta.json under ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []

    p = directory / "draws_beta.csv"
    _long_frame(draws, draws.beta).to_csv(p, index=False)
    written.append(p)

    if draws.z is not None:
        p = directory / "draws_z.csv"
        frame = _long_frame(draws, draws.z + 1)    # labels 1..K on disk
        frame["value"] = frame["value"].astype(int)
        frame.to_csv(p, index=False)
        written.append(p)

    p = directory / "deviance.csv"
    c, t = draws.deviance.shape
    pd.DataFrame({"chain": np.repeat(np.arange(c), t),
                  "iter": np.tile(np.arange(1, t + 1), c),
                  "value": draws.deviance.reshape(-1)}).to_csv(p, index=False)
    written.append(p)

    p = directory / "alpha_mean.csv"
    cc, j, pp = draws.alpha_mean.shape
    pd.DataFrame({
        "chain": np.repeat(np.arange(cc), j * pp),
        "ae_id": np.tile(np.repeat(np.asarray(draws.ae_index, dtype=object),
                                   max(pp, 1)), cc) if pp else [],
        "coef": np.tile(np.arange(pp), cc * j),
        "value": draws.alpha_mean.reshape(-1),
    }).to_csv(p, index=False)
    written.append(p)

    if draws.alpha is not None:
        p = directory / "draws_alpha.csv"
        c, t, j, pp = draws.alpha.shape
        pd.DataFrame({
            "chain": np.repeat(np.arange(c), t * j * pp),
            "iter": np.tile(np.repeat(np.arange(1, t + 1), j * pp), c),
            "ae_id": np.tile(np.repeat(np.asarray(draws.ae_index,
                                                  dtype=object), pp), c * t),
            "coef": np.tile(np.arange(pp), c * t * j),
            "value": draws.alpha.reshape(-1),
        }).to_csv(p, index=False)
        written.append(p)

    p = directory / "acceptance.json"
    p.write_text(json.dumps(draws.acceptance, indent=2, sort_keys=True) + "\n")
    written.append(p)

    p = directory / "meta.json"
    meta = {
        "mode": draws.mode.value,
        "k": draws.k,
        "n_chains": draws.n_chains,
        "n_retained": draws.n_retained,
        "n_burnin": draws.config.n_burnin,
        "thin": draws.config.thin,
        "seed": draws.config.seed,
        "save_alpha": bool(draws.alpha is not None),
        "n_covariates": int(draws.alpha_mean.shape[2]),
        "ae_index": draws.ae_index,
    }
    p.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    written.append(p)
    return written


def load_draws(directory) -> PosteriorDraws:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    ae_index = meta["ae_index"]
    c, t, j = meta["n_chains"], meta["n_retained"], len(ae_index)
    pp = meta["n_covariates"]

    beta = pd.read_csv(directory / "draws_beta.csv",
                       float_precision="round_trip")["value"] \
        .to_numpy().reshape(c, t, j)
    mode = PriorMode(meta["mode"])
    z = None
    if mode is PriorMode.DPM:
        z = (pd.read_csv(directory / "draws_z.csv")["value"]
             .to_numpy().reshape(c, t, j).astype(np.int16) - 1)
    dev = pd.read_csv(directory / "deviance.csv",
                      float_precision="round_trip")["value"] \
        .to_numpy().reshape(c, t)
    alpha_mean = pd.read_csv(directory / "alpha_mean.csv",
                             float_precision="round_trip")["value"] \
        .to_numpy().reshape(c, j, pp) if pp else np.zeros((c, j, 0))
    alpha = None
    if meta["save_alpha"] and (directory / "draws_alpha.csv").exists():
        alpha = pd.read_csv(directory / "draws_alpha.csv",
                            float_precision="round_trip")["value"] \
            .to_numpy().reshape(c, t, j, pp)
    acceptance = json.loads((directory / "acceptance.json").read_text())
    config = ChainConfig(n_chains=c, n_burnin=meta["n_burnin"],
                         thin=meta["thin"], n_retained=t, seed=meta["seed"],
                         save_alpha=meta["save_alpha"])
    return PosteriorDraws(beta, z, dev, alpha, alpha_mean, ae_index,
                          mode, meta["k"], config, acceptance)

"""INI configuration: one file drives every pipeline stage.

Sections: ``[data]`` input files and exclusion thresholds, ``[model]``
prior hyperparameters, ``[chains]`` the MCMC schedule, ``[signals]`` the
NC rule, ``[enrichment]`` the EOR decision, ``[simulation]`` the synthetic
data generator and study shape. Every key has a default; unknown sections
or keys and unparseable values raise :class:`ConfigError` naming the full
``section.key`` path.
"""
from __future__ import annotations

import configparser
import datetime as dt
from dataclasses import dataclass, field, fields
from pathlib import Path

from .data_model import FilterPolicy
from .errors import ConfigError
from .model import Hyperparams, PriorMode
from .sampler import ChainConfig
from .simulation import MODES, SimulationSpec


@dataclass(frozen=True)
class DataConfig:
    format: str = "canonical"            # canonical | raw
    reports: str | None = None           # canonical CSV
    raw_data: str | None = None
    raw_vax: str | None = None
    raw_symptoms: str | None = None
    target_codes: tuple = ("COVID19",)
    control_codes: tuple = ("FLU3", "FLU4", "FLUA3", "FLUA4", "FLUC3",
                            "FLUC4", "FLUN3", "FLUN4", "FLUR4", "FLUX")
    soc_map: str | None = None
    nc_list: str | None = None
    policy: FilterPolicy = field(default_factory=FilterPolicy)


@dataclass(frozen=True)
class SignalConfig:
    exceed_count: int = 35
    cutoff: float = 0.90
    level: float = 0.95


@dataclass(frozen=True)
class EnrichmentConfig:
    eor_mean_threshold: float = 2.0
    level: float = 0.95


@dataclass(frozen=True)
class FitOptions:
    strict_convergence: bool = True
    rc_threshold: float = 1.2
    rc_frac_required: float = 0.99


@dataclass(frozen=True)
class StudyConfig:
    sigmas: tuple = (0.5,)
    n_replicates: int = 25
    modes: tuple = MODES


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: Hyperparams = field(default_factory=Hyperparams)
    chains: ChainConfig = field(default_factory=ChainConfig)
    fit: FitOptions = field(default_factory=FitOptions)
    signals: SignalConfig = field(default_factory=SignalConfig)
    enrichment: EnrichmentConfig = field(default_factory=EnrichmentConfig)
    simulation: SimulationSpec = field(default_factory=SimulationSpec)
    study: StudyConfig = field(default_factory=StudyConfig)

    def snapshot(self) -> dict:
        """JSON-serializable echo of the effective configuration."""
        def plain(obj):
            if isinstance(obj, (int, float, str, bool)) or obj is None:
                return obj
            if isinstance(obj, dt.date):
                return obj.isoformat()
            if isinstance(obj, PriorMode):
                return obj.value
            if isinstance(obj, (list, tuple)):
                return [plain(o) for o in obj]
            return {f.name: plain(getattr(obj, f.name))
                    for f in fields(obj)}
        return {f.name: plain(getattr(self, f.name)) for f in fields(self)}


def _parse(section, key, text, kind):
    try:
        if kind is bool:
            low = text.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind is dt.date:
            return dt.date.fromisoformat(text.strip())
        if kind == "floats":
            return tuple(float(t) for t in text.replace(",", " ").split())
        if kind == "ints":
            return tuple(int(t) for t in text.replace(",", " ").split())
        if kind == "strs":
            return tuple(t.strip() for t in text.split(",") if t.strip())
        return kind(text.strip())
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{section}.{key}: cannot parse {text!r}") from exc


# (section, key) -> parse kind; values land on the matching dataclass field
_SCHEMA = {
    "data": {
        "format": str, "reports": str, "raw_data": str, "raw_vax": str,
        "raw_symptoms": str, "target_codes": "strs", "control_codes": "strs",
        "soc_map": str, "nc_list": str,
        "min_total_cases": int, "min_target_cases": int,
        "min_control_cases": int, "min_age": float,
        "window_start": dt.date, "window_end": dt.date,
        "target_earliest_date": dt.date,
    },
    "model": {
        "mode": str, "k": int, "tau_alpha": float, "tau0": float,
        "f0": float, "a0": float, "b0": float, "r_tau": float,
        "r_lambda": float, "lambda0": float, "il_precision": float,
    },
    "chains": {
        "n_chains": int, "n_burnin": int, "thin": int, "n_retained": int,
        "seed": int, "target_accept": float, "adapt_window": int,
        "adapt_until": int, "save_alpha": bool,
        "strict_convergence": bool, "rc_threshold": float,
        "rc_frac_required": float,
    },
    "signals": {"exceed_count": int, "cutoff": float, "level": float},
    "enrichment": {"eor_mean_threshold": float, "level": float},
    "simulation": {
        "cluster_means": "floats", "cluster_sizes": "ints", "sigma": float,
        "sigmas": "floats", "intercept_mean": float, "intercept_sd": float,
        "intercept_pool": "floats", "n_target": int, "n_control": int,
        "n_replicates": int, "modes": "strs",
    },
}

_POLICY_KEYS = ("min_total_cases", "min_target_cases", "min_control_cases",
                "min_age", "window_start", "window_end",
                "target_earliest_date")
_FIT_KEYS = ("strict_convergence", "rc_threshold", "rc_frac_required")
_STUDY_KEYS = ("sigmas", "n_replicates", "modes")


def load_config(path=None) -> RunConfig:
    """Read an INI file into a :class:`RunConfig`; no file gives defaults."""
    raw: dict[str, dict[str, object]] = {s: {} for s in _SCHEMA}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}")
        except configparser.Error as exc:
            raise ConfigError(f"malformed config file {path}: {exc}")
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                kind = _SCHEMA[section].get(key)
                if kind is None:
                    raise ConfigError(f"unknown config key {section}.{key}")
                raw[section][key] = _parse(section, key, text, kind)

    try:
        return _build(raw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def _build(raw: dict) -> RunConfig:
    d = dict(raw["data"])
    policy_kw = {k: d.pop(k) for k in list(d) if k in _POLICY_KEYS}
    if d.get("format", "canonical") not in ("canonical", "raw"):
        raise ConfigError(f"data.format: expected canonical or raw, "
                          f"got {d.get('format')!r}")
    data = DataConfig(policy=FilterPolicy(**policy_kw), **d)

    m = dict(raw["model"])
    mode_name = m.pop("mode", "dpm")
    if mode_name not in (*MODES, "il"):
        raise ConfigError(f"model.mode: expected one of {MODES}, "
                          f"got {mode_name!r}")
    hyper = Hyperparams(**m)
    if mode_name.startswith("il"):
        prec = {"il": hyper.il_precision, "il-informative": 0.1,
                "il-vague": 0.01}[mode_name]
        if "il_precision" in m:
            prec = m["il_precision"]
        hyper = hyper.replace(prior_mode=PriorMode.IL, il_precision=prec)

    c = dict(raw["chains"])
    fit_kw = {k: c.pop(k) for k in list(c) if k in _FIT_KEYS}
    chains = ChainConfig(**c)
    fit = FitOptions(**fit_kw)

    signals = SignalConfig(**raw["signals"])
    enrichment = EnrichmentConfig(**raw["enrichment"])

    s = dict(raw["simulation"])
    study_kw = {k: s.pop(k) for k in list(s) if k in _STUDY_KEYS}
    sim = SimulationSpec(**s)
    study_kw.setdefault("sigmas", (sim.sigma,))
    study = StudyConfig(**study_kw)
    for mode in study.modes:
        if mode not in MODES:
            raise ConfigError(f"simulation.modes: unknown model {mode!r}")
    return RunConfig(data, hyper, chains, fit, signals, enrichment, sim,
                     study)

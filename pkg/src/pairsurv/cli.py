"""Command-line front end: ``pairsurv <command> --config run.json --out DIR``.

Commands: ``trajectory``, ``simulate``, ``fit``, ``score``, ``ppc``, ``study``.
Each run reads one JSON config (paths inside it are relative to the config
file), writes its outputs to ``--out`` and records a ``manifest.json``
with the resolved config, input digests, seed, version and timestamps.

Exit codes: 0 success, 2 validation error, 3 success with convergence
warnings (or failed study replicates), 4 runtime failure.
"""
from __future__ import annotations

import argparse
import copy
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
from typing import Any, Dict, List, Optional

import numpy as np

from . import __version__, diagnostics, epimodel, simstudy
from .charmap import CharacterizationMap, TestPerformance, map_by_name
from .data import STREAM_TESTS, SurveillanceDataset, normalize_streams, read_csv
from .epimodel import LABELS, SIBR, SIR
from .errors import (InvalidInputError, NonConvergenceError, OutOfRangeError, SchemaError)
from .inference import mcmc as mcmc_mod
from .inference.likelihood import ThetaVector, seed_state
from .inference.mle import mle_fit
from .inference.priors import BetaPrior, DirichletPrior, GammaPrior, NormalPrior, PriorSpec
from .inference.space import ParameterSpace
from .inference.summary import convergence_warnings, summarize

log = logging.getLogger("pairsurv")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_WARNING = 3
EXIT_RUNTIME = 4

COMMANDS = ("trajectory", "simulate", "fit", "score", "ppc", "study")
_REQUIRED = object()


class ConfigError(InvalidInputError):
    """A config field failed validation; the message starts with the field path."""


# -- config access ---------------------------------------------------------------------


def _field(section: dict, key: str, path: str, default=_REQUIRED):
    if not isinstance(section, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object")
    if key in section and section[key] is not None:
        return section[key]
    if default is _REQUIRED:
        raise ConfigError(f"{_join(path, key)}: required field is missing")
    return default


def _join(path, key):
    return f"{path}.{key}" if path else str(key)


def _number(value, path, positive=False, lo=None, hi=None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    x = float(value)
    if not math.isfinite(x):
        raise ConfigError(f"{path}: must be finite")
    if positive and not x > 0:
        raise ConfigError(f"{path}: must be positive, got {x}")
    if lo is not None and x < lo or hi is not None and x > hi:
        raise ConfigError(f"{path}: must lie in [{lo}, {hi}], got {x}")
    return x


def _integer(value, path, minimum=None) -> int:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or float(value) != int(value):
        raise ConfigError(f"{path}: expected an integer, got {value!r}")
    if minimum is not None and int(value) < minimum:
        raise ConfigError(f"{path}: must be at least {minimum}, got {value}")
    return int(value)


def _vector(value, path, size=None) -> List[float]:
    if not isinstance(value, list):
        raise ConfigError(f"{path}: expected a list")
    if size is not None and len(value) != size:
        raise ConfigError(f"{path}: expected {size} entries, got {len(value)}")
    return [_number(v, f"{path}[{k}]") for k, v in enumerate(value)]


def _wrap(path, fn, *args, **kwargs):
    """Run a constructor and prefix its validation error with the config path."""
    try:
        return fn(*args, **kwargs)
    except ConfigError:
        raise
    except InvalidInputError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def apply_overrides(config: dict, overrides: List[str]) -> dict:
    """Apply ``key.path=value`` overrides; values parse as JSON, else stay strings."""
    config = copy.deepcopy(config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        if isinstance(value, (dict, list)):
            raise ConfigError(f"--set {key}: only scalar keys can be overridden")
        node = config
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not an object")
        node[parts[-1]] = value
    return config


# -- model pieces from config ----------------------------------------------------------


def parse_model(cfg: dict, path="") -> str:
    model = str(_field(cfg, "model", path, SIBR)).lower()
    if model not in LABELS:
        raise ConfigError(f"{_join(path, 'model')}: expected 'sir' or 'sibr', got {model!r}")
    return model


def parse_rates(cfg: dict, model: str, path: str) -> Dict[str, float]:
    p = _field(cfg, "params", path)
    pp = _join(path, "params")
    gamma = _number(_field(p, "gamma", pp), _join(pp, "gamma"), positive=True)
    if "beta" in p:
        beta = _number(p["beta"], _join(pp, "beta"), positive=True)
    else:
        beta = _number(_field(p, "r0", pp), _join(pp, "r0"), positive=True) * gamma
    out = {"beta": beta, "gamma": gamma}
    if model == SIBR:
        out["eta"] = _number(_field(p, "eta", pp), _join(pp, "eta"), positive=True)
    return out


def parse_initial(cfg: dict, model: str, path: str) -> tuple:
    init = _field(cfg, "initial_state", path, None)
    if init is None:
        return seed_state(model)
    vec = _vector(init, _join(path, "initial_state"), len(LABELS[model]))
    _wrap(_join(path, "initial_state"), epimodel.as_state, model, vec)
    return tuple(vec)


def parse_map(cfg: dict, path: str, base: "Run", default: str) -> CharacterizationMap:
    spec = _field(cfg, "map", path, default)
    mp = _join(path, "map")
    if isinstance(spec, str):
        return _wrap(mp, map_by_name, spec)
    if isinstance(spec, dict) and "file" in spec:
        text = base.read_text(spec["file"])
        return _wrap(mp, CharacterizationMap.from_json, text)
    if isinstance(spec, dict):
        return _wrap(mp, CharacterizationMap.from_dict, spec)
    raise ConfigError(f"{mp}: expected a map name, a map object or {{'file': path}}")


def map_label(cfg: dict, default: str) -> str:
    spec = cfg.get("map", default)
    return spec if isinstance(spec, str) else "custom"


def _gamma_prior(spec, path) -> GammaPrior:
    if not isinstance(spec, dict):
        raise ConfigError(f"{path}: expected {{mean, variance}} or {{shape, rate}}")
    if "shape" in spec:
        return _wrap(path, GammaPrior, _number(spec["shape"], f"{path}.shape", True),
                     _number(_field(spec, "rate", path), f"{path}.rate", True))
    return _wrap(path, GammaPrior.from_moments,
                 _number(_field(spec, "mean", path), f"{path}.mean", True),
                 _number(_field(spec, "variance", path), f"{path}.variance", True))


def _perf_entry(value, path, estimate: bool):
    if isinstance(value, dict):
        if not estimate:
            raise ConfigError(f"{path}: Beta priors need performance mode 'estimate'")
        ab = _vector(_field(value, "beta", path), f"{path}.beta", 2)
        return _wrap(path, BetaPrior, ab[0], ab[1])
    return _number(value, path, lo=0.0, hi=1.0)


def parse_priors(cfg: dict, model: str, num_tests: int, path="") -> PriorSpec:
    pr = _field(cfg, "priors", path, {})
    ppath = _join(path, "priors")
    kwargs: Dict[str, Any] = {}
    for name in ("r0", "gamma", "eta"):
        if name in pr:
            kwargs[name] = _gamma_prior(pr[name], _join(ppath, name))
    if model == SIR:
        kwargs["eta"] = None
    if "tau0" in pr:
        t = pr["tau0"]
        tp = _join(ppath, "tau0")
        if isinstance(t, dict):
            kwargs["tau0"] = _wrap(tp, NormalPrior, _number(_field(t, "mean", tp), f"{tp}.mean"),
                                   _number(_field(t, "variance", tp), f"{tp}.variance", True))
        else:
            kwargs["tau0"] = _number(t, tp)
    if "initial_state" in pr and pr["initial_state"] is not None:
        s = pr["initial_state"]
        sp = _join(ppath, "initial_state")
        if isinstance(s, dict):
            conc = _vector(_field(s, "dirichlet", sp), f"{sp}.dirichlet", len(LABELS[model]))
            kwargs["initial_state"] = _wrap(sp, DirichletPrior, tuple(conc))
        else:
            vec = _vector(s, sp, len(LABELS[model]))
            _wrap(sp, epimodel.as_state, model, vec)
            kwargs["initial_state"] = tuple(vec)

    perf = _field(cfg, "performance", path, {})
    pf = _join(path, "performance")
    mode = str(_field(perf, "mode", pf, "fixed"))
    if mode not in ("fixed", "estimate"):
        raise ConfigError(f"{pf}.mode: expected 'fixed' or 'estimate', got {mode!r}")
    estimate = mode == "estimate"
    defaults = {"sensitivity": [1.0] * num_tests, "specificity": [1.0] * num_tests}
    if estimate and num_tests == 2:
        defaults = {"sensitivity": [1.0, {"beta": [7, 6]}], "specificity": [1.0, {"beta": [41, 1]}]}
    for kind in ("sensitivity", "specificity"):
        values = _field(perf, kind, pf, defaults[kind])
        kp = f"{pf}.{kind}"
        if not isinstance(values, list) or len(values) != num_tests:
            raise ConfigError(f"{kp}: expected {num_tests} entries (one per test)")
        kwargs[kind] = tuple(_perf_entry(v, f"{kp}[{k}]", estimate) for k, v in enumerate(values))
    if estimate and not any(isinstance(v, BetaPrior) for k in ("sensitivity", "specificity")
                            for v in kwargs[k]):
        raise ConfigError(f"{pf}: mode 'estimate' needs at least one Beta prior entry")
    return _wrap(ppath, lambda: PriorSpec(**kwargs))


def parse_mcmc(cfg: dict, seed: int, path="mcmc") -> mcmc_mod.McmcConfig:
    m = cfg.get("mcmc") or {}
    if not isinstance(m, dict):
        raise ConfigError(f"{path}: expected an object")
    kwargs = {}
    for key, minimum in (("chains", 2), ("iterations", 1000), ("thin", 1), ("init_candidates", 1),
                         ("init_retries", 1), ("init_climbs", 1), ("adapt_every", 1)):
        if key in m:
            kwargs[key] = _integer(m[key], f"{path}.{key}", minimum)
    if m.get("burn_in") is not None:
        kwargs["burn_in"] = _integer(m["burn_in"], f"{path}.burn_in", 0)
    if "optimize_init" in m:
        kwargs["optimize_init"] = bool(m["optimize_init"])
    return _wrap(path, lambda: mcmc_mod.McmcConfig(seed=seed, **kwargs))


# -- run bookkeeping -------------------------------------------------------------------


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, tuples become lists."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2) + "\n"


class Run:
    """One command invocation: resolved config, base directory, inputs read, outputs written."""

    def __init__(self, command: str, config: dict, base_dir: str, out_dir: str, seed: int,
                 threads: int):
        self.command = command
        self.config = config
        self.base_dir = base_dir
        self.out_dir = out_dir
        self.seed = seed
        self.threads = threads
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.started = _now()

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)

    def read_bytes(self, path: str) -> bytes:
        full = self.resolve(path)
        try:
            with open(full, "rb") as fh:
                raw = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"input file not found: {path}") from None
        self.inputs[path] = hashlib.sha256(raw).hexdigest()
        return raw

    def read_text(self, path: str) -> str:
        return self.read_bytes(path).decode("utf-8")

    def write(self, name: str, text: str) -> None:
        data = text.encode("utf-8")
        with open(os.path.join(self.out_dir, name), "wb") as fh:
            fh.write(data)
        self.outputs[name] = hashlib.sha256(data).hexdigest()

    def manifest(self, exit_code: int, error: Optional[str] = None) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "seed": self.seed,
            "version": __version__,
            "started": self.started,
            "finished": _now(),
            "exit_code": exit_code,
            "error": error,
        }


# -- commands ----------------------------------------------------------------------------


def cmd_trajectory(run: Run) -> int:
    cfg = run.config
    model = parse_model(cfg)
    rates = parse_rates(cfg, model, "")
    params = _wrap("params", epimodel.make_params, model, **rates)
    init = parse_initial(cfg, model, "")
    t0 = _number(_field(cfg, "t0", "", 0.0), "t0")
    t_end = _number(_field(cfg, "t_end", "", 120.0), "t_end")
    step = _number(_field(cfg, "step", "", epimodel.DEFAULT_STEP), "step", positive=True)
    traj = _wrap("t_end", epimodel.integrate, model, params, init, t0, t_end, step)
    lines = ["time," + ",".join(traj.labels)]
    for t, row in zip(traj.grid, traj.values):
        lines.append(",".join([format(float(t), ".17g")] + [format(float(v), ".17g") for v in row]))
    run.write("trajectory.csv", "\n".join(lines) + "\n")
    return EXIT_OK


def _truth_theta(cfg: dict, path: str, num_tests: int) -> ThetaVector:
    model = parse_model(cfg, path)
    rates = parse_rates(cfg, model, path)
    init = parse_initial(cfg, model, path)
    tau0 = _number(_field(cfg, "tau0", path, 0.0), _join(path, "tau0"))
    sens = _vector(_field(cfg, "sensitivity", path, [1.0] * num_tests), _join(path, "sensitivity"), num_tests)
    spec = _vector(_field(cfg, "specificity", path, [1.0] * num_tests), _join(path, "specificity"), num_tests)
    return _wrap(path, lambda: ThetaVector(model, rates["beta"], rates["gamma"], rates.get("eta"),
                                           tau0, init, tuple(sens), tuple(spec)))


def _schedule(cfg: dict, rng) -> tuple:
    """(schedule, design or None, streams) from a ``design`` or an explicit ``schedule``."""
    if "design" in cfg and "schedule" in cfg:
        raise ConfigError("design/schedule: give one of them, not both")
    if "design" in cfg:
        d = cfg["design"]
        dp = "design"
        design = _wrap(dp, lambda: simstudy.StudyDesign(
            _integer(_field(d, "total_samples", dp), f"{dp}.total_samples"),
            str(_field(d, "cadence", dp)), str(_field(d, "allocation", dp, "equal")),
            str(_field(d, "streams", dp, "paired"))))
        return simstudy.draw_schedule(design, rng), design, design.streams
    s = _field(cfg, "schedule", "")
    days = _vector(_field(s, "days", "schedule"), "schedule.days")
    counts = [_integer(c, f"schedule.counts[{k}]", 0)
              for k, c in enumerate(_field(s, "counts", "schedule"))]
    if len(counts) != len(days):
        raise ConfigError("schedule.counts: need one count per day")
    streams = _wrap("schedule.streams", normalize_streams, _field(s, "streams", "schedule", "paired"))
    sched = simstudy.SamplingSchedule(tuple((d, d) for d in days), tuple(days), tuple(counts))
    return sched, None, streams


def cmd_simulate(run: Run) -> int:
    cfg = run.config
    truth_cfg = _field(cfg, "truth", "", {})
    cmap = parse_map(truth_cfg, "truth", run, "sibr")
    theta = _truth_theta(truth_cfg, "truth", cmap.num_tests)
    from .inference.likelihood import check_map_model
    _wrap("truth.map", check_map_model, cmap, theta.model)
    rng = np.random.default_rng(run.seed)
    sched, design, streams = _schedule(cfg, rng)
    step = _number(_field(cfg, "step", "", epimodel.DEFAULT_STEP), "step", positive=True)
    times = sched.times()
    t_end = max(float(times.max()) if times.size else 0.0, theta.tau0) + step
    traj = theta.trajectory(t_end, step)
    data = simstudy.simulate_dataset(traj, sched, cmap, theta.performance(), streams, rng)
    run.write("data.csv", data.to_csv())
    truth = {
        "model": theta.model,
        "map": cmap.to_dict(),
        "parameters": {"beta": theta.beta, "gamma": theta.gamma, "eta": theta.eta,
                       "r0": theta.r0, "tau0": theta.tau0},
        "initial_state": list(theta.initial_state),
        "sensitivity": list(theta.sensitivity),
        "specificity": list(theta.specificity),
        "design": None if design is None else {
            "design_id": design.design_id, "total_samples": design.total_samples,
            "cadence": design.cadence, "allocation": design.allocation, "streams": design.streams},
        "schedule": {"days": list(sched.days), "counts": list(sched.counts)},
        "streams": streams,
        "seed": run.seed,
    }
    run.write("truth.json", dump_json(truth))
    return EXIT_OK


class _Columns:
    """Minimal chain-like view used to summarize derived quantities."""

    def __init__(self, names, columns):
        self.names = tuple(names)
        self._cols = columns

    def column(self, name):
        return self._cols[name]


def _reported(chains) -> Dict[str, dict]:
    """Headline quantities: R0, infectious days (1/gamma), broad recovery days (1/eta), tau0."""
    views = []
    for c in chains:
        cols = {"r0": c.column("r0"), "infectious_days": 1.0 / c.column("gamma")}
        if "eta" in c.names:
            cols["broad_recovery_days"] = 1.0 / c.column("eta")
        if "tau0" in c.names:
            cols["tau0"] = c.column("tau0")
        views.append(_Columns(cols.keys(), cols))
    return summarize(views)


class FitSetup:
    def __init__(self, run: Run, cfg: dict):
        self.model = parse_model(cfg)
        self.cmap = parse_map(cfg, "", run, "sibr" if self.model == SIBR else "sir-i")
        self.map_label = map_label(cfg, "sibr" if self.model == SIBR else "sir-i")
        from .inference.likelihood import check_map_model
        _wrap("map", check_map_model, self.cmap, self.model)
        self.streams = _wrap("streams", normalize_streams, _field(cfg, "streams", "", "paired"))
        self.method = str(_field(cfg, "method", "", "bayes"))
        if self.method not in ("bayes", "mle"):
            raise ConfigError(f"method: expected 'bayes' or 'mle', got {self.method!r}")
        self.priors = parse_priors(cfg, self.model, self.cmap.num_tests)
        self.space = _wrap("priors", ParameterSpace, self.model, self.priors, self.cmap.tests)
        self.step = _number(_field(cfg, "step", "", epimodel.DEFAULT_STEP), "step", positive=True)
        self.data_path = _field(cfg, "data", "")
        if not isinstance(self.data_path, str):
            raise ConfigError("data: expected a file path")

    def load_data(self, run: Run, path: Optional[str] = None) -> SurveillanceDataset:
        path = path or self.data_path
        text = run.read_text(path)
        data = read_csv(text, from_text=True)
        if data.tests != self.cmap.tests:
            raise SchemaError(f"{path}: test columns {data.tests} do not match map tests {self.cmap.tests}")
        return data


def cmd_fit(run: Run) -> int:
    cfg = run.config
    setup = FitSetup(run, cfg)
    data = setup.load_data(run).select_streams(setup.streams)
    epoch = cfg.get("epoch")
    if epoch is not None:
        try:
            epoch_date = dt.date.fromisoformat(str(epoch))
        except ValueError:
            raise ConfigError(f"epoch: expected an ISO date, got {epoch!r}") from None
    base = {"method": setup.method, "model": setup.model, "map": setup.map_label,
            "streams": setup.streams, "records": len(data)}

    if setup.method == "mle":
        m = cfg.get("mle") or {}
        starts = _integer(m.get("starts", 8), "mle.starts", 1)
        max_iters = _integer(m.get("max_iters", 4000), "mle.max_iters", 1)
        code = EXIT_OK
        try:
            res = mle_fit(data, setup.cmap, setup.model, setup.priors, starts, max_iters, run.seed,
                          setup.step)
            report = res.report()
            report["converged"] = True
        except NonConvergenceError as exc:
            if exc.best is None:
                raise
            log.warning("%s", exc)
            z = np.asarray(exc.best.x, dtype=float)
            report = {"estimate": dict(zip(setup.space.output_names, setup.space.natural(z).tolist())),
                      "log_likelihood": -float(exc.best.fun), "converged": False,
                      "message": str(exc)}
            code = EXIT_WARNING
        run.write("mle.json", dump_json(report))
        est = report["estimate"]
        reported = {"r0": est["r0"], "infectious_days": 1.0 / est["gamma"]}
        if "eta" in est:
            reported["broad_recovery_days"] = 1.0 / est["eta"]
        if "tau0" in est:
            reported["tau0"] = est["tau0"]
        summary = {**base, "reported": reported, "boundary": report.get("boundary"),
                   "boundary_reasons": report.get("boundary_reasons", [])}
        if epoch is not None and "tau0" in est:
            summary["outbreak_date"] = (epoch_date + dt.timedelta(days=round(est["tau0"]))).isoformat()
        run.write("summary.json", dump_json(summary))
        return code

    mcfg = parse_mcmc(cfg, run.seed)
    chains = mcmc_mod.posterior_sample(data, setup.cmap, setup.model, setup.priors, mcfg,
                                       setup.step, workers=run.threads)
    run.write("posterior.csv", mcmc_mod.chains_to_csv(chains))
    params = summarize(chains)
    warns = convergence_warnings(params)
    rhats = [e["rhat"] for e in params.values() if "rhat" in e]
    esss = [e["ess"] for e in params.values() if "ess" in e]
    summary = {
        **base,
        "mcmc": {"chains": mcfg.chains, "iterations": mcfg.iterations, "burn_in": mcfg.burn,
                 "thin": mcfg.thin, "seed": mcfg.seed},
        "reported": _reported(chains),
        "parameters": params,
        "convergence": {"max_rhat": max(rhats) if rhats else None,
                        "min_ess": min(esss) if esss else None,
                        "acceptance_rates": [c.acceptance_rate for c in chains],
                        "warnings": warns},
    }
    if epoch is not None and "tau0" in params:
        summary["outbreak_date"] = (epoch_date + dt.timedelta(days=round(params["tau0"]["mean"]))).isoformat()
    run.write("summary.json", dump_json(summary))
    return EXIT_WARNING if warns else EXIT_OK


def _load_fit(run: Run, fit_dir: str):
    """Fit setup and chains (MLE fits become a single one-draw chain)."""
    manifest = json.loads(run.read_text(os.path.join(fit_dir, "manifest.json")))
    if manifest.get("command") != "fit":
        raise ConfigError(f"{fit_dir}: not a fit output directory")
    fit_cfg = manifest["config"]
    # the fit's relative paths are relative to its own config directory
    fit_base = manifest.get("base_dir", run.base_dir)
    sub = Run("fit", fit_cfg, fit_base, fit_dir, run.seed, 1)
    setup = FitSetup(sub, fit_cfg)
    if setup.method == "mle":
        est = json.loads(run.read_text(os.path.join(fit_dir, "mle.json")))["estimate"]
        z = setup.space.coords_from_row(est)
        draws = setup.space.natural(z)[None, :]
        chains = [mcmc_mod.PosteriorChain(0, tuple(setup.space.output_names), draws, np.zeros(1),
                                          np.ones(1, dtype=np.int64), math.nan, 0, 1, setup.space)]
    else:
        text = run.read_text(os.path.join(fit_dir, "posterior.csv"))
        chains = mcmc_mod.chains_from_csv(text, setup.space)
    return setup, sub, chains


def _fit_dirs(run: Run, key="fits") -> List[dict]:
    fits = run.config.get(key)
    if fits is None:
        raise ConfigError(f"{key}: give at least one fit directory (--fit DIR)")
    if not isinstance(fits, list) or not fits:
        raise ConfigError(f"{key}: expected a non-empty list")
    out = []
    for k, f in enumerate(fits):
        f = {"dir": f} if isinstance(f, str) else f
        _field(f, "dir", f"{key}[{k}]")
        out.append(f)
    return out


def _scoring_data(run: Run, setup: FitSetup, sub: Run) -> SurveillanceDataset:
    path = run.config.get("data")
    if path is not None:
        text = run.read_text(path)
        data = read_csv(text, from_text=True)
        if data.tests != setup.cmap.tests:
            raise SchemaError(f"{path}: test columns {data.tests} do not match map tests {setup.cmap.tests}")
        return data
    data = setup.load_data(sub)
    run.inputs.update({f"fit:{k}": v for k, v in sub.inputs.items()})
    return data


def cmd_score(run: Run) -> int:
    reports = []
    max_draws = run.config.get("max_draws")
    if max_draws is not None:
        max_draws = _integer(max_draws, "max_draws", 1)
    for k, f in enumerate(_fit_dirs(run)):
        setup, sub, chains = _load_fit(run, run.resolve(f["dir"]))
        data = _scoring_data(run, setup, sub)
        # an SIR fit only speaks to the streams it was fitted on
        if setup.model == SIR:
            scored = [setup.cmap.tests[j] for j in STREAM_TESTS[setup.streams]]
        else:
            scored = list(setup.cmap.tests)
        rep = diagnostics.log_score(chains, data, setup.cmap, setup.model, scored,
                                    label=f.get("label", setup.map_label.upper()),
                                    data_config=f.get("data_config", setup.streams),
                                    location=str(run.config.get("location", "")),
                                    max_draws=max_draws, step=setup.step)
        if rep.infinite_records:
            log.warning("fit %s: zero-probability observations for %s", f["dir"],
                        ", ".join(rep.infinite_records[:10]))
        reports.append(rep)
    tests = {r.tests for r in reports}
    if len(tests) > 1:
        raise SchemaError("fits use different test names; score them separately")
    run.write("scores.csv", diagnostics.score_table(reports))
    return EXIT_OK


def cmd_ppc(run: Run) -> int:
    cfg = run.config
    fits = _fit_dirs(run)
    if len(fits) != 1:
        raise ConfigError("fits: posterior predictive checks take exactly one fit")
    setup, sub, chains = _load_fit(run, run.resolve(fits[0]["dir"]))
    data = _scoring_data(run, setup, sub)
    n_reps = _integer(cfg.get("n_reps", 1000), "n_reps", 1)
    bin_width = _number(cfg.get("bin_width", diagnostics.DEFAULT_BIN_WIDTH), "bin_width", positive=True)
    summary = diagnostics.posterior_predictive(chains, data, setup.cmap, setup.model, n_reps,
                                               bin_width, run.seed, setup.step)
    run.write("ppc.csv", summary.to_csv())
    report = {"n_reps": summary.n_reps, "bin_width": summary.bin_width,
              "coverage": summary.coverage(),
              "coverage_by_test": {t: summary.coverage(t) for t in setup.cmap.tests},
              "dropped_bins": [{"test": t, "bin_start": a, "bin_end": b} for t, a, b in summary.dropped]}
    run.write("ppc_summary.json", dump_json(report))
    return EXIT_OK


def _study_designs(cfg) -> List[simstudy.StudyDesign]:
    spec = cfg.get("designs", "all")
    if spec == "all":
        return simstudy.enumerate_designs()
    if not isinstance(spec, list) or not spec:
        raise ConfigError("designs: expected 'all' or a non-empty list")
    out = []
    for k, d in enumerate(spec):
        path = f"designs[{k}]"
        if isinstance(d, str):
            out.append(_wrap(path, simstudy.StudyDesign.from_id, d))
        elif isinstance(d, dict):
            out.append(_wrap(path, lambda: simstudy.StudyDesign(
                _integer(_field(d, "total_samples", path), f"{path}.total_samples"),
                str(_field(d, "cadence", path)), str(_field(d, "allocation", path, "equal")),
                str(_field(d, "streams", path, "paired")))))
        else:
            raise ConfigError(f"{path}: expected a design id or object")
    return out


def cmd_study(run: Run) -> int:
    cfg = run.config
    designs = _study_designs(cfg)
    n_reps = _integer(cfg.get("n_reps", 50), "n_reps", 1)
    truth = cfg.get("truth") or {}
    kwargs = {}
    for name in ("beta", "gamma", "eta"):
        if name in truth:
            kwargs[name] = _number(truth[name], f"truth.{name}", positive=True)
    if "initial_state" in truth:
        kwargs["initial_state"] = tuple(_vector(truth["initial_state"], "truth.initial_state", 4))
    mcfg = parse_mcmc({"mcmc": {"chains": 4, "iterations": 20000, "thin": 10, **(cfg.get("mcmc") or {})}},
                      run.seed)
    study_cfg = _wrap("truth", lambda: simstudy.StudyConfig(mcmc=mcfg, **kwargs))
    result = simstudy.run_study(designs, n_reps, study_cfg, workers=run.threads, master_seed=run.seed)
    run.write("designs.csv", simstudy.designs_csv(designs))
    run.write("results.csv", result.results_csv())
    run.write("aggregate.csv", result.aggregate_csv())
    if result.n_failed:
        log.warning("%d of %d replicates failed", result.n_failed, len(result.replicates))
        return EXIT_WARNING
    return EXIT_OK


HANDLERS = {"trajectory": cmd_trajectory, "simulate": cmd_simulate, "fit": cmd_fit,
            "score": cmd_score, "ppc": cmd_ppc, "study": cmd_study}


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; paths inside are relative to it")
    common.add_argument("--out", help="output directory (default: ./<command>-out)")
    common.add_argument("--seed", type=int, help="master seed (overrides config 'seed')")
    common.add_argument("--threads", type=int, default=1, help="parallel workers (default 1)")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a scalar config key, e.g. mcmc.iterations=2000")
    parser = argparse.ArgumentParser(prog="pairsurv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pairsurv {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("trajectory", parents=[common], help="integrate SIR/SIBR dynamics to CSV")
    sub.add_parser("simulate", parents=[common], help="simulate a surveillance dataset")
    p = sub.add_parser("fit", parents=[common], help="fit a model (MCMC or maximum likelihood)")
    p.add_argument("--data", help="dataset CSV (overrides config 'data')")
    p.add_argument("--streams", help="paired, pcr or serology (overrides config 'streams')")
    for name, text in (("score", "log-score fitted models"), ("ppc", "posterior predictive check")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--fit", action="append", help="fit output directory (repeatable)")
        p.add_argument("--data", help="dataset CSV to score (default: the fit's data)")
    sub.add_parser("study", parents=[common], help="run the sampling-design study")
    return parser


def _load_config(args) -> tuple:
    if args.config:
        try:
            with open(args.config, "rb") as fh:
                raw = fh.read()
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {args.config}") from None
        try:
            config = json.loads(raw.decode("utf-8"))
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(config, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        base = os.path.dirname(os.path.abspath(args.config))
        return config, base, hashlib.sha256(raw).hexdigest()
    return {}, os.getcwd(), None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    out_dir = args.out or f"{args.command}-out"
    run = None
    try:
        config, base, digest = _load_config(args)
        config = apply_overrides(config, args.set)
        if getattr(args, "data", None):
            config["data"] = os.path.relpath(os.path.abspath(args.data), base)
        if getattr(args, "streams", None):
            config["streams"] = args.streams
        if getattr(args, "fit", None):
            config["fits"] = [os.path.relpath(os.path.abspath(f), base) for f in args.fit]
        seed = args.seed if args.seed is not None else config.get("seed", 0)
        seed = _integer(seed, "seed", 0)
        config["seed"] = seed
        if args.threads < 1:
            raise ConfigError("--threads: must be at least 1")
        os.makedirs(out_dir, exist_ok=True)
        run = Run(args.command, config, base, out_dir, seed, args.threads)
        if digest is not None:
            run.inputs[os.path.basename(args.config)] = digest
        code = HANDLERS[args.command](run)
        error = None
    except (InvalidInputError, SchemaError, OutOfRangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        code, error = EXIT_VALIDATION, str(exc)
    except Exception as exc:  # runtime failure: report and exit nonzero
        log.debug("runtime failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        code, error = EXIT_RUNTIME, f"{type(exc).__name__}: {exc}"
    if run is not None:
        manifest = run.manifest(code, error)
        manifest["base_dir"] = run.base_dir
        with open(os.path.join(run.out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(dump_json(manifest))
    return code


if __name__ == "__main__":
    sys.exit(main())

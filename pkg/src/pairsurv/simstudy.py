"""Simulation study over surveillance designs.

A design fixes the total sample size, the sampling cadence over a 90-day
horizon, how samples are allocated across periods, and which test streams
are kept.  Each replicate draws a schedule, simulates a dataset from a known
SIBR trajectory, fits the SIBR model and scores the posterior against the
truth with relative CRPS.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import epimodel
from .charmap import CharacterizationMap, TestPerformance, outcome_vectors, sibr_map
from .data import SurveillanceDataset, normalize_streams
from .epimodel import SIBR, Trajectory
from .errors import InvalidInputError
from .inference.mcmc import McmcConfig, posterior_sample
from .inference.priors import NormalPrior, PriorSpec
from .inference.summary import RHAT_WARN, summarize

log = logging.getLogger(__name__)

SIZES = (10, 50, 100, 200, 500)
CADENCES = ("monthly", "biweekly", "weekly")
ALLOCATIONS = ("equal", "uniform", "early", "middle", "late")
STREAMS = ("paired", "pathogen", "antibody")
HORIZON = 90
PERIOD_DAYS = {"monthly": 30, "biweekly": 15, "weekly": 7}
ALLOCATION_ALIASES = {"uniform-random": "uniform", "random": "uniform", "early-biased": "early",
                      "middle-biased": "middle", "late-biased": "late"}
SCORED_PARAMS = ("r0", "beta", "gamma", "eta")

# the known epidemic behind every simulated dataset
TRUE_BETA = 0.357
TRUE_GAMMA = 0.143
TRUE_ETA = 0.429
TRUE_INIT = (0.999, 0.001, 0.0, 0.0)


def periods(cadence: str) -> List[Tuple[int, int]]:
    """Inclusive day ranges tiling days 1..90; the last weekly period is short."""
    if cadence not in PERIOD_DAYS:
        raise InvalidInputError(f"unknown cadence {cadence!r}; expected one of {CADENCES}")
    width = PERIOD_DAYS[cadence]
    return [(start, min(start + width - 1, HORIZON)) for start in range(1, HORIZON + 1, width)]


@dataclass(frozen=True)
class StudyDesign:
    total_samples: int
    cadence: str
    allocation: str
    streams: str = "paired"

    def __post_init__(self):
        object.__setattr__(self, "allocation", ALLOCATION_ALIASES.get(self.allocation, self.allocation))
        object.__setattr__(self, "streams", normalize_streams(self.streams))
        if self.total_samples not in SIZES:
            raise InvalidInputError(f"total_samples must be one of {SIZES}, got {self.total_samples}")
        if self.cadence not in CADENCES:
            raise InvalidInputError(f"cadence must be one of {CADENCES}, got {self.cadence!r}")
        if self.allocation not in ALLOCATIONS:
            raise InvalidInputError(f"allocation must be one of {ALLOCATIONS}, got {self.allocation!r}")
        if self.num_periods > self.total_samples:
            raise InvalidInputError(
                f"{self.cadence} sampling has {self.num_periods} periods and would require at least "
                f"{self.num_periods} samples; {self.total_samples} is too few")

    @property
    def num_periods(self) -> int:
        return len(periods(self.cadence))

    @property
    def design_id(self) -> str:
        return f"n{self.total_samples}-{self.cadence}-{self.allocation}-{self.streams}"

    @classmethod
    def from_id(cls, design_id: str) -> "StudyDesign":
        try:
            n, cadence, allocation, streams = design_id.split("-")
            return cls(int(n.lstrip("n")), cadence, allocation, streams)
        except ValueError as exc:
            if isinstance(exc, InvalidInputError):
                raise
            raise InvalidInputError(f"malformed design id {design_id!r}") from None


def enumerate_designs(streams: Sequence[str] = STREAMS) -> List[StudyDesign]:
    """Every valid design: 14 size/cadence cells x 5 allocations x the stream choices."""
    out = []
    for n in SIZES:
        for cadence in CADENCES:
            if len(periods(cadence)) > n:
                continue
            for allocation in ALLOCATIONS:
                for s in streams:
                    out.append(StudyDesign(n, cadence, allocation, s))
    return out


@dataclass(frozen=True)
class SamplingSchedule:
    periods: tuple  # inclusive (start, end) day per period
    days: tuple  # sampled day per period
    counts: tuple  # samples taken on each day

    def __post_init__(self):
        if not len(self.periods) == len(self.days) == len(self.counts):
            raise InvalidInputError("need one day and one count per period")
        for (lo, hi), d in zip(self.periods, self.days):
            if not lo <= d <= hi:
                raise InvalidInputError(f"sampled day {d} lies outside period [{lo}, {hi}]")
        if any(c < 0 for c in self.counts):
            raise InvalidInputError("counts must be nonnegative")

    @property
    def total(self) -> int:
        return int(sum(self.counts))

    def times(self) -> np.ndarray:
        """One entry per sampled individual, in period order."""
        return np.repeat(np.array(self.days, dtype=float), self.counts)


def allocation_weights(allocation: str, num_periods: int) -> np.ndarray:
    p = np.arange(1, num_periods + 1, dtype=float)
    if allocation in ("equal", "uniform"):
        w = np.ones(num_periods)
    elif allocation == "early":
        w = num_periods - p + 1
    elif allocation == "late":
        w = p
    elif allocation == "middle":
        w = np.minimum(p, num_periods - p + 1)
    else:
        raise InvalidInputError(f"unknown allocation {allocation!r}")
    return w / w.sum()


def equal_counts(total: int, num_periods: int) -> Tuple[int, ...]:
    base, extra = divmod(total, num_periods)
    return tuple(base + (1 if k < extra else 0) for k in range(num_periods))


def draw_schedule(design: StudyDesign, rng: np.random.Generator) -> SamplingSchedule:
    per = periods(design.cadence)
    days = tuple(int(rng.integers(lo, hi + 1)) for lo, hi in per)
    if design.allocation == "equal":
        counts = equal_counts(design.total_samples, len(per))
    else:
        w = allocation_weights(design.allocation, len(per))
        counts = tuple(int(c) for c in rng.multinomial(design.total_samples, w))
    return SamplingSchedule(tuple(per), days, counts)


def simulate_results(pi: np.ndarray, cmap: CharacterizationMap, perf: TestPerformance,
                     rng: np.random.Generator) -> np.ndarray:
    """Observed results (0/1, shape ``(H, J)``) for individuals with state rows ``pi``.

    Each individual draws a compartment from its row of ``pi``, then a true
    outcome vector from the map's within-compartment weights, then each test
    flips according to sensitivity and specificity.
    """
    pi = np.atleast_2d(np.asarray(pi, dtype=float))
    n = pi.shape[0]
    if pi.shape[1] != cmap.num_compartments:
        raise InvalidInputError("state rows do not match the map's compartments")
    if perf.num_tests != cmap.num_tests:
        raise InvalidInputError("test performance does not match the map")
    cum = np.cumsum(pi, axis=1)
    cum[:, -1] = np.inf
    y = (rng.uniform(size=(n, 1)) >= cum[:, :-1]).sum(axis=1)
    # true outcome given compartment: joint table of (compartment, outcome code) weights
    joint = np.zeros((cmap.num_compartments, 2 ** cmap.num_tests))
    joint[np.asarray(cmap.assignment), np.arange(joint.shape[1])] = cmap.weights
    cum_t = np.cumsum(joint, axis=1)
    cum_t[:, -1] = np.inf
    u = rng.uniform(size=(n, 1))
    code = (u >= cum_t[y, :-1]).sum(axis=1)
    true = np.array(outcome_vectors(cmap.num_tests), dtype=np.int8)[code]
    sens = np.array(perf.sensitivity)
    spec = np.array(perf.specificity)
    p_pos = np.where(true == 1, sens, 1.0 - spec)
    return (rng.uniform(size=true.shape) < p_pos).astype(np.int8)


def simulate_dataset(traj: Trajectory, schedule: SamplingSchedule, cmap: CharacterizationMap,
                     perf: TestPerformance, streams: str, rng: np.random.Generator,
                     id_prefix: str = "s") -> SurveillanceDataset:
    """One dataset of ``schedule.total`` records drawn from the trajectory."""
    times = schedule.times()
    if times.size and times.max() > traj.t_end:
        raise InvalidInputError(f"schedule days run past the trajectory end {traj.t_end}")
    # days before the trajectory starts see its initial state
    pi = np.empty((times.size, cmap.num_compartments))
    if times.size:
        pi[:] = epimodel.states_at(traj, np.maximum(times, traj.t0))
    results = simulate_results(pi, cmap, perf, rng)
    width = max(4, len(str(times.size)))
    ids = [f"{id_prefix}{k + 1:0{width}d}" for k in range(times.size)]
    data = SurveillanceDataset(cmap.tests, ids, times, results.reshape(times.size, cmap.num_tests))
    return data.select_streams(streams)


# -- replicate study ------------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    """Truth and inference settings shared by every replicate."""

    beta: float = TRUE_BETA
    gamma: float = TRUE_GAMMA
    eta: float = TRUE_ETA
    initial_state: tuple = TRUE_INIT
    mcmc: McmcConfig = field(default_factory=lambda: McmcConfig(chains=4, iterations=20_000, thin=10))
    priors: Optional[PriorSpec] = None
    rhat_threshold: float = RHAT_WARN
    step: float = epimodel.DEFAULT_STEP

    @property
    def truth(self) -> Dict[str, float]:
        return {"r0": self.beta / self.gamma, "beta": self.beta, "gamma": self.gamma, "eta": self.eta}

    def resolved_priors(self) -> PriorSpec:
        if self.priors is not None:
            return self.priors
        # initial conditions are known; the outbreak time is estimated
        return PriorSpec(initial_state=self.initial_state, tau0=NormalPrior(0.0, 100.0))


@dataclass
class ReplicateResult:
    design_id: str
    replicate: int
    seed: int
    crps: Dict[str, float]
    relative_crps: Dict[str, float]
    converged: bool
    failed: bool = False
    max_rhat: float = math.nan
    error: str = ""
    # 95% HPDI per scored parameter, used for coverage summaries
    hpdi: Dict[str, Tuple[float, float]] = field(default_factory=dict)


def design_key(design_id: str) -> int:
    return zlib.crc32(design_id.encode("utf-8"))


def replicate_seed(master_seed: int, design_id: str, replicate: int) -> int:
    """Seed that depends only on (master seed, design, replicate index)."""
    ss = np.random.SeedSequence([int(master_seed), design_key(design_id), int(replicate)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


def truth_trajectory(config: StudyConfig) -> Trajectory:
    params = epimodel.SibrParams(config.beta, config.gamma, config.eta)
    return epimodel.integrate(SIBR, params, config.initial_state, 0.0, float(HORIZON), config.step)


def run_replicate(design: StudyDesign, replicate: int, config: StudyConfig,
                  master_seed: int, traj: Optional[Trajectory] = None) -> ReplicateResult:
    from .diagnostics import crps_empirical  # diagnostics imports this module

    seed = replicate_seed(master_seed, design.design_id, replicate)
    traj = traj if traj is not None else truth_trajectory(config)
    cmap = sibr_map()
    rng = np.random.default_rng(seed)
    truth = config.truth
    try:
        schedule = draw_schedule(design, rng)
        data = simulate_dataset(traj, schedule, cmap, TestPerformance.perfect(cmap.num_tests),
                                design.streams, rng)
        mcmc = replace(config.mcmc, seed=seed)
        chains = posterior_sample(data, cmap, SIBR, config.resolved_priors(), mcmc, config.step)
        summary = summarize(chains)
    except Exception as exc:  # a failed replicate is recorded, not fatal
        log.warning("replicate %s/%d failed: %s", design.design_id, replicate, exc)
        nan = {p: math.nan for p in SCORED_PARAMS}
        return ReplicateResult(design.design_id, replicate, seed, nan, dict(nan), False, True,
                               error=f"{type(exc).__name__}: {exc}")
    crps, rel, hp = {}, {}, {}
    for p in SCORED_PARAMS:
        draws = np.concatenate([c.column(p) for c in chains])
        crps[p] = crps_empirical(draws, truth[p])
        rel[p] = crps[p] / truth[p]
        hp[p] = (summary[p]["hpdi_lower"], summary[p]["hpdi_upper"])
    rhats = [e["rhat"] for e in summary.values() if "rhat" in e]
    max_rhat = max(rhats) if rhats else math.nan
    converged = bool(rhats) and max_rhat <= config.rhat_threshold
    return ReplicateResult(design.design_id, replicate, seed, crps, rel, converged,
                           max_rhat=max_rhat, hpdi=hp)


def _work(args):
    design, replicate, config, master_seed = args
    return run_replicate(design, replicate, config, master_seed)


@dataclass
class StudyResult:
    designs: List[StudyDesign]
    replicates: List[ReplicateResult]
    n_reps: int
    master_seed: int

    def for_design(self, design_id: str) -> List[ReplicateResult]:
        return [r for r in self.replicates if r.design_id == design_id]

    def aggregate(self) -> List[dict]:
        """Mean relative CRPS per design and parameter over replicates that did not fail."""
        rows = []
        for d in self.designs:
            reps = sorted(self.for_design(d.design_id), key=lambda r: r.replicate)
            ok = [r for r in reps if not r.failed]
            for p in SCORED_PARAMS:
                vals = [r.relative_crps[p] for r in ok]
                mean = math.fsum(vals) / len(vals) if vals else math.nan
                rows.append({"design_id": d.design_id, "param": p, "mean_relative_crps": mean,
                             "n_ok": len(ok), "n_failed": len(reps) - len(ok)})
        return rows

    def mean_relative_crps(self, design_id: str, param: str) -> float:
        for row in self.aggregate():
            if row["design_id"] == design_id and row["param"] == param:
                return row["mean_relative_crps"]
        raise KeyError(design_id)

    @property
    def n_failed(self) -> int:
        return sum(r.failed for r in self.replicates)

    def results_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["design_id", "replicate", "seed", "param", "crps", "relative_crps", "converged"])
        for r in self.replicates:
            for p in SCORED_PARAMS:
                w.writerow([r.design_id, r.replicate, r.seed, p, _fmt(r.crps[p]),
                            _fmt(r.relative_crps[p]), int(r.converged)])
        return buf.getvalue()

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["design_id", "param", "mean_relative_crps", "n_ok", "n_failed"])
        for row in self.aggregate():
            w.writerow([row["design_id"], row["param"], _fmt(row["mean_relative_crps"]),
                        row["n_ok"], row["n_failed"]])
        return buf.getvalue()


def _fmt(x: float) -> str:
    return "NA" if not math.isfinite(x) else format(x, ".17g")


def designs_csv(designs: Sequence[StudyDesign]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["design_id", "total_samples", "cadence", "allocation", "streams"])
    for d in designs:
        w.writerow([d.design_id, d.total_samples, d.cadence, d.allocation, d.streams])
    return buf.getvalue()


def run_study(designs: Sequence[StudyDesign], n_reps: int, config: StudyConfig = StudyConfig(),
              workers: int = 1, master_seed: int = 0) -> StudyResult:
    """Run ``n_reps`` replicates of every design.

    Replicate seeds depend only on (master seed, design id, replicate), and
    results are ordered by design then replicate, so the output does not
    depend on ``workers``.
    """
    if n_reps < 1:
        raise InvalidInputError("n_reps must be at least 1")
    designs = list(designs)
    ids = [d.design_id for d in designs]
    if len(set(ids)) != len(ids):
        raise InvalidInputError("designs must be distinct")
    tasks = [(d, r, config, int(master_seed)) for d in designs for r in range(n_reps)]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as pool:
            results = list(pool.map(_work, tasks, chunksize=1))
    else:
        traj = truth_trajectory(config)
        results = [run_replicate(d, r, config, s, traj) for d, r, config, s in tasks]
    order = {i: k for k, i in enumerate(ids)}
    results.sort(key=lambda r: (order[r.design_id], r.replicate))
    return StudyResult(designs, results, n_reps, int(master_seed))

"""Model scoring and posterior predictive checks.

``crps_empirical`` scores a sample against a known value.  ``log_score``
sums Bernoulli log-masses of observed test results under posterior-mean
positivity probabilities (higher is better).  ``posterior_predictive``
simulates replicate datasets at the observed record times and compares
binned positivity against the observations.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .charmap import CharacterizationMap, positive_matrix
from .data import SurveillanceDataset
from .epimodel import DEFAULT_STEP
from .errors import InvalidInputError
from .inference.likelihood import ThetaVector, check_map_model, population_states
from .inference.summary import convergence_warnings, summarize

log = logging.getLogger(__name__)

PPC_MIN_REPS = 100
DEFAULT_BIN_WIDTH = 14.0


# -- CRPS -----------------------------------------------------------------------------


def crps_empirical(draws, truth: float) -> float:
    """``mean|x - y| - (1 / 2N^2) sum_{i,k} |x_i - x_k|`` for draws ``x`` and value ``y``.

    The pairwise term uses the sorted-order identity
    ``sum_{i,k} |x_i - x_k| = 2 sum_i (2i - N - 1) x_(i)``.
    """
    x = np.sort(np.asarray(draws, dtype=float).reshape(-1))
    n = x.size
    if n == 0:
        raise InvalidInputError("CRPS needs at least one draw")
    y = float(truth)
    mae = math.fsum(np.abs(x - y).tolist()) / n
    coef = 2.0 * np.arange(1, n + 1) - n - 1
    spread = math.fsum((coef * x).tolist()) / (n * n)
    return max(mae - spread, 0.0)


def relative_crps(draws, truth: float) -> float:
    if not truth > 0:
        raise InvalidInputError(f"relative CRPS needs a positive true value, got {truth}")
    return crps_empirical(draws, truth) / truth


# -- draws -----------------------------------------------------------------------------


def _pooled_thetas(chains, max_draws: Optional[int] = None) -> List[ThetaVector]:
    if not chains:
        raise InvalidInputError("need at least one chain")
    thetas = [th for c in chains for th in c.thetas()]
    if not thetas:
        raise InvalidInputError("chains hold no draws")
    if max_draws is not None and len(thetas) > max_draws:
        idx = np.linspace(0, len(thetas) - 1, max_draws).round().astype(int)
        thetas = [thetas[k] for k in idx]
    return thetas


def _warn_unconverged(chains) -> None:
    if len(chains) >= 2 and min(len(c) for c in chains) >= 4:
        convergence_warnings(summarize(chains))


def _resolve_tests(cmap: CharacterizationMap, tests) -> List[int]:
    if tests is None:
        return list(range(cmap.num_tests))
    out = sorted({cmap.test_index(t) for t in tests})
    if not out:
        raise InvalidInputError("scored_tests must not be empty")
    return out


class _PerfCache:
    def __init__(self, cmap):
        self.cmap = cmap
        self.store = {}

    def __call__(self, theta: ThetaVector) -> np.ndarray:
        key = (theta.sensitivity, theta.specificity)
        m = self.store.get(key)
        if m is None:
            m = self.store[key] = positive_matrix(self.cmap, theta.performance())
        return m


def positivity(thetas: Sequence[ThetaVector], times, cmap: CharacterizationMap,
               step: float = DEFAULT_STEP) -> np.ndarray:
    """Posterior-mean positivity probability per time and test, shape ``(len(times), J)``."""
    times = np.asarray(times, dtype=float)
    pos = _PerfCache(cmap)
    total = np.zeros((times.size, cmap.num_tests))
    for th in thetas:
        total += population_states(th, times, step) @ pos(th)
    return total / len(thetas)


# -- log-score -----------------------------------------------------------------------------


@dataclass
class ScoreReport:
    tests: tuple
    scores: Dict[str, Optional[float]]  # None for a test that was not scored
    combined: Optional[float]  # set when every test of the map is scored
    model: str = ""
    data_config: str = ""
    location: str = ""
    infinite_records: List[str] = field(default_factory=list)

    def score(self, test: str) -> Optional[float]:
        return self.scores[test]

    def row(self) -> list:
        cells = [self.location, self.model, self.data_config]
        for t in self.tests:
            cells.append(_cell(self.scores.get(t)))
        cells.append(_cell(self.combined))
        return cells

    def header(self) -> list:
        return ["location", "model", "data_config"] + [f"score_{t}" for t in self.tests] + ["score_combined"]

    def to_csv(self) -> str:
        return score_table([self])


def _cell(v) -> str:
    return "" if v is None else format(v, ".17g")


def score_table(reports: Sequence[ScoreReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(reports[0].header())
    for r in reports:
        if r.tests != reports[0].tests:
            raise InvalidInputError("score reports cover different tests")
        w.writerow(r.row())
    return buf.getvalue()


def log_score(chains, data: SurveillanceDataset, cmap: CharacterizationMap, model: str,
              scored_tests=None, *, label: str = "", data_config: str = "", location: str = "",
              max_draws: Optional[int] = None, step: float = DEFAULT_STEP) -> ScoreReport:
    """Log-score of the observed entries of ``scored_tests`` (names or 0-based indices).

    Missing entries contribute nothing.  A zero-probability observation
    makes the score ``-inf`` and its record id is listed in
    ``infinite_records``.
    """
    check_map_model(cmap, model)
    if data.tests != cmap.tests:
        raise InvalidInputError(f"dataset tests {data.tests} do not match map tests {cmap.tests}")
    tests = _resolve_tests(cmap, scored_tests)
    _warn_unconverged(chains)
    thetas = _pooled_thetas(chains, max_draws)
    p_hat = positivity(thetas, data.times, cmap, step) if len(data) else np.empty((0, cmap.num_tests))

    scores: Dict[str, Optional[float]] = {t: None for t in cmap.tests}
    bad = []
    for j in tests:
        obs = data.results[:, j]
        keep = obs >= 0
        p = p_hat[keep, j]
        t = obs[keep]
        mass = np.where(t == 1, p, 1.0 - p)
        with np.errstate(divide="ignore"):
            terms = np.log(mass)
        zero = np.flatnonzero(mass <= 0.0)
        if zero.size:
            ids = np.asarray(data.ids, dtype=object)[keep][zero]
            bad += [str(i) for i in ids]
            log.warning("zero-probability %s observation for record(s) %s",
                        cmap.tests[j], ", ".join(map(str, ids[:5])))
        scores[cmap.tests[j]] = -math.inf if zero.size else math.fsum(terms.tolist())
    combined = None
    if len(tests) == cmap.num_tests:
        combined = sum(scores[cmap.tests[j]] for j in tests)
    return ScoreReport(cmap.tests, scores, combined, label or model, data_config, location,
                       sorted(set(bad)))


# -- posterior predictive checks ---------------------------------------------------------


@dataclass
class PpcBin:
    test: str
    bin_start: float
    bin_end: float
    observed_rate: float
    n_obs: int
    q025: float
    q50: float
    q975: float

    @property
    def covered(self) -> bool:
        return self.q025 <= self.observed_rate <= self.q975


@dataclass
class PpcSummary:
    bins: List[PpcBin]
    n_reps: int
    bin_width: float
    dropped: List[tuple] = field(default_factory=list)  # (test, bin_start, bin_end) with no data

    def coverage(self, test: Optional[str] = None) -> float:
        rows = [b for b in self.bins if test is None or b.test == test]
        if not rows:
            return math.nan
        return sum(b.covered for b in rows) / len(rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["test", "bin_start", "bin_end", "observed_rate", "n_obs", "q025", "q50", "q975"])
        for b in self.bins:
            w.writerow([b.test, format(b.bin_start, ".17g"), format(b.bin_end, ".17g"),
                        format(b.observed_rate, ".17g"), b.n_obs,
                        format(b.q025, ".17g"), format(b.q50, ".17g"), format(b.q975, ".17g")])
        return buf.getvalue()


def time_bins(times, bin_width: float):
    """Bin index per time and the bin edges, starting at the earliest time."""
    times = np.asarray(times, dtype=float)
    if not bin_width > 0:
        raise InvalidInputError("bin_width must be positive")
    start = float(times.min())
    idx = np.floor((times - start) / bin_width).astype(int)
    n_bins = int(idx.max()) + 1
    edges = start + bin_width * np.arange(n_bins + 1)
    return idx, edges


def posterior_predictive(chains, data: SurveillanceDataset, cmap: CharacterizationMap, model: str,
                         n_reps: int = 1000, bin_width: float = DEFAULT_BIN_WIDTH, seed: int = 0,
                         step: float = DEFAULT_STEP) -> PpcSummary:
    """Simulate ``n_reps`` datasets from posterior draws and band binned positivity.

    Replicate datasets reuse the observed record times and missingness, so
    every bin compares like with like.  Replicate ``r`` draws from its own
    stream seeded by ``(seed, r)``.
    """
    from .simstudy import simulate_results  # simstudy imports this module

    check_map_model(cmap, model)
    if data.tests != cmap.tests:
        raise InvalidInputError(f"dataset tests {data.tests} do not match map tests {cmap.tests}")
    if n_reps < 1:
        raise InvalidInputError("n_reps must be at least 1")
    if n_reps < PPC_MIN_REPS:
        warnings.warn(f"{n_reps} replicates give coarse quantile bands; use at least {PPC_MIN_REPS}",
                      stacklevel=2)
    if not len(data):
        raise InvalidInputError("posterior predictive checks need records")
    _warn_unconverged(chains)
    thetas = _pooled_thetas(chains)
    pick = np.random.default_rng([int(seed), 0x505043])
    chosen = pick.choice(len(thetas), size=n_reps, replace=n_reps > len(thetas))

    idx, edges = time_bins(data.times, bin_width)
    n_bins = edges.size - 1
    observed = data.results >= 0
    # observed counts per (bin, test)
    n_obs = np.zeros((n_bins, cmap.num_tests), dtype=int)
    n_pos = np.zeros((n_bins, cmap.num_tests), dtype=int)
    np.add.at(n_obs, idx, observed.astype(int))
    np.add.at(n_pos, idx, (data.results == 1).astype(int))

    rates = np.empty((n_reps, n_bins, cmap.num_tests))
    denom = np.maximum(n_obs, 1)
    for r, k in enumerate(chosen):
        th = thetas[int(k)]
        pi = population_states(th, data.times, step)
        sim = simulate_results(pi, cmap, th.performance(), np.random.default_rng([int(seed), r]))
        sim_pos = np.zeros((n_bins, cmap.num_tests))
        np.add.at(sim_pos, idx, (sim == 1) & observed)
        rates[r] = sim_pos / denom

    q = np.quantile(rates, [0.025, 0.5, 0.975], axis=0)
    bins, dropped = [], []
    for j, test in enumerate(cmap.tests):
        for b in range(n_bins):
            lo, hi = float(edges[b]), float(edges[b + 1])
            if n_obs[b, j] == 0:
                dropped.append((test, lo, hi))
                continue
            bins.append(PpcBin(test, lo, hi, n_pos[b, j] / n_obs[b, j], int(n_obs[b, j]),
                               float(q[0, b, j]), float(q[1, b, j]), float(q[2, b, j])))
    if dropped:
        log.info("dropped %d empty bins", len(dropped))
    return PpcSummary(bins, n_reps, float(bin_width), dropped)

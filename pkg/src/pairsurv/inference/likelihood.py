"""Likelihood of paired surveillance records under a compartment model.

Each record contributes ``log P(T* = t*_h | pi(tau_h; theta))``.  Records
are grouped by (time, observed pattern) before evaluation, so the result
does not depend on record order.  Records collected before the outbreak
time ``tau0`` see the initial state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit

from .. import epimodel
from ..charmap import CharacterizationMap, TestPerformance, conditional_matrix, pattern_codes
from ..data import SurveillanceDataset
from ..epimodel import DEFAULT_STEP, LABELS, SIBR, SIR, _interp_states, _rk4_path
from ..errors import IntegrationInstabilityError, InvalidInputError, OutOfRangeError

# longest span the integrator will cover between tau0 and the last record
MAX_SPAN_DAYS = 1e5


def seed_state(model: str, infectious: float = 0.001) -> tuple:
    """Mostly susceptible population with a small infectious fraction."""
    return (1.0 - infectious, infectious) + (0.0,) * (len(LABELS[model]) - 2)


def effective_step(rates, step: float = DEFAULT_STEP) -> float:
    """Integration step used by the likelihood: ``step``, shrunk so rate * step <= 1."""
    fastest = max(float(v) for v in rates)
    return step if fastest * step <= 1.0 else 1.0 / fastest


@dataclass(frozen=True)
class ThetaVector:
    """Natural-scale parameters: rates, outbreak time, initial state, test performance."""

    model: str
    beta: float
    gamma: float
    eta: Optional[float] = None
    tau0: float = 0.0
    initial_state: Optional[tuple] = None
    sensitivity: tuple = (1.0, 1.0)
    specificity: tuple = (1.0, 1.0)

    def __post_init__(self):
        if self.model not in LABELS:
            raise InvalidInputError(f"unknown model {self.model!r}")
        if self.model == SIBR and self.eta is None:
            raise InvalidInputError("SIBR parameters need eta")
        if self.initial_state is None:
            object.__setattr__(self, "initial_state", seed_state(self.model))
        epimodel.as_state(self.model, self.initial_state)
        self.params()
        self.performance()
        if not math.isfinite(self.tau0):
            raise InvalidInputError("tau0 must be finite")

    @property
    def r0(self) -> float:
        return self.beta / self.gamma

    @property
    def rates(self) -> np.ndarray:
        return self.params().as_array()

    def params(self):
        if self.model == SIR:
            return epimodel.SirParams(self.beta, self.gamma)
        return epimodel.SibrParams(self.beta, self.gamma, self.eta)

    def performance(self) -> TestPerformance:
        return TestPerformance(self.sensitivity, self.specificity)

    def trajectory(self, t_end: float, step: float = DEFAULT_STEP):
        return epimodel.integrate(self.model, self.params(), self.initial_state, self.tau0,
                                  max(t_end, self.tau0 + step), step)


@njit(cache=True)
def _states_at_times(rates, init, tau0, step, t_max, utimes, pi):
    """Fill ``pi`` with states at sorted ``utimes``; return False if integration failed."""
    if t_max <= tau0:
        for u in range(utimes.shape[0]):
            pi[u, :] = init
        return True
    # the lattice tau0 + k * step does not depend on the record times, so any
    # subset of records sees exactly the same states
    n_steps = max(1, int(math.ceil((t_max - tau0) / step)))
    if tau0 + n_steps * step < t_max:
        n_steps += 1
    grid = tau0 + step * np.arange(n_steps + 1).astype(np.float64)
    states = np.empty((n_steps + 1, init.shape[0]))
    if _rk4_path(rates, init, grid, states) >= 0:
        return False
    _interp_states(grid, states, utimes, pi)
    return True


@njit(cache=True)
def _grouped_log_likelihood(rates, init, tau0, step, t_max, utimes, g_time, g_pattern, g_count, cond):
    """Return (log-likelihood, status); status 1 flags integration failure."""
    n_comp = init.shape[0]
    pi = np.empty((utimes.shape[0], n_comp))
    if not _states_at_times(rates, init, tau0, step, t_max, utimes, pi):
        return -np.inf, 1
    total = 0.0
    for g in range(g_time.shape[0]):
        p = 0.0
        for y in range(n_comp):
            p += pi[g_time[g], y] * cond[g_pattern[g], y]
        if p <= 0.0:
            return -np.inf, 0
        total += g_count[g] * math.log(p)
    return total, 0


def population_states(theta: ThetaVector, times, step: float = DEFAULT_STEP) -> np.ndarray:
    """States ``pi(tau; theta)`` at arbitrary ``times``; times before tau0 get the initial state.

    Raises :class:`IntegrationInstabilityError` if the solve leaves the simplex.
    """
    times = np.asarray(times, dtype=float)
    utimes, inverse = np.unique(times, return_inverse=True)
    pi = np.empty((utimes.size, len(theta.initial_state)))
    if utimes.size:
        rates = theta.rates
        ok = _states_at_times(rates, np.asarray(theta.initial_state, dtype=float), float(theta.tau0),
                              effective_step(rates, step), float(utimes[-1]), utimes, pi)
        if not ok:
            raise IntegrationInstabilityError(f"integration failed for {theta}")
    return pi[inverse.reshape(-1)]


def check_map_model(cmap: CharacterizationMap, model: str) -> None:
    labels = LABELS.get(model)
    if labels is None:
        raise InvalidInputError(f"unknown model {model!r}")
    if tuple(c.lower() for c in cmap.compartments) != labels:
        raise InvalidInputError(
            f"map compartments {cmap.compartments} do not match {model!r} compartments {labels}")


class LikelihoodProblem:
    """Dataset, map and model bound together for repeated likelihood evaluation."""

    def __init__(self, data: SurveillanceDataset, cmap: CharacterizationMap, model: str,
                 step: float = DEFAULT_STEP):
        check_map_model(cmap, model)
        if len(data) and data.num_tests != cmap.num_tests:
            raise InvalidInputError(
                f"dataset has {data.num_tests} tests, map expects {cmap.num_tests}")
        self.data = data
        self.cmap = cmap
        self.model = model
        self.step = float(step)
        self.num_records = len(data)
        if self.num_records:
            codes = pattern_codes(data.results)
            keys = np.rec.fromarrays([data.times, codes], names="t,code")
            uniq, counts = np.unique(keys, return_counts=True)
            self.utimes, g_time = np.unique(uniq["t"], return_inverse=True)
            self.g_time = g_time.astype(np.int64).reshape(-1)
            self.g_pattern = uniq["code"].astype(np.int64)
            self.g_count = counts.astype(np.float64)
            self.t_max = float(self.utimes[-1])
        else:
            self.utimes = np.empty(0)
            self.g_time = self.g_pattern = np.empty(0, dtype=np.int64)
            self.g_count = np.empty(0)
            self.t_max = -np.inf
        self._perf_cache = {}

    def cond_matrix(self, sensitivity, specificity) -> np.ndarray:
        key = (tuple(sensitivity), tuple(specificity))
        cond = self._perf_cache.get(key)
        if cond is None:
            cond = conditional_matrix(self.cmap, TestPerformance(*key))
            if len(self._perf_cache) < 4:
                self._perf_cache[key] = cond
        return cond

    def evaluate(self, rates, tau0, init, cond) -> float:
        """Log-likelihood from raw arrays; -inf on zero probability or failed integration."""
        if not self.num_records:
            return 0.0
        if self.t_max - tau0 > MAX_SPAN_DAYS:
            raise OutOfRangeError(
                f"records span {self.t_max - tau0:.0f} days after tau0; limit is {MAX_SPAN_DAYS:.0f}")
        rates = np.asarray(rates, dtype=float)
        value, _ = _grouped_log_likelihood(
            rates, np.asarray(init, dtype=float), float(tau0),
            effective_step(rates, self.step), self.t_max, self.utimes, self.g_time,
            self.g_pattern, self.g_count, cond)
        return value

    def log_likelihood(self, theta: ThetaVector) -> float:
        if theta.model != self.model:
            raise InvalidInputError(f"theta is for {theta.model!r}, problem is {self.model!r}")
        if len(theta.sensitivity) != self.cmap.num_tests:
            raise InvalidInputError("theta test performance does not match the map")
        return self.evaluate(theta.rates, theta.tau0, theta.initial_state,
                             self.cond_matrix(theta.sensitivity, theta.specificity))


def log_likelihood(theta: ThetaVector, data: SurveillanceDataset, cmap: CharacterizationMap,
                   model: Optional[str] = None, step: float = DEFAULT_STEP) -> float:
    """Sum over records of the log marginal observation probability."""
    return LikelihoodProblem(data, cmap, model or theta.model, step).log_likelihood(theta)

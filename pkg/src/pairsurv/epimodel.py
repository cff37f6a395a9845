"""SIR and SIBR compartment models integrated with fixed-step RK4.

States are population proportions.  The SIBR model splits recovery into a
broadly recovered compartment ``b`` (antibodies present, pathogen material
still detectable) and a fully recovered compartment ``r``.

Example
-------
>>> traj = integrate("sibr", SibrParams(0.357, 0.143, 0.429),
...                  (0.999, 0.001, 0.0, 0.0), 0.0, 120.0)
>>> round(traj.values[:, 1].max(), 2)
0.23
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from numba import njit

from .errors import IntegrationInstabilityError, InvalidInputError, OutOfRangeError

SIR = "sir"
SIBR = "sibr"
LABELS = {SIR: ("s", "i", "r"), SIBR: ("s", "i", "b", "r")}

DEFAULT_STEP = 0.1
MAX_RATE = 1e3
SUM_TOL = 1e-9
# proportions outside [-STRAY, 1 + STRAY] after a step mean the step is too large
STRAY = 1e-6
RESCALE_TOL = 1e-13


def _check_rate(name, value):
    value = float(value)
    if not math.isfinite(value) or value <= 0.0:
        raise InvalidInputError(f"{name} must be a finite positive rate, got {value!r}")
    if value > MAX_RATE:
        raise InvalidInputError(f"{name}={value} exceeds the rate cap {MAX_RATE}/day")
    return value


@dataclass(frozen=True)
class SirParams:
    beta: float
    gamma: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _check_rate("beta", self.beta))
        object.__setattr__(self, "gamma", _check_rate("gamma", self.gamma))

    model = SIR

    def as_array(self) -> np.ndarray:
        # eta slot is unused for SIR; keeps one kernel signature
        return np.array([self.beta, self.gamma, 0.0])


@dataclass(frozen=True)
class SibrParams:
    beta: float
    gamma: float
    eta: float

    def __post_init__(self):
        object.__setattr__(self, "beta", _check_rate("beta", self.beta))
        object.__setattr__(self, "gamma", _check_rate("gamma", self.gamma))
        object.__setattr__(self, "eta", _check_rate("eta", self.eta))

    model = SIBR

    def as_array(self) -> np.ndarray:
        return np.array([self.beta, self.gamma, self.eta])


Params = Union[SirParams, SibrParams]


def make_params(model: str, **rates) -> Params:
    """Build the parameter object for ``model`` from keyword rates."""
    if model == SIR:
        return SirParams(rates["beta"], rates["gamma"])
    if model == SIBR:
        return SibrParams(rates["beta"], rates["gamma"], rates["eta"])
    raise InvalidInputError(f"unknown model {model!r}; expected 'sir' or 'sibr'")


@dataclass(frozen=True)
class CompartmentState:
    proportions: tuple
    labels: tuple

    def __post_init__(self):
        props = tuple(float(p) for p in self.proportions)
        labels = tuple(self.labels)
        if len(props) != len(labels):
            raise InvalidInputError("one label is required per proportion")
        if not all(math.isfinite(p) for p in props):
            raise InvalidInputError(f"non-finite proportion in {props}")
        if any(p < 0.0 or p > 1.0 for p in props):
            raise InvalidInputError(f"proportions must lie in [0, 1]: {props}")
        if abs(math.fsum(props) - 1.0) > SUM_TOL:
            raise InvalidInputError(f"proportions must sum to 1, got {math.fsum(props)!r}")
        object.__setattr__(self, "proportions", props)
        object.__setattr__(self, "labels", labels)

    def __getitem__(self, key):
        if isinstance(key, str):
            return self.proportions[self.labels.index(key)]
        return self.proportions[key]

    def __len__(self):
        return len(self.proportions)

    def as_array(self) -> np.ndarray:
        return np.array(self.proportions)


def as_state(model: str, state) -> CompartmentState:
    """Coerce a sequence or CompartmentState into a validated state for ``model``."""
    labels = LABELS[model]
    if isinstance(state, CompartmentState):
        if state.labels != labels:
            raise InvalidInputError(f"state labels {state.labels} do not match model {model!r}")
        return state
    return CompartmentState(tuple(state), labels)


def _validated_vector(state, size):
    y = np.asarray(state.proportions if isinstance(state, CompartmentState) else state, dtype=float)
    if y.shape != (size,):
        raise InvalidInputError(f"expected a state of length {size}, got shape {y.shape}")
    if not np.all(np.isfinite(y)):
        raise InvalidInputError("state contains non-finite values")
    return y


def sir_derivative(state, params: SirParams) -> np.ndarray:
    """Right-hand side ``(ds, di, dr)`` of the SIR system, per day."""
    s, i, _ = _validated_vector(state, 3)
    flow_si = params.beta * s * i
    flow_ir = params.gamma * i
    return np.array([-flow_si, flow_si - flow_ir, flow_ir])


def sibr_derivative(state, params: SibrParams) -> np.ndarray:
    """Right-hand side ``(ds, di, db, dr)`` of the SIBR system, per day."""
    s, i, b, _ = _validated_vector(state, 4)
    flow_si = params.beta * s * i
    flow_ib = params.gamma * i
    flow_br = params.eta * b
    return np.array([-flow_si, flow_si - flow_ib, flow_ib - flow_br, flow_br])


def derivative(model: str, state, params: Params) -> np.ndarray:
    if model == SIR:
        return sir_derivative(state, params)
    if model == SIBR:
        return sibr_derivative(state, params)
    raise InvalidInputError(f"unknown model {model!r}")


def r0(params: Params) -> float:
    """Basic reproductive number ``beta / gamma``."""
    return params.beta / params.gamma


# --- compiled kernels ------------------------------------------------------


@njit(cache=True)
def _rk4_path(rates, init, grid, out):
    """Fill ``out[k]`` with the state at ``grid[k]``; return the failing index or -1."""
    beta, gamma, eta = rates[0], rates[1], rates[2]
    sibr = init.shape[0] == 4
    s, i = init[0], init[1]
    b = init[2] if sibr else 0.0
    r = init[3] if sibr else init[2]
    out[0, :] = init
    for step in range(grid.shape[0] - 1):
        h = grid[step + 1] - grid[step]
        # stage derivatives; r never feeds back so only s, i, b need stages
        f1 = beta * s * i
        ds1, di1, db1 = -f1, f1 - gamma * i, gamma * i - eta * b
        s2, i2, b2 = s + 0.5 * h * ds1, i + 0.5 * h * di1, b + 0.5 * h * db1
        f2 = beta * s2 * i2
        ds2, di2, db2 = -f2, f2 - gamma * i2, gamma * i2 - eta * b2
        s3, i3, b3 = s + 0.5 * h * ds2, i + 0.5 * h * di2, b + 0.5 * h * db2
        f3 = beta * s3 * i3
        ds3, di3, db3 = -f3, f3 - gamma * i3, gamma * i3 - eta * b3
        s4, i4, b4 = s + h * ds3, i + h * di3, b + h * db3
        f4 = beta * s4 * i4
        ds4, di4, db4 = -f4, f4 - gamma * i4, gamma * i4 - eta * b4
        c = h / 6.0
        if sibr:
            dr1, dr2, dr3, dr4 = eta * b, eta * b2, eta * b3, eta * b4
        else:
            dr1, dr2, dr3, dr4 = gamma * i, gamma * i2, gamma * i3, gamma * i4
            db1 = db2 = db3 = db4 = 0.0
        s = s + c * (ds1 + 2.0 * ds2 + 2.0 * ds3 + ds4)
        i = i + c * (di1 + 2.0 * di2 + 2.0 * di3 + di4)
        b = b + c * (db1 + 2.0 * db2 + 2.0 * db3 + db4)
        r = r + c * (dr1 + 2.0 * dr2 + 2.0 * dr3 + dr4)
        lo = min(min(s, i), min(b, r))
        hi = max(max(s, i), max(b, r))
        if not (lo >= -STRAY and hi <= 1.0 + STRAY and math.isfinite(s + i + b + r)):
            return step + 1
        if lo < 0.0:
            s, i, b, r = max(s, 0.0), max(i, 0.0), max(b, 0.0), max(r, 0.0)
        # RK4 conserves the total up to rounding; rescaling every step would
        # add rounding noise that breaks the monotonicity of s and r
        total = s + i + b + r
        if lo < 0.0 or abs(total - 1.0) > RESCALE_TOL:
            scale = 1.0 / total
            s *= scale
            i *= scale
            b *= scale
            r *= scale
        out[step + 1, 0] = s
        out[step + 1, 1] = i
        if sibr:
            out[step + 1, 2] = b
            out[step + 1, 3] = r
        else:
            out[step + 1, 2] = r
    return -1


@njit(cache=True)
def _interp_states(grid, states, times, out):
    """Linear interpolation of ``states`` at ``times``; times before grid[0] hold the initial state."""
    n = grid.shape[0]
    n_comp = states.shape[1]
    for h in range(times.shape[0]):
        t = times[h]
        if t <= grid[0]:
            for c in range(n_comp):
                out[h, c] = states[0, c]
            continue
        # uniform grid except possibly the final step
        k = int((t - grid[0]) / (grid[1] - grid[0]))
        if k > n - 2:
            k = n - 2
        while k > 0 and grid[k] > t:
            k -= 1
        while k < n - 2 and grid[k + 1] < t:
            k += 1
        w = (t - grid[k]) / (grid[k + 1] - grid[k])
        total = 0.0
        for c in range(n_comp):
            v = (1.0 - w) * states[k, c] + w * states[k + 1, c]
            out[h, c] = v
            total += v
        for c in range(n_comp):
            out[h, c] /= total


def make_grid(t0: float, t_end: float, step: float) -> np.ndarray:
    """Uniform grid from ``t0`` with spacing ``step``; the final point is ``t_end``."""
    n_steps = max(1, int(math.ceil((t_end - t0) / step - 1e-9)))
    grid = t0 + step * np.arange(n_steps + 1, dtype=float)
    grid[-1] = t_end
    return grid


# --- trajectories -----------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """Deterministic epidemic path on a time grid.

    ``values`` has one row per grid time and one column per compartment.
    """

    model: str
    params: Params
    t0: float
    grid: np.ndarray
    values: np.ndarray

    @property
    def labels(self):
        return LABELS[self.model]

    @property
    def t_end(self):
        return float(self.grid[-1])

    @property
    def states(self):
        return [CompartmentState(tuple(row), self.labels) for row in self.values]

    def column(self, label: str) -> np.ndarray:
        return self.values[:, self.labels.index(label)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(",".join(("time",) + self.labels) + "\n")
            for t, row in zip(self.grid, self.values):
                fh.write(",".join(format(float(v), ".17g") for v in (t, *row)) + "\n")


def integrate(model: str, params: Params, init, t0: float, t_end: float,
              step: float = DEFAULT_STEP) -> Trajectory:
    """Integrate ``model`` from ``init`` at ``t0`` to ``t_end`` with classical RK4.

    After each step, proportions within ``[-1e-6, 0)`` are clamped to zero
    and the state is renormalized onto the simplex.  Larger excursions raise
    :class:`IntegrationInstabilityError`.
    """
    if params.model != model:
        raise InvalidInputError(f"{type(params).__name__} does not parameterize model {model!r}")
    t0, t_end, step = float(t0), float(t_end), float(step)
    if not (math.isfinite(t0) and math.isfinite(t_end)) or t_end <= t0:
        raise InvalidInputError(f"need finite t_end > t0, got t0={t0}, t_end={t_end}")
    if not math.isfinite(step) or step <= 0.0:
        raise InvalidInputError(f"step must be positive, got {step}")
    y0 = as_state(model, init).as_array()
    grid = make_grid(t0, t_end, step)
    values = np.empty((grid.size, y0.size))
    failed = _rk4_path(params.as_array(), y0, grid, values)
    if failed >= 0:
        raise IntegrationInstabilityError(
            f"state left the simplex at t={grid[failed]:.6g}; reduce the step (now {step})")
    grid.setflags(write=False)
    values.setflags(write=False)
    return Trajectory(model, params, t0, grid, values)


def state_at(traj: Trajectory, tau: float) -> CompartmentState:
    """Linearly interpolated, renormalized state at time ``tau``."""
    tau = float(tau)
    if not (traj.grid[0] <= tau <= traj.grid[-1]):
        raise OutOfRangeError(f"tau={tau} outside trajectory range [{traj.grid[0]}, {traj.grid[-1]}]")
    k = int(np.searchsorted(traj.grid, tau))
    if traj.grid[k] == tau:
        return CompartmentState(tuple(traj.values[k]), traj.labels)
    out = np.empty((1, traj.values.shape[1]))
    _interp_states(traj.grid, traj.values, np.array([tau]), out)
    return CompartmentState(tuple(out[0]), traj.labels)


def states_at(traj: Trajectory, times) -> np.ndarray:
    """Vectorized :func:`state_at`; returns an array of shape ``(len(times), C)``."""
    times = np.asarray(times, dtype=float)
    if times.size and (times.min() < traj.grid[0] or times.max() > traj.grid[-1]):
        raise OutOfRangeError("some times fall outside the trajectory range")
    out = np.empty((times.size, traj.values.shape[1]))
    _interp_states(traj.grid, traj.values, times, out)
    return out

"""Unconstrained parameterization of the free parameters of a fit.

Free coordinates are ``log R0``, ``log gamma``, ``log eta`` (SIBR), ``tau0``
when it has a Normal prior, additive log-ratios of the initial state when it
has a Dirichlet prior, and logits of any test sensitivity or specificity
with a Beta prior.  Prior log densities are expressed on these coordinates,
so they already carry the change-of-variables Jacobian.
"""
from __future__ import annotations

import math
from typing import List

import numpy as np

from ..epimodel import LABELS, MAX_RATE, SIBR
from ..errors import InvalidInputError
from .likelihood import LikelihoodProblem, ThetaVector, seed_state
from .priors import BetaPrior, DirichletPrior, NormalPrior, PriorSpec, alr_inverse


def _logistic(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


class ParameterSpace:
    def __init__(self, model: str, priors: PriorSpec, tests):
        if model not in LABELS:
            raise InvalidInputError(f"unknown model {model!r}")
        self.model = model
        self.priors = priors
        self.tests = tuple(tests)
        labels = LABELS[model]
        num_tests = len(self.tests)
        if len(priors.sensitivity) != num_tests or len(priors.specificity) != num_tests:
            raise InvalidInputError(
                f"performance priors need {num_tests} entries (one per test)")
        if model == SIBR and priors.eta is None:
            raise InvalidInputError("SIBR fits need an eta prior")

        self.names: List[str] = ["log_r0", "log_gamma"]
        if model == SIBR:
            self.names.append("log_eta")
        self.tau0_free = isinstance(priors.tau0, NormalPrior)
        if self.tau0_free:
            self.names.append("tau0")
        init = priors.initial_state
        self.init_free = isinstance(init, DirichletPrior)
        if self.init_free:
            if len(init.concentrations) != len(labels):
                raise InvalidInputError(f"Dirichlet prior needs {len(labels)} concentrations")
            self.names += [f"alr_{lab}" for lab in labels[:-1]]
            self.fixed_init = None
        else:
            self.fixed_init = np.array(init if init is not None else seed_state(model))
            if self.fixed_init.shape != (len(labels),):
                raise InvalidInputError(f"initial state needs {len(labels)} proportions")
        self.perf_slots = []  # (kind, test index, prior)
        for kind in ("sensitivity", "specificity"):
            for j, entry in enumerate(getattr(priors, kind)):
                if isinstance(entry, BetaPrior):
                    self.perf_slots.append((kind, j, entry))
                    self.names.append(f"logit_{kind}_{self.tests[j]}")
        self.fixed_sens = [v if not isinstance(v, BetaPrior) else None for v in priors.sensitivity]
        self.fixed_spec = [v if not isinstance(v, BetaPrior) else None for v in priors.specificity]
        self.dim = len(self.names)

        self.output_names = ["beta", "r0", "gamma"] + (["eta"] if model == SIBR else [])
        if self.tau0_free:
            self.output_names.append("tau0")
        if self.init_free:
            self.output_names += [f"init_{lab}" for lab in labels]
        self.output_names += [f"{kind}_{self.tests[j]}" for kind, j, _ in self.perf_slots]

    @property
    def estimates_performance(self) -> bool:
        return bool(self.perf_slots)

    # -- decoding ---------------------------------------------------------

    def unpack(self, z):
        """Return ``(rates, tau0, init, sensitivity, specificity)`` for coordinates ``z``."""
        r0 = math.exp(z[0])
        gamma = math.exp(z[1])
        k = 2
        if self.model == SIBR:
            eta = math.exp(z[2])
            k = 3
            rates = np.array([r0 * gamma, gamma, eta])
        else:
            rates = np.array([r0 * gamma, gamma, 0.0])
        if self.tau0_free:
            tau0 = float(z[k])
            k += 1
        else:
            tau0 = self.priors.tau0
        if self.init_free:
            n = len(LABELS[self.model]) - 1
            init = alr_inverse(z[k:k + n])
            k += n
        else:
            init = self.fixed_init
        sens = list(self.fixed_sens)
        spec = list(self.fixed_spec)
        for kind, j, _ in self.perf_slots:
            value = _logistic(z[k])
            k += 1
            (sens if kind == "sensitivity" else spec)[j] = value
        return rates, tau0, init, tuple(sens), tuple(spec)

    def theta(self, z) -> ThetaVector:
        rates, tau0, init, sens, spec = self.unpack(z)
        eta = float(rates[2]) if self.model == SIBR else None
        return ThetaVector(self.model, float(rates[0]), float(rates[1]), eta, tau0,
                           tuple(float(v) for v in init), sens, spec)

    def natural(self, z) -> np.ndarray:
        """Output-column values for coordinates ``z`` (order of ``output_names``)."""
        rates, tau0, init, sens, spec = self.unpack(z)
        out = [rates[0], math.exp(z[0]), rates[1]]
        if self.model == SIBR:
            out.append(rates[2])
        if self.tau0_free:
            out.append(tau0)
        if self.init_free:
            out.extend(init)
        for kind, j, _ in self.perf_slots:
            out.append((sens if kind == "sensitivity" else spec)[j])
        return np.array(out, dtype=float)

    def encode(self, theta: ThetaVector) -> np.ndarray:
        """Coordinates for a natural-scale parameter vector (inverse of :meth:`theta`)."""
        z = [math.log(theta.r0), math.log(theta.gamma)]
        if self.model == SIBR:
            z.append(math.log(theta.eta))
        if self.tau0_free:
            z.append(theta.tau0)
        if self.init_free:
            x = np.clip(np.asarray(theta.initial_state, dtype=float), 1e-300, None)
            z.extend(np.log(x[:-1]) - np.log(x[-1]))
        for kind, j, _ in self.perf_slots:
            v = min(max(getattr(theta, kind)[j], 1e-12), 1 - 1e-12)
            z.append(math.log(v) - math.log1p(-v))
        return np.array(z, dtype=float)

    def coords_from_row(self, row) -> np.ndarray:
        """Coordinates from a mapping of output-column values (e.g. a posterior CSV row)."""
        z = [math.log(row["r0"]), math.log(row["gamma"])]
        if self.model == SIBR:
            z.append(math.log(row["eta"]))
        if self.tau0_free:
            z.append(float(row["tau0"]))
        if self.init_free:
            x = np.clip([float(row[f"init_{lab}"]) for lab in LABELS[self.model]], 1e-300, None)
            z.extend(np.log(x[:-1]) - np.log(x[-1]))
        for kind, j, _ in self.perf_slots:
            v = min(max(float(row[f"{kind}_{self.tests[j]}"]), 1e-300), 1 - 1e-16)
            z.append(math.log(v) - math.log1p(-v))
        return np.array(z, dtype=float)

    # -- prior ------------------------------------------------------------

    def log_prior(self, z) -> float:
        p = self.priors
        lp = p.r0.log_density_log_scale(z[0]) + p.gamma.log_density_log_scale(z[1])
        k = 2
        if self.model == SIBR:
            lp += p.eta.log_density_log_scale(z[2])
            k = 3
        if self.tau0_free:
            lp += p.tau0.log_density(z[k])
            k += 1
        if self.init_free:
            n = len(LABELS[self.model]) - 1
            lp += p.initial_state.log_density_alr_scale(z[k:k + n])
            k += n
        for _, _, prior in self.perf_slots:
            lp += prior.log_density_logit_scale(z[k])
            k += 1
        return lp

    def sample_prior(self, rng) -> np.ndarray:
        p = self.priors
        z = [p.r0.sample_log_scale(rng), p.gamma.sample_log_scale(rng)]
        if self.model == SIBR:
            z.append(p.eta.sample_log_scale(rng))
        if self.tau0_free:
            z.append(p.tau0.sample(rng))
        if self.init_free:
            z.extend(p.initial_state.sample_alr_scale(rng))
        for _, _, prior in self.perf_slots:
            z.append(prior.sample_logit_scale(rng))
        return np.array(z, dtype=float)


class Posterior:
    """Unnormalized log posterior on the unconstrained coordinates."""

    def __init__(self, problem: LikelihoodProblem, space: ParameterSpace):
        if problem.model != space.model:
            raise InvalidInputError("likelihood and parameter space disagree on the model")
        self.problem = problem
        self.space = space
        self._fixed_cond = None
        if not space.estimates_performance:
            self._fixed_cond = problem.cond_matrix(space.fixed_sens, space.fixed_spec)

    def log_likelihood(self, z) -> float:
        if not all(math.isfinite(v) for v in z):
            return -math.inf
        try:
            rates, tau0, init, sens, spec = self.space.unpack(z)
        except OverflowError:
            return -math.inf
        beta, gamma, eta = rates.tolist()
        if self.space.model != SIBR:
            eta = gamma
        if not (0.0 < min(beta, gamma, eta) and max(beta, gamma, eta) <= MAX_RATE):
            return -math.inf
        cond = self._fixed_cond
        if cond is None:
            cond = self.problem.cond_matrix(sens, spec)
        return self.problem.evaluate(rates, tau0, init, cond) if self.problem.num_records else 0.0

    def log_density(self, z) -> float:
        try:
            lp = self.space.log_prior(z)
        except OverflowError:
            return -math.inf
        if not math.isfinite(lp):
            return -math.inf
        ll = self.log_likelihood(z)
        if ll != ll:  # NaN from a pathological state counts as impossible
            return -math.inf
        return lp + ll

    def __call__(self, z) -> float:
        return self.log_density(z)

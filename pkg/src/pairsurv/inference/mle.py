"""Maximum likelihood by multi-start Nelder-Mead on the unconstrained coordinates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import optimize

from ..charmap import CharacterizationMap
from ..data import SurveillanceDataset
from ..epimodel import DEFAULT_STEP
from ..errors import InvalidInputError, NonConvergenceError
from .likelihood import LikelihoodProblem, ThetaVector
from .priors import PriorSpec
from .space import ParameterSpace, Posterior

# penalty objective for starts with zero likelihood or failed integration
PENALTY = 1e12
# log-rate coordinates beyond this are treated as pinned to 0 or infinity
LOG_RATE_EDGE = 12.0
LOGIT_EDGE = 15.0


@dataclass
class MleResult:
    theta: ThetaVector
    coords: np.ndarray
    estimate: dict
    log_likelihood: float
    iterations: int
    n_starts: int
    n_converged: int
    objective_spread: float  # max - min log-likelihood over converged starts near the best
    agreement: bool
    boundary: bool
    reasons: List[str] = field(default_factory=list)

    def report(self) -> dict:
        return {
            "estimate": self.estimate,
            "log_likelihood": self.log_likelihood,
            "iterations": self.iterations,
            "starts": self.n_starts,
            "converged_starts": self.n_converged,
            "objective_spread": self.objective_spread,
            "multi_start_agreement": self.agreement,
            "boundary": self.boundary,
            "boundary_reasons": self.reasons,
        }


def _objective(post):
    def f(z):
        ll = post.log_likelihood(z)
        return PENALTY if not math.isfinite(ll) else -ll
    return f


def _data_reasons(data: SurveillanceDataset) -> List[str]:
    reasons = []
    observed = data.results[data.results >= 0]
    if observed.size == 0 or not np.any(observed == 1):
        reasons.append("no positive test results: epidemic signal unidentifiable")
    if np.unique(data.times).size < 2:
        reasons.append("all records share one collection time")
    return reasons


def mle_fit(data: SurveillanceDataset, cmap: CharacterizationMap, model: str,
            priors: Optional[PriorSpec] = None, starts: int = 8, max_iters: int = 4000,
            seed: int = 0, step: float = DEFAULT_STEP, ftol: float = 1e-8) -> MleResult:
    """Maximize the likelihood over the parameters the prior specification leaves free.

    Priors only choose which parameters are free and supply random starting
    points; they do not enter the objective.  Each start runs Nelder-Mead to
    an objective spread below ``ftol`` and is then restarted once from its
    end point.
    """
    if len(data) < 1:
        raise InvalidInputError("maximum likelihood needs at least one record")
    priors = priors or PriorSpec()
    problem = LikelihoodProblem(data, cmap, model, step)
    space = ParameterSpace(model, priors, cmap.tests)
    post = Posterior(problem, space)
    f = _objective(post)
    rng = np.random.default_rng([int(seed), 0x4D4C45])

    results = []
    total_iters = 0
    for _ in range(starts):
        z0 = space.sample_prior(rng)
        for _ in range(20):
            if f(z0) < PENALTY:
                break
            z0 = space.sample_prior(rng)
        res = None
        x = z0
        for _ in range(2):
            res = optimize.minimize(f, x, method="Nelder-Mead",
                                    options={"maxiter": max_iters, "maxfev": 2 * max_iters,
                                             "xatol": 1e-7, "fatol": ftol, "adaptive": True})
            total_iters += int(res.nit)
            x = res.x
        results.append(res)

    finite = [r for r in results if r.fun < PENALTY]
    converged = [r for r in finite if r.success]
    if not finite:
        raise NonConvergenceError("every start has zero likelihood", best=None)
    best = min(finite, key=lambda r: r.fun)
    if not converged:
        raise NonConvergenceError(
            f"no start converged within {max_iters} iterations", best=best)

    z = np.asarray(best.x, dtype=float)
    ll = -float(best.fun)
    near = [r for r in converged if r.fun - best.fun < 1e-3]
    spread = float(max(r.fun for r in near) - min(r.fun for r in near))
    nat = np.array([space.natural(r.x) for r in near])
    rel = np.ptp(nat, axis=0) / np.maximum(np.abs(nat).max(axis=0), 1e-12)
    agreement = bool(len(near) >= 2 and np.all(rel < 0.05))

    reasons = _data_reasons(data)
    n_rates = 3 if "log_eta" in space.names else 2
    if np.any(np.abs(z[:n_rates]) > LOG_RATE_EDGE):
        reasons.append("a rate estimate is pinned near 0 or infinity")
    for k, name in enumerate(space.names):
        if name.startswith("logit_") and abs(z[k]) > LOGIT_EDGE:
            reasons.append(f"{name[6:]} estimate is pinned at 0 or 1")
    if len(near) >= 2 and not agreement:
        reasons.append("starts reach the same likelihood at different parameters (flat ridge)")

    return MleResult(space.theta(z), z, dict(zip(space.output_names, space.natural(z).tolist())),
                     ll, total_iters, starts, len(converged), spread, agreement,
                     bool(reasons), reasons)

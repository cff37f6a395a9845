"""Prior families and the prior specification for a fit."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np
from scipy import special, stats

from ..errors import InvalidInputError


def gamma_hyperparams_from_moments(mean: float, variance: float) -> Tuple[float, float]:
    """Shape and rate of the Gamma distribution with the given mean and variance."""
    if not (mean > 0 and variance > 0):
        raise InvalidInputError("Gamma moments must be positive")
    return mean * mean / variance, mean / variance


def beta_from_r0(r0: float, gamma: float) -> float:
    """Transmission rate implied by a reproductive number and a recovery rate."""
    if not (r0 > 0 and gamma > 0):
        raise InvalidInputError("r0 and gamma must be positive")
    return r0 * gamma


def _positive(name, *values):
    for v in values:
        if not (math.isfinite(v) and v > 0):
            raise InvalidInputError(f"{name} hyperparameters must be finite and positive, got {values}")


@dataclass(frozen=True)
class GammaPrior:
    shape: float
    rate: float

    def __post_init__(self):
        _positive("Gamma", self.shape, self.rate)

    @classmethod
    def from_moments(cls, mean, variance):
        return cls(*gamma_hyperparams_from_moments(mean, variance))

    @property
    def mean(self):
        return self.shape / self.rate

    @property
    def variance(self):
        return self.shape / self.rate ** 2

    def dist(self):
        return stats.gamma(self.shape, scale=1.0 / self.rate)

    def log_density_log_scale(self, z):
        """Log density of ``log X`` at ``z`` (includes the exp Jacobian)."""
        return (self.shape * math.log(self.rate) - math.lgamma(self.shape)
                + self.shape * z - self.rate * math.exp(z))

    def sample_log_scale(self, rng):
        # log of a Gamma draw; the shape-boost trick keeps tiny shapes from underflowing
        if self.shape < 1.0:
            g = rng.gamma(self.shape + 1.0)
            return math.log(g) + math.log(rng.uniform()) / self.shape - math.log(self.rate)
        return math.log(rng.gamma(self.shape)) - math.log(self.rate)


@dataclass(frozen=True)
class NormalPrior:
    mean: float
    variance: float

    def __post_init__(self):
        if not math.isfinite(self.mean):
            raise InvalidInputError("Normal mean must be finite")
        _positive("Normal variance", self.variance)

    def dist(self):
        return stats.norm(self.mean, math.sqrt(self.variance))

    def log_density(self, x):
        return -0.5 * (math.log(2 * math.pi * self.variance) + (x - self.mean) ** 2 / self.variance)

    def sample(self, rng):
        return rng.normal(self.mean, math.sqrt(self.variance))


@dataclass(frozen=True)
class BetaPrior:
    a: float
    b: float

    def __post_init__(self):
        _positive("Beta", self.a, self.b)

    def dist(self):
        return stats.beta(self.a, self.b)

    def log_density_logit_scale(self, z):
        """Log density of ``logit X`` at ``z``."""
        # log x = -softplus(-z), log(1-x) = -softplus(z)
        log_x = -np.logaddexp(0.0, -z)
        log_1mx = -np.logaddexp(0.0, z)
        return float(self.a * log_x + self.b * log_1mx - special.betaln(self.a, self.b))

    def sample_logit_scale(self, rng):
        x = rng.beta(self.a, self.b)
        x = min(max(x, 1e-12), 1.0 - 1e-12)
        return math.log(x) - math.log1p(-x)


@dataclass(frozen=True)
class DirichletPrior:
    concentrations: tuple

    def __post_init__(self):
        conc = tuple(float(c) for c in self.concentrations)
        _positive("Dirichlet", *conc)
        object.__setattr__(self, "concentrations", conc)

    def log_density_alr_scale(self, z):
        """Log density of the additive log-ratio coordinates ``z`` (last component is the reference)."""
        z = np.asarray(z, dtype=float)
        full = np.append(z, 0.0)
        log_x = full - special.logsumexp(full)
        alpha = np.array(self.concentrations)
        # Jacobian of alr^{-1} is prod(x): adds sum(log x) to the Dirichlet log density
        return float(special.gammaln(alpha.sum()) - special.gammaln(alpha).sum()
                     + np.dot(alpha, log_x))

    def sample_alr_scale(self, rng):
        x = rng.dirichlet(self.concentrations)
        x = np.clip(x, 1e-300, None)
        return np.log(x[:-1]) - np.log(x[-1])


def alr_inverse(z) -> np.ndarray:
    full = np.append(np.asarray(z, dtype=float), 0.0)
    full -= full.max()
    w = np.exp(full)
    return w / w.sum()



@dataclass(frozen=True)
class PriorSpec:
    """Priors for one fit.

    Rates use Gamma priors on ``R0``, ``gamma`` and ``eta``; the prior on
    ``beta`` is induced through ``beta = R0 * gamma``.  ``tau0`` takes a
    Normal prior or a fixed value.  The initial state is fixed (``None``
    means the seed state with 0.1% infectious) unless a Dirichlet prior is
    given.  Test performance entries are fixed numbers or
    Beta priors, one per test.
    """

    r0: GammaPrior = field(default_factory=lambda: GammaPrior.from_moments(2.5, 100.0))
    gamma: GammaPrior = field(default_factory=lambda: GammaPrior.from_moments(2.0, 2.0))
    eta: Optional[GammaPrior] = field(default_factory=lambda: GammaPrior.from_moments(2.0, 2.0))
    tau0: Union[NormalPrior, float] = field(default_factory=lambda: NormalPrior(0.0, 100.0))
    initial_state: Union[DirichletPrior, tuple, None] = None
    sensitivity: tuple = (1.0, 1.0)
    specificity: tuple = (1.0, 1.0)

    def __post_init__(self):
        if not isinstance(self.tau0, NormalPrior):
            object.__setattr__(self, "tau0", float(self.tau0))
        if self.initial_state is not None and not isinstance(self.initial_state, DirichletPrior):
            object.__setattr__(self, "initial_state", tuple(float(v) for v in self.initial_state))
        for name in ("sensitivity", "specificity"):
            entries = tuple(v if isinstance(v, BetaPrior) else float(v) for v in getattr(self, name))
            for v in entries:
                if not isinstance(v, BetaPrior) and not 0.0 <= v <= 1.0:
                    raise InvalidInputError(f"fixed {name} must lie in [0, 1], got {v}")
            object.__setattr__(self, name, entries)


# the estimated-serology configuration: conjugate posteriors of a separate
# validation study, 6/11 positives (sensitivity) and 40/40 negatives (specificity)
VALIDATION_SENSITIVITY = BetaPrior(7.0, 6.0)
VALIDATION_SPECIFICITY = BetaPrior(41.0, 1.0)


def conjugate_beta(successes: int, trials: int, prior: BetaPrior = BetaPrior(1.0, 1.0)) -> BetaPrior:
    """Beta posterior for a binomial proportion."""
    if not 0 <= successes <= trials:
        raise InvalidInputError("need 0 <= successes <= trials")
    return BetaPrior(prior.a + successes, prior.b + trials - successes)

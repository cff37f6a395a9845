"""Adaptive random-walk Metropolis sampling of the posterior.

Each chain owns a random stream derived from ``(seed, chain_id)``.  During
burn-in (by default the first half of the iterations) the proposal
covariance tracks the empirical covariance of the chain and a global scale
is tuned toward a 0.234 acceptance rate; both are frozen afterwards, so
the retained draws come from a fixed Metropolis kernel.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import optimize

from ..charmap import CharacterizationMap
from ..data import SurveillanceDataset
from ..epimodel import DEFAULT_STEP
from ..errors import InitializationError, InvalidInputError
from .likelihood import LikelihoodProblem, ThetaVector
from .priors import PriorSpec
from .space import ParameterSpace, Posterior

log = logging.getLogger(__name__)

MIN_CHAINS = 2
MIN_ITERATIONS = 1000


@dataclass(frozen=True)
class McmcConfig:
    chains: int = 4
    iterations: int = 50_000
    burn_in: Optional[int] = None  # defaults to half the iterations
    thin: int = 10
    seed: int = 0
    init_candidates: int = 32
    init_retries: int = 10
    optimize_init: bool = True
    init_climbs: int = 4  # best prior candidates each climbed by Nelder-Mead
    adapt_every: int = 50

    def __post_init__(self):
        if self.chains < MIN_CHAINS:
            raise InvalidInputError(f"need at least {MIN_CHAINS} chains for convergence checks")
        if self.iterations < MIN_ITERATIONS:
            raise InvalidInputError(f"need at least {MIN_ITERATIONS} iterations per chain")
        if min(self.thin, self.init_candidates, self.init_retries, self.init_climbs, self.adapt_every) < 1:
            raise InvalidInputError("thin and initialization budgets must be positive")
        if self.burn_in is not None and not 0 <= self.burn_in < self.iterations:
            raise InvalidInputError("burn_in must lie in [0, iterations)")

    @property
    def burn(self) -> int:
        return self.iterations // 2 if self.burn_in is None else self.burn_in


@dataclass
class PosteriorChain:
    """Retained draws of one chain, in natural-scale output columns."""

    chain_id: int
    names: tuple
    draws: np.ndarray  # (n, len(names))
    log_posterior: np.ndarray
    iterations: np.ndarray  # 1-based iteration of each retained draw
    acceptance_rate: float
    burn_in: int
    thin: int
    space: Optional[ParameterSpace] = field(default=None, repr=False)

    def __len__(self):
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def theta(self, k: int) -> ThetaVector:
        if self.space is None:
            raise InvalidInputError("chain has no parameter space attached")
        return self.space.theta(self.space.coords_from_row(dict(zip(self.names, self.draws[k]))))

    def thetas(self):
        return [self.theta(k) for k in range(len(self))]


def _neg(post):
    def f(z):
        v = post(z)
        return 1e300 if not math.isfinite(v) else -v
    return f


def initial_point(post: Posterior, rng, config: McmcConfig):
    """Starting coordinates: climb from the best prior draws and keep the highest end point.

    Climbing from several candidates keeps a chain from starting in a
    negligible local mode, which would otherwise survive burn-in.
    """
    space = post.space
    found = []
    for _ in range(config.init_retries):
        for _ in range(config.init_candidates):
            z = space.sample_prior(rng)
            lp = post(z)
            if math.isfinite(lp):
                found.append((lp, len(found), z))
        if found:
            break
    if not found:
        raise InitializationError(
            f"no finite log-posterior among {config.init_retries * config.init_candidates} prior draws")
    found.sort(key=lambda item: (-item[0], item[1]))
    best_lp, _, best_z = found[0]
    if not config.optimize_init:
        return best_z, best_lp
    for lp0, _, z0 in found[:config.init_climbs]:
        res = optimize.minimize(_neg(post), z0, method="Nelder-Mead",
                                options={"maxiter": 300 * space.dim, "xatol": 1e-4, "fatol": 1e-4})
        if math.isfinite(res.fun) and -res.fun > best_lp:
            best_z, best_lp = np.asarray(res.x, dtype=float), -float(res.fun)
    return best_z, best_lp


def run_chain(post: Posterior, config: McmcConfig, chain_id: int) -> PosteriorChain:
    rng = np.random.default_rng([int(config.seed), int(chain_id)])
    space = post.space
    z, lp = initial_point(post, rng, config)
    d = space.dim
    burn = config.burn
    n_iter = config.iterations

    chol = np.eye(d) * 0.1
    log_scale = math.log(2.38 / math.sqrt(d))
    mean = z.copy()
    scatter = np.zeros((d, d))
    n_hist = 0

    eps = rng.standard_normal((n_iter, d))
    log_u = np.log(rng.uniform(size=n_iter))

    n_keep = (n_iter - burn) // config.thin
    draws = np.empty((n_keep, len(space.output_names)))
    lps = np.empty(n_keep)
    iters = np.empty(n_keep, dtype=np.int64)
    kept = 0
    accepted_after_burn = 0

    for it in range(n_iter):
        prop = z + math.exp(log_scale) * (chol @ eps[it])
        lp_prop = post(prop)
        log_alpha = lp_prop - lp if math.isfinite(lp_prop) else -math.inf
        if log_u[it] < log_alpha:
            z, lp = prop, lp_prop
            if it >= burn:
                accepted_after_burn += 1
        if it < burn:
            alpha = math.exp(min(0.0, log_alpha)) if log_alpha > -math.inf else 0.0
            log_scale += (alpha - 0.234) / (it + 1) ** 0.6
            n_hist += 1
            delta = z - mean
            mean += delta / n_hist
            scatter += np.outer(delta, z - mean)
            if (it + 1) % config.adapt_every == 0 and n_hist > 2 * d:
                emp = scatter / (n_hist - 1) + 1e-10 * np.eye(d)
                try:
                    chol_new = np.linalg.cholesky(emp)
                except np.linalg.LinAlgError:
                    chol_new = None
                if chol_new is not None:
                    chol = chol_new
        elif (it - burn + 1) % config.thin == 0 and kept < n_keep:
            draws[kept] = space.natural(z)
            lps[kept] = lp
            iters[kept] = it + 1
            kept += 1

    rate = accepted_after_burn / max(1, n_iter - burn)
    return PosteriorChain(chain_id, tuple(space.output_names), draws[:kept], lps[:kept],
                          iters[:kept], rate, burn, config.thin, space)


def posterior_sample(data: SurveillanceDataset, cmap: CharacterizationMap, model: str,
                     priors: PriorSpec, config: McmcConfig = McmcConfig(),
                     step: float = DEFAULT_STEP, workers: int = 1) -> List[PosteriorChain]:
    """Run ``config.chains`` independent adaptive Metropolis chains.

    Chains are deterministic given ``config.seed`` and do not share state,
    so ``workers > 1`` runs them on a thread pool without changing results.
    """
    problem = LikelihoodProblem(data, cmap, model, step)
    space = ParameterSpace(model, priors, cmap.tests)
    post = Posterior(problem, space)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda c: run_chain(post, config, c), range(config.chains)))
    return [run_chain(post, config, c) for c in range(config.chains)]


def chains_to_csv(chains: List[PosteriorChain], path=None) -> Optional[str]:
    """Retained draws as ``chain,iter,<params>,log_posterior``."""
    names = chains[0].names
    lines = [",".join(("chain", "iter") + tuple(names) + ("log_posterior",))]
    for c in chains:
        for k in range(len(c)):
            cells = [str(c.chain_id), str(int(c.iterations[k]))]
            cells += [format(float(v), ".17g") for v in c.draws[k]]
            cells.append(format(float(c.log_posterior[k]), ".17g"))
            lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"
    if path is None:
        return text
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return None


def chains_from_csv(text: str, space: Optional[ParameterSpace] = None) -> List[PosteriorChain]:
    """Inverse of :func:`chains_to_csv`; ``space`` re-attaches the parameterization."""
    rows = [line.split(",") for line in text.strip().splitlines()]
    if not rows or rows[0][:2] != ["chain", "iter"] or rows[0][-1] != "log_posterior":
        raise InvalidInputError("posterior CSV must start with chain,iter and end with log_posterior")
    names = tuple(rows[0][2:-1])
    if space is not None and tuple(space.output_names) != names:
        raise InvalidInputError(
            f"posterior columns {names} do not match the fit's parameters {tuple(space.output_names)}")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(rows[0]))
    except ValueError as exc:
        raise InvalidInputError(f"malformed posterior CSV: {exc}") from None
    out = []
    for cid in sorted(set(body[:, 0].astype(int).tolist())):
        part = body[body[:, 0] == cid]
        out.append(PosteriorChain(cid, names, part[:, 2:-1].copy(), part[:, -1].copy(),
                                  part[:, 1].astype(np.int64), math.nan, 0, 1, space))
    return out

"""Likelihood evaluation, maximum likelihood and Bayesian estimation."""
from .likelihood import LikelihoodProblem, ThetaVector, log_likelihood, seed_state
from .mcmc import McmcConfig, PosteriorChain, posterior_sample
from .priors import (BetaPrior, DirichletPrior, GammaPrior, NormalPrior, PriorSpec,
                     beta_from_r0, conjugate_beta, gamma_hyperparams_from_moments)
from .space import ParameterSpace, Posterior
from .mle import MleResult, mle_fit
from .summary import hpdi, split_rhat, ess, summarize

__all__ = [
    "LikelihoodProblem", "ThetaVector", "log_likelihood", "seed_state",
    "McmcConfig", "PosteriorChain", "posterior_sample",
    "BetaPrior", "DirichletPrior", "GammaPrior", "NormalPrior", "PriorSpec",
    "beta_from_r0", "conjugate_beta", "gamma_hyperparams_from_moments",
    "ParameterSpace", "Posterior", "MleResult", "mle_fit",
    "hpdi", "split_rhat", "ess", "summarize",
]

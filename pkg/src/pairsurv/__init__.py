"""Joint analysis of paired pathogen and antibody surveillance data.

Modules: ``epimodel`` (SIR/SIBR dynamics), ``charmap`` (test outcomes to
compartments), ``data`` (record ingestion), ``inference`` (likelihood,
maximum likelihood, adaptive MCMC), ``diagnostics`` (log-score, CRPS,
posterior predictive checks), ``simstudy`` (sampling-design study) and
``cli``.
"""
__version__ = "0.1.0"

"""Latent-infectiousness endemic-epidemic models for surveillance counts
stratified by region and age group.

Submodules
----------
panel      data model and CSV ingestion
mixing     geographic and age-group mixing weights
dgp        forward simulators
posterior  log-density and gradients (JAX)
sampler    NUTS sampler and convergence diagnostics
forecast   posterior-predictive forecasting and log scores
oracle     closed-form conditional moments and Monte Carlo checks
study      desk-scale coverage, forecast-score and calibration studies
cli        command-line entry point
"""

__version__ = "0.1.0"

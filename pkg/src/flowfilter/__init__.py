"""Flow-based Bayesian filtering: normalizing flows onto a latent linear-Gaussian model."""

__version__ = "0.1.0"

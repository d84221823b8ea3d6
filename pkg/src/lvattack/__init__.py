"""Whitebox adversarial attacks via latent-variable perturbation generators."""

__version__ = "0.1.0"

"""Structured policy representations: set encoder, RNC-ordered latents, latent steering."""

__version__ = "0.1.0"

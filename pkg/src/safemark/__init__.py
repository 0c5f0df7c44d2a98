"""Traceable invisible watermarking for latent diffusion."""

__version__ = "0.1.0"

__all__ = ["autoencoder", "cli", "corpus", "datamodel", "diffuser", "evalharness", "pipeline", "scheduler", "trigger"]

"""Single-step latent adversarial training, baselines, and linearity metrics."""

from . import attacks, autodiff, config, data, metrics, models, training

__all__ = ["attacks", "autodiff", "config", "data", "metrics", "models", "training"]
__version__ = "0.1.0"

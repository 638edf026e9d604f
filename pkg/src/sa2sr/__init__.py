"""Sentiment-aware ASR pre-training and speech emotion recognition toolkit."""

from . import autodiff, config, frontend, manifest, metrics, network, objectives, synth, tokens, trainer

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "config",
    "frontend",
    "manifest",
    "metrics",
    "network",
    "objectives",
    "synth",
    "tokens",
    "trainer",
    "__version__",
]

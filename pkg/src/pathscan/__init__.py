"""Pathologist attention modeling: trajectory simplification, synthetic
corpora, two-stage attention models, rollout, baselines, and metrics."""

from .io import VERSION as __version__

__all__ = ["__version__"]

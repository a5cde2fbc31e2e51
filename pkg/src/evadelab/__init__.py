"""Hierarchical diffusion + soft actor-critic evader for pursuit-evasion games."""

__version__ = "0.1.0"

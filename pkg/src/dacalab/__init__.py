"""Desk-scale RL post-training lab for masked diffusion language models."""

__version__ = "0.1.0"

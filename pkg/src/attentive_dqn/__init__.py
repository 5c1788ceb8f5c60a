"""Visually attentive deep Q-learning: CNN feature maps read by a low-rank transformer encoder."""

__version__ = "0.1.0"

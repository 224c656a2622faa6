"""Rebalanced contrastive learning for long-tail classification."""

__version__ = "0.1.0"

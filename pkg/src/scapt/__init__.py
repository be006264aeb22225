"""Supervised contrastive pre-training for aspect-level sentiment, on a hand-written numpy autodiff engine."""

__version__ = "0.1.0"

"""Dual-encoder video-text retrieval at desk scale.

A space-time transformer visual encoder, a small bidirectional text
encoder, symmetric contrastive training with temporal curriculum
learning, and a recall-at-K evaluation harness, all built on an
in-package autodiff tensor core that is verified by finite differences.
"""

__version__ = "0.1.0"

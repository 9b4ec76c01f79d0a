"""Contrastive self-distillation for compressing super-resolution networks."""

__version__ = "0.1.0"

"""Rare-class synthetic data augmentation with LoRA-adapted toy diffusion models."""

__version__ = "0.1.0"

"""Sharpness-guided layer-selective adversarial fine-tuning for tiny vision transformers."""

__version__ = "0.1.0"

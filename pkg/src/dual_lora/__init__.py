"""Dual-LoRA cross-lingual speaker verification on a numpy autodiff core."""

__version__ = "0.1.0"

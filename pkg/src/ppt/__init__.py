"""Uncertainty-aware, prompt-tuned transfer learning for digital-twin TTE prediction."""

__version__ = "0.1.0"

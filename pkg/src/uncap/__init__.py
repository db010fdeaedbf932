"""Unpaired image captioning with learned semantic prompts, adversarial
caption generation, and metric-gated pseudo-label self-training."""

__version__ = "0.1.0"

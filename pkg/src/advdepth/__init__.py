"""Self-supervised monocular depth estimation with optional adversarial training."""

__version__ = "0.1.0"

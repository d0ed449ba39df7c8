"""prompt-bandit: inference-time bandit prompt-tuning for prompt-conditioned policies."""

__version__ = "0.1.0"

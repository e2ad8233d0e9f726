"""Test-time adaptation for video QA: frequency rewards, GRPO on a toy policy,
and a multiplicative-weights frame bandit, with a synthetic video-QA simulator."""

__version__ = "0.1.0"

"""Adaptive tool-use GRPO on a simulated vision-tool environment."""

__version__ = "0.1.0"

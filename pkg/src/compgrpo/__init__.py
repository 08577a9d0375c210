"""Outcome-level GRPO for compositional generalization at desk scale."""

__version__ = "0.1.0"

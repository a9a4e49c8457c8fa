"""Embedded self-prediction RL: GVF-structured Q-functions and sound contrastive explanations."""

__version__ = "0.1.0"

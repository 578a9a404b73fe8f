"""Dual goal representations for offline goal-conditioned RL on Lights Out puzzles."""

__version__ = "0.1.0"

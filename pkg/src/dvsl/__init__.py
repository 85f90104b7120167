"""Differential variable speed limit control with deep reinforcement learning."""
__version__ = "0.1.0"

"""Particle-belief reinforcement learning for POMDPs."""

__version__ = "0.1.0"

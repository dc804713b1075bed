"""Middlepoint traffic engineering with a message-passing GNN policy trained by PPO."""

__version__ = "0.1.0"

"""Reward-guided stepwise code agent for tool invocation."""

__version__ = "0.1.0"

"""Planner-policy co-training in a seeded crafting gridworld."""

__version__ = "0.1.0"

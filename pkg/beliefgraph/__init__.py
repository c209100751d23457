"""
Belief-graph agent laboratory.

A desk-scale environment for training text-game agents that keep a
graph-structured belief of the world they cannot fully observe.
"""

__version__ = "0.1.0"

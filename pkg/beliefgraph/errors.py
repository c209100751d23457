#!/usr/bin/env python3
"""
Exception hierarchy for the belief-graph laboratory.
"""


class BeliefGraphError(Exception):
    """Base class for every error raised by this package"""


class DomainError(BeliefGraphError, ValueError):
    """An operation was called outside its domain (bad argument, bad state)"""


class ConfigError(BeliefGraphError):
    """Configuration document or override could not be applied"""


class CheckpointError(BeliefGraphError):
    """Checkpoint archive is malformed or does not match the model"""


class CorpusError(BeliefGraphError):
    """Game set or transition corpus on disk is malformed"""

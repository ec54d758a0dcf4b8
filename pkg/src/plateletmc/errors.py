"""Exception types shared across the package."""

from __future__ import annotations


class PlateletMCError(Exception):
    """Base class for all errors raised by plateletmc."""


class InvalidInput(PlateletMCError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(InvalidInput):
    """A model or training configuration is invalid."""


class PolicyFormatError(PlateletMCError):
    """A policy weight file is malformed or inconsistent with its dims."""


class ModelFormatError(PlateletMCError):
    """A stored model artifact or explicit export cannot be read."""


class UnknownLabel(InvalidInput):
    def __init__(self, label: str):
        super().__init__(f"undeclared label {label!r}")
        self.label = label


class MemoryBudgetExceeded(PlateletMCError):
    def __init__(self, states: int, transitions: int, budget: int):
        super().__init__(
            f"state budget {budget} exceeded after {states} states "
            f"and {transitions} transitions"
        )
        self.states = states
        self.transitions = transitions
        self.budget = budget


class TrainingDiverged(PlateletMCError):
    """Non-finite loss or parameters during gradient training."""

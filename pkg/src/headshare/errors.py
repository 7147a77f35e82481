"""Exception types. Every error carries its class name so the CLI can report it verbatim."""

from __future__ import annotations


class HeadShareError(Exception):
    """Base class for all domain errors raised by this package."""

    @property
    def name(self) -> str:
        return type(self).__name__


# container / store
class MagicMismatch(HeadShareError):
    pass


class HeaderError(HeadShareError):
    pass


class ShapeMismatch(HeadShareError):
    pass


class TruncatedData(HeadShareError):
    pass


class UnknownTensor(HeadShareError):
    pass


class MissingTensor(HeadShareError):
    pass


class HeadOutOfRange(HeadShareError):
    pass


class InvalidConfig(HeadShareError):
    pass


# similarity
class LengthMismatch(HeadShareError):
    pass


class ZeroVector(HeadShareError):
    pass


class SameHead(HeadShareError):
    pass


# sharing
class TooFewLayers(HeadShareError):
    pass


class AlphaOutOfRange(HeadShareError):
    pass


class PlanConfigMismatch(HeadShareError):
    pass


# engine
class TokenOutOfRange(HeadShareError):
    pass


# postshare
class EmptyPlan(HeadShareError):
    pass


class NonFiniteLoss(HeadShareError):
    def __init__(self, step: int, message: str = ""):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")

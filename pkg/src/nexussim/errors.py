"""Exception hierarchy shared by every subsystem."""

from __future__ import annotations


class NexusError(Exception):
    """Base class for all domain errors (CLI exit code 1)."""


# geometry
class DegenerateAnchors(NexusError):
    pass


class OutOfLensField(NexusError):
    pass


class InvalidRig(NexusError):
    pass


# spatial mesh
class DegenerateSelection(NexusError):
    pass


class EmptySelection(NexusError):
    pass


class ParseError(NexusError):
    def __init__(self, message: str, line: int = 0):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


# wire protocol
class ProtocolError(NexusError):
    pass


class BadLength(ProtocolError):
    pass


class BadChecksum(ProtocolError):
    pass


class NonUnitDirection(ProtocolError):
    pass


class BadField(ProtocolError):
    pass


class Truncated(ProtocolError):
    """More bytes are needed; the decoder can resume once they arrive."""


class UnknownTag(ProtocolError):
    pass


class UnsupportedVersion(ProtocolError):
    pass


class LengthMismatch(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    pass


# session engine
class UnknownCutout(NexusError):
    pass


class UnknownObject(NexusError):
    pass


class StaleSeq(NexusError):
    pass


class GrabConflict(NexusError):
    pass


class RoleViolation(NexusError):
    pass


# replica pipeline
class InsufficientPoints(NexusError):
    pass


class InsufficientFrames(NexusError):
    pass


class EmptyMask(NexusError):
    pass


class EmptyGrid(NexusError):
    pass


class EmptyMesh(NexusError):
    pass


class ManifestError(NexusError):
    pass


class StageError(NexusError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")


# net-sim
class ScenarioError(NexusError):
    pass


class AssertionFailure(NexusError):
    def __init__(self, message: str, diff: str = ""):
        self.diff = diff
        super().__init__(message + (("\n" + diff) if diff else ""))

"""
Error types raised by the engine.

``InputError`` subclasses describe bad inputs (CLI exit code 2),
``ProcessingError`` subclasses describe failures while computing (exit code 3).
"""


class Drive4DError(Exception):
    """Base class for every engine error."""


class InputError(Drive4DError):
    exit_code = 2


class ProcessingError(Drive4DError):
    exit_code = 3


# --- scene_io ---
class ParseError(InputError):
    pass


class ValidationError(InputError):
    pass


class FormatError(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class BadMagic(InputError):
    pass


class UnsupportedVersion(InputError):
    pass


class TruncatedFile(InputError):
    pass


# --- rendering / evaluation / cli ---
class EmptySelection(InputError):
    pass


class TooFewFrames(InputError):
    pass


class EmptyMask(InputError):
    pass


class TooSmall(InputError):
    pass


class MissingCounterpart(InputError):
    pass


class InvalidTrajectory(InputError):
    pass


# --- geometry / reconstruction / alignment ---
class BehindCamera(ProcessingError):
    pass


class NonPositiveDepth(ProcessingError):
    pass


class MixedFrames(ProcessingError):
    pass


class WrongFrameTag(ProcessingError):
    pass


class DegenerateConfiguration(ProcessingError):
    pass


class InsufficientCorrespondences(ProcessingError):
    pass


class AlignmentFailed(ProcessingError):
    pass


class IoError(ProcessingError):
    pass

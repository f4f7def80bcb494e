"""Exception types shared across the package."""


class VotunerError(Exception):
    """Base class for all package-specific errors."""


class ImageTooSmall(VotunerError):
    pass


class OutOfBounds(VotunerError):
    pass


class MissingFrame(VotunerError):
    pass


class CorruptFlow(VotunerError):
    pass


class MalformedPoseLine(VotunerError):
    pass


class EmptyInput(VotunerError):
    pass


class InsufficientCorrespondences(VotunerError):
    pass


class DegenerateConfiguration(VotunerError):
    pass


class DuplicateWaypointTimes(VotunerError):
    pass


class FrameMismatch(VotunerError):
    pass


class EmptySequence(VotunerError):
    pass


class DimensionMismatch(VotunerError):
    pass


class LengthMismatch(VotunerError):
    pass


class EmptyBuffer(VotunerError):
    pass


class MissingReferenceRun(VotunerError):
    pass


class SequenceMismatch(VotunerError):
    pass


class InvalidConfig(VotunerError):
    pass

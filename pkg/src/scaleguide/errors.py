"""Exception types shared across the toolkit."""


class ScaleGuideError(Exception):
    """Base class for all toolkit errors."""


class EmptyAnnotationSet(ScaleGuideError, ValueError):
    pass


class OutOfRange(ScaleGuideError, ValueError):
    pass


class SupportMismatch(ScaleGuideError, ValueError):
    """q is zero on a bin where p has mass, so KL(p||q) is infinite."""


class DegenerateDistribution(ScaleGuideError, ValueError):
    pass


class BadRange(ScaleGuideError, ValueError):
    pass


class ShapeMismatch(ScaleGuideError, ValueError):
    pass


class Diverged(ScaleGuideError, RuntimeError):
    pass


class ShelfFull(ScaleGuideError):
    pass


class MissingPredictor(ScaleGuideError, ValueError):
    pass


class ProtocolViolation(ScaleGuideError):
    pass


class NonZeroExit(ScaleGuideError):
    def __init__(self, returncode, stderr):
        super().__init__(f"external proposer exited with {returncode}: {stderr.strip()}")
        self.returncode = returncode
        self.stderr = stderr


class IoFailure(ScaleGuideError, OSError):
    pass

"""Exception types raised across the package.

All of them derive from ``ValueError`` so callers that only care about
"bad input" can catch one thing.
"""


class PedlocError(ValueError):
    pass


class InvalidIntrinsicsError(PedlocError):
    pass


class BehindCameraError(PedlocError):
    pass


class DegeneratePoseError(PedlocError):
    pass


class InvalidDistanceError(PedlocError):
    pass


class InvalidHeightError(PedlocError):
    pass


class InvalidTargetError(PedlocError):
    pass


class BatchNormError(PedlocError):
    pass


class DivergenceError(PedlocError):
    pass


class UntrainedModelError(PedlocError):
    pass


class UnresolvableDistanceError(PedlocError):
    pass


class SceneGenerationError(PedlocError):
    pass


class ParseError(PedlocError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaError(PedlocError):
    """Raised with every offending field collected, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class VersionMismatchError(PedlocError):
    pass

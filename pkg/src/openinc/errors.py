"""Exception types raised across the package."""


class OpenIncError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(OpenIncError, ValueError):
    pass


class DegenerateVector(OpenIncError, ValueError):
    pass


class EmptyInput(OpenIncError, ValueError):
    pass


class NonScalarRoot(OpenIncError, ValueError):
    pass


class InvalidCount(OpenIncError, ValueError):
    pass


class BatchTooSmall(OpenIncError, ValueError):
    pass


class NonUnitRows(OpenIncError, ValueError):
    pass


class LabelOutOfRange(OpenIncError, ValueError):
    pass


class DegenerateTriplet(OpenIncError, ValueError):
    pass


class AlphaOutOfRange(OpenIncError, ValueError):
    pass


class QuotaExceedsClass(OpenIncError, ValueError):
    pass


class EmptyClass(OpenIncError, ValueError):
    pass


class MemoryTooSmall(OpenIncError, ValueError):
    pass


class DuplicateClass(OpenIncError, ValueError):
    pass


class EmptyStore(OpenIncError, ValueError):
    pass


class NoClasses(OpenIncError, ValueError):
    pass


class MissingThreshold(OpenIncError, ValueError):
    pass


class EmptySide(OpenIncError, ValueError):
    pass


class SingleClass(OpenIncError, ValueError):
    pass


class ZeroInterSpread(OpenIncError, ValueError):
    pass


class InvalidSpec(OpenIncError, ValueError):
    pass


class IndivisibleSplit(OpenIncError, ValueError):
    pass


class MissingColumn(OpenIncError, ValueError):
    pass


class ParseError(OpenIncError, ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ValidationError(OpenIncError, ValueError):
    """Invalid experiment configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str = ""):
        super().__init__(f"{key}: {message}" if message else key)
        self.key = key


class RunFailed(OpenIncError, RuntimeError):
    """A (method, seed) run stopped; ``cause`` is the underlying error as text."""

    def __init__(self, method: str, seed: int, session, cause):
        cause = cause if isinstance(cause, str) else f"{type(cause).__name__}: {cause}"
        super().__init__(f"method={method} seed={seed} session={session}: {cause}")
        self.method = method
        self.seed = seed
        self.session = session
        self.cause = cause

    def __reduce__(self):
        return type(self), (self.method, self.seed, self.session, self.cause)

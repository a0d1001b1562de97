"""Exception hierarchy shared across the package."""


class QACircError(Exception):
    """Base class; the CLI maps these to exit code 1."""


class InvalidShape(QACircError, ValueError):
    pass


class NonFiniteInput(QACircError, ValueError):
    pass


class InvalidDistribution(QACircError, ValueError):
    pass


class SequenceTooLong(QACircError):
    def __init__(self, message, partial=None):
        super().__init__(message)
        # (tokens, traces) produced before the overflow, if any
        self.partial = partial


class FixtureInfeasible(QACircError):
    pass


class FormatError(QACircError):
    pass


class CorruptWeights(QACircError):
    pass


class NotCaptured(QACircError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class AlignmentError(QACircError):
    pass


class InsufficientEntropy(QACircError):
    pass


class PartitionError(QACircError):
    pass


class Unsupported(QACircError):
    pass


class Incomparable(QACircError):
    pass


class InvalidWindow(QACircError):
    pass


class InvalidSpec(QACircError):
    pass


class InvalidDataset(QACircError):
    pass


class UndefinedRelScore(QACircError, ZeroDivisionError):
    pass


class OverlapWarning(UserWarning):
    """Evaluation examples overlap the set a circuit was extracted from."""

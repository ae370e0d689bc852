"""Exception hierarchy shared by every fedostc module."""


class FedOSTCError(Exception):
    """Base class for all errors raised by this package."""


# graph
class GraphError(FedOSTCError, ValueError):
    pass


class NonSquareError(GraphError):
    pass


class NonBinaryEntryError(GraphError):
    pass


class NegativeDistanceError(GraphError):
    pass


class AsymmetricInputError(GraphError):
    pass


# model / attention
class ShapeMismatchError(FedOSTCError, ValueError):
    pass


class WrongLengthError(ShapeMismatchError):
    pass


class LengthMismatchError(ShapeMismatchError):
    pass


class CacheMismatchError(FedOSTCError, ValueError):
    pass


class ZeroEpsilonError(FedOSTCError, ValueError):
    pass


class EmptyNeighborSetError(FedOSTCError, ValueError):
    pass


class OutOfRangeInputError(FedOSTCError, ValueError):
    pass


# client / server
class NonfiniteGradientError(FedOSTCError, ArithmeticError):
    def __init__(self, round_index, client, message=None):
        self.round_index = round_index
        self.client = client
        super().__init__(message or f"non-finite gradient at round {round_index}, client {client}")


class MissingClientStateError(FedOSTCError, KeyError):
    pass


class LayoutMismatchError(FedOSTCError, ValueError):
    pass


class BufferCorruptionError(FedOSTCError, RuntimeError):
    pass


# data / simulator
class DataError(FedOSTCError, ValueError):
    pass


class RaggedRowsError(DataError):
    pass


class EmptyFileError(DataError):
    pass


class AllMissingColumnError(DataError):
    pass


class WarmupTooSmallError(DataError):
    pass


class TooShortError(DataError):
    pass


class DataExhaustedError(DataError):
    pass


class MisalignmentError(FedOSTCError, ValueError):
    pass


class EmptyInputError(FedOSTCError, ValueError):
    pass


# cli
class BadConfigError(FedOSTCError, ValueError):
    pass


class ToleranceExceededError(FedOSTCError, AssertionError):
    pass

"""Exception types shared across the package."""


class SceneGraphVPRError(Exception):
    """Base class for all package errors."""


class DataError(SceneGraphVPRError):
    """Bad input data (malformed documents, missing records)."""


class NumericError(SceneGraphVPRError):
    """A numeric routine produced or received unusable values."""


# scene graphs
class SchemaError(DataError):
    pass


class IntegrityError(DataError):
    pass


# description parsing / service client
class MissingPlaceholder(DataError):
    pass


class GrammarError(DataError):
    def __init__(self, message, position=None):
        if position is not None:
            message = f"{message} (at token {position})"
        super().__init__(message)
        self.position = position


class UnknownRelation(GrammarError):
    pass


class ServiceError(SceneGraphVPRError):
    pass


class NetworkError(ServiceError):
    pass


class AuthError(ServiceError):
    pass


class CacheMiss(ServiceError):
    pass


# merging / features
class EmptyInput(DataError):
    pass


class MissingEmbedding(DataError):
    pass


# encoder / training
class DimensionMismatch(DataError):
    pass


class StaleCache(SceneGraphVPRError):
    pass


class NormViolation(NumericError):
    pass


class EmptyDataset(DataError):
    pass


class NonFiniteLoss(NumericError):
    pass


# retrieval / evaluation
class RangeError(NumericError):
    pass


class UntrainedRegressor(SceneGraphVPRError):
    pass


class EmptyIndex(DataError):
    pass


class MissingCoordinates(DataError):
    pass


class DegenerateTargets(UserWarning):
    """All grid-search targets were equal; a constant policy is used instead."""

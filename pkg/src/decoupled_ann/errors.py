"""Exception types raised by the index components."""


class ANNError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(ANNError, ValueError):
    pass


class EmptyInputError(ANNError, ValueError):
    pass


class EmptyIndexError(ANNError, RuntimeError):
    pass


class _NodeError(ANNError, KeyError):
    what = "node"

    def __init__(self, node):
        super().__init__(node)
        self.node = node

    def __str__(self):
        return f"{self.what} {self.node}"


class UnknownNodeError(_NodeError):
    what = "unknown or non-live node"


class DoubleDeleteError(_NodeError):
    what = "already deleted node"


class DegreeOverflowError(ANNError, ValueError):
    pass


class PageError(ANNError, ValueError):
    """Unknown page, or a split requested on a page that is not full."""


class StoreFullError(ANNError, RuntimeError):
    pass


class ClosedContextError(ANNError, RuntimeError):
    pass


class MalformedRecordError(ANNError, ValueError):
    """A vecs file ended mid-record or mixed dimensions."""

"""Exception types shared across the package."""

import numpy as np


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Raised when a Cholesky pivot is not strictly positive.

    Parameters
    ----------
    pivot : int
        Index (in the permuted ordering) of the failing pivot.
    value : float
        The offending pivot value.
    """

    def __init__(self, pivot, value=float("nan")):
        self.pivot = int(pivot)
        self.value = float(value)
        super().__init__(
            f"matrix is not positive definite: pivot {self.pivot} = {self.value:.3e}"
        )


class DimensionMismatch(ValueError):
    pass


class BadDimension(ValueError):
    pass


class NonPositiveScale(ValueError):
    pass


class TooLargeForDense(ValueError):
    pass


class ModeNotFound(RuntimeError):
    def __init__(self, partitions):
        self.partitions = np.atleast_1d(np.asarray(partitions, dtype=int))
        super().__init__(f"mode not found for partitions {self.partitions.tolist()}")


class NonConvergence(RuntimeError):
    def __init__(self, where, message=""):
        self.where = where
        super().__init__(f"no convergence ({where}) {message}".strip())


class HessianNotNegativeDefinite(np.linalg.LinAlgError):
    pass


class DegenerateChains(ValueError):
    pass


class ConfigError(ValueError):
    """Invalid run configuration; ``line`` and ``field`` locate the problem."""

    def __init__(self, message, field=None, line=None):
        self.field = field
        self.line = line
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)

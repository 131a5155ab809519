"""Exception hierarchy shared across the package."""


class BlockfitError(Exception):
    """Base class for all package-specific errors."""


class GraphBuildError(BlockfitError):
    """Invalid edge or covariate specification (bad index, self-loop, conflict...)."""


class InputFormatError(BlockfitError):
    """Malformed input file (CSV/JSON parsing, missing columns, bad header)."""


class FamilyError(BlockfitError):
    """Invalid edge-family parameter or value outside the family's support."""


class SingularBlockError(FamilyError):
    """Singular design matrix in a regression block.

    Carries the offending block indices as ``block = (q, l)``.
    """

    def __init__(self, block, message=None):
        self.block = tuple(block)
        super().__init__(message or f"singular design in block (q, l) = {self.block}")


class NumericalError(BlockfitError):
    """Optimization failure (non-convergence, all restarts diverged, ...)."""

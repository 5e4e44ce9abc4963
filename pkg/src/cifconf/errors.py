"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage errors exit 1, data/contract
errors exit 2, training divergence exits 3.
"""


class CifconfError(Exception):
    """Base class for all package-specific errors."""


class ShapeMismatch(CifconfError):
    """Operands have incompatible dimensions; message names both shapes."""


class ContractViolation(CifconfError):
    """A documented precondition was violated by the caller."""


class VocabError(CifconfError):
    """A token id lies outside the embedding table's range."""


class DegenerateWeightsError(CifconfError):
    """Firing weights sum to zero where a positive mass is required."""


class EmptyDecodeError(CifconfError):
    """The model fired zero tokens where a non-empty decode is required."""


class DegenerateClassError(CifconfError):
    """A ranking metric needs both positive and negative labels."""


class DataError(CifconfError):
    """A corpus, checkpoint, or report file is missing or malformed."""


class DivergenceError(CifconfError):
    """Training loss became non-finite; message carries the step number."""

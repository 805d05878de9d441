class BlockStructureError(ValueError):
    """
    Partition, dimension or block index mismatch
    """


class ProblemValidationError(ValueError):
    """
    Problem data rejected before any solver runs
    """


class EnumerationBudgetError(ValueError):
    """
    Exhaustive enumeration over samplings would be too large
    """


class NumericalError(RuntimeError):
    pass


class ConvergenceError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class CertificationError(NumericalError):
    pass


class SingularBlockError(NumericalError):
    pass


class BundleFormatError(ValueError):
    """
    Malformed matrix or problem bundle file
    """

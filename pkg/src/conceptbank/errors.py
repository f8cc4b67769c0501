"""Exception and warning types shared across the pipeline.

Two error families map onto the CLI exit codes: PreconditionError (exit 2)
for ordering/contract violations, DataFormatError (exit 3) for unreadable
or inconsistent input data.
"""


class ConceptBankError(Exception):
    """Base class for all errors raised by this package."""


class PreconditionError(ConceptBankError):
    """An operation was invoked outside its contract (wrong layer, missing
    upstream stage, one-class labels, ...)."""


class DataFormatError(ConceptBankError):
    """Input data could not be parsed or is internally inconsistent."""


class DegenerateSigmaWarning(UserWarning):
    """All pairwise distances in a feature channel are zero; the kernel
    radius falls back to 1.0 and every kernel term becomes 1."""

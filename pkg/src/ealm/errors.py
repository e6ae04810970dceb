"""Exception hierarchy shared across the package.

Every error carries a stable class name; the CLI prints it as the
machine-parsable first field of its one-line error report.
"""


class EALMError(Exception):
    """Base class for all package errors."""


class ConfigError(EALMError, ValueError):
    """Invalid configuration or input data."""


class UsageError(EALMError, RuntimeError):
    """An API was called in a state that does not allow it."""


class NumericError(EALMError, FloatingPointError):
    """A tensor contains NaN or Inf."""


class EmptyBatchError(EALMError, ValueError):
    """A loss was requested over zero unmasked positions."""


class ContractError(EALMError):
    """Two components disagree on a shared artifact (vocab, embeddings)."""


class FreezeContractError(ContractError):
    """A tensor that must stay frozen received a gradient or changed."""


class TokenizationError(EALMError, ValueError):
    """A string cannot be encoded under the frozen vocabulary."""

"""Exception hierarchy shared across the package."""


class DPTabICLError(Exception):
    """Base class for all package errors."""


class SchemaError(DPTabICLError, ValueError):
    """Invalid schema, template, or configuration declaration."""


class DataError(DPTabICLError, ValueError):
    """Input data that does not conform to its schema."""

    def __init__(self, message, row=None, column=None):
        if row is not None or column is not None:
            message = f"{message} (row {row}, column {column!r})"
        super().__init__(message)
        self.row = row
        self.column = column


class BudgetError(DPTabICLError, ValueError):
    """Privacy budget outside the admissible range."""


class PrivacyAccountingError(DPTabICLError):
    """Ledger total disagrees with the declared guarantee."""


class EmptyGroupError(DPTabICLError):
    """A GROUP BY bucket received no records."""

    def __init__(self, bucket_id, description=None):
        text = f"GROUP BY bucket {bucket_id} is empty"
        if description:
            text += f" ({description})"
        super().__init__(text)
        self.bucket_id = bucket_id


class RenderError(DPTabICLError, ValueError):
    """A template could not be filled from the given record."""


class BackendError(DPTabICLError):
    """Completion backend failure."""


class TransportError(BackendError):
    """Network failure that persisted through all retries."""


class MalformedResponseError(BackendError):
    """Backend answered with a body we cannot interpret."""

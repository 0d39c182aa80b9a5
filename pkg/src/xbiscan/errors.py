"""Shared exception types."""


class ContractViolation(ValueError):
    """An operation was called with inputs that break its stated contract."""


class XbiscanError(Exception):
    """Base class for recoverable pipeline errors."""

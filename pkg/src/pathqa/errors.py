"""Shared exception hierarchy."""


class PathQAError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(PathQAError):
    """Bad user input: malformed files, inconsistent configuration."""

"""Shared error hierarchy.

Every domain error raised by this package derives from FairlexError so the
CLI can map them onto exit code 1 and surface the error class name verbatim.
"""


class FairlexError(Exception):
    """Base class for all domain errors."""


class MalformedXml(FairlexError):
    """Input is not well-formed XML or lacks required structure."""

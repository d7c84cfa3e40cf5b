"""Base exception for everything raised by this package.

Module-specific errors subclass this so the CLI can turn any library
failure into a typed message and a nonzero exit code.
"""


class SplatError(Exception):
    pass

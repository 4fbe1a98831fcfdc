"""Exception types shared across the package.

Invalid-argument conditions raise plain ValueError; these classes exist for
failures the CLI maps to distinct exit codes.
"""


class ConfigError(Exception):
    """Bad config file, unknown override key, or invalid config value."""


class DataError(Exception):
    """Dataset root, manifest, or referenced sample files are missing/unreadable."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss; carries the offending scalars."""

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms) if terms else {}

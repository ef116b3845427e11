"""
Exception hierarchy.

Every error carries an exit code so the CLI can map failures without
inspecting messages:

    1  usage / configuration problems
    2  bad input data (malformed disassembly, invalid models, empty splits)
    3  model, architecture or vocabulary mismatch
"""


class CgforgeError(Exception):
    """Base class for all cgforge errors."""
    exit_code = 2


class ConfigError(CgforgeError):
    """Raised when a config file or flag holds an invalid value."""
    exit_code = 1


class ParseError(CgforgeError):
    """Raised when a disassembly line cannot be parsed."""

    def __init__(self, message: str, line_no: int | None = None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class ModelError(CgforgeError):
    """Raised when a parsed program violates a structural invariant."""
    pass


class SliceError(CgforgeError):
    """Raised when a callsite or callee cannot be located for slicing."""
    pass


class DataError(CgforgeError):
    """Raised for empty corpora, undersized candidate pools and similar."""
    pass


class ArchMismatchError(CgforgeError):
    """Raised when two models or a model and its input disagree on shape."""
    exit_code = 3


class VocabMismatchError(CgforgeError):
    """Raised when a model was built against a different vocabulary."""
    exit_code = 3

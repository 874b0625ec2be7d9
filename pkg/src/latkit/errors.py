"""Exception hierarchy shared by the library and the CLI."""


class LatError(Exception):
    """Base class for every error raised by latkit."""


class InputError(LatError, ValueError):
    """Bad user input: out-of-range labels, malformed configs, bad boxes."""


class StructuralError(LatError, ValueError):
    """Shapes that do not line up."""


class ParseError(InputError):
    """A binary file could not be decoded."""


class BadMagicError(ParseError):
    pass


class TruncatedError(ParseError):
    pass


class CountMismatchError(ParseError):
    pass


class NumericError(LatError, ArithmeticError):
    """Non-finite values showed up during a computation."""

"""Exception hierarchy shared by all proplab modules."""


class ProplabError(Exception):
    """Base class for every error raised by proplab."""


# expression language -------------------------------------------------------

class ExprSyntaxError(ProplabError):
    """Malformed expression text.

    Attributes
    ----------
    offset : int
        Byte offset of the offending token in the input.
    expected : frozenset of str
        Token kinds that would have been accepted at ``offset``.
    """

    def __init__(self, message, offset, expected=()):
        self.offset = int(offset)
        self.expected = frozenset(expected)
        exp = ", ".join(sorted(self.expected)) if self.expected else "nothing"
        super().__init__(f"{message} at offset {self.offset} (expected: {exp})")


class UnknownIdentifier(ExprSyntaxError):
    """A name outside the allowed variable and function sets."""


class DomainError(ProplabError, ArithmeticError):
    """log/sqrt of a negative argument, or a division by zero."""


class ConfigError(ProplabError, ValueError):
    """Invalid experiment configuration."""


# geometry ------------------------------------------------------------------

class SingularMetric(ProplabError):
    pass


class OutOfChart(ProplabError):
    pass


class SignatureError(ProplabError):
    """Metric is not of Lorentzian signature (-,+,...,+) at a sample point."""


class ChartExit(ProplabError):
    """A trajectory left the chart box.  ``partial`` holds the curve so far."""

    def __init__(self, message, partial=None):
        super().__init__(message)
        self.partial = partial


class StepFailure(ProplabError):
    pass


class Inconclusive(ProplabError):
    """Relation search left the chart before a decision could be made."""


class NonNullPoint(ProplabError, ValueError):
    pass


# symbols -------------------------------------------------------------------

class NotNormallyHyperbolic(ProplabError):
    pass


class TruncationUnderflow(ProplabError):
    pass


class IdentityInapplicable(ProplabError):
    pass


class NotElliptic(ProplabError):
    pass


# transport -----------------------------------------------------------------

class GridMismatch(ProplabError, ValueError):
    pass


class SingularB0(ProplabError):
    pass


class NotRelated(ProplabError):
    pass


# model space / qft / dirac -------------------------------------------------

class UnsupportedDim(ProplabError, ValueError):
    pass


class UnsupportedDimension(UnsupportedDim):
    pass


class CFLViolation(ProplabError, ValueError):
    pass


class MassTooSmall(ProplabError, ValueError):
    pass


class BandLimitViolation(ProplabError, ValueError):
    pass


# wavefront probe -----------------------------------------------------------

class NyquistViolation(ProplabError, ValueError):
    pass

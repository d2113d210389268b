"""Exception hierarchy for the constructible-function calculus."""


class CalcError(Exception):
    """Base class for all engine errors."""


class FragmentEscape(CalcError):
    """An operation would leave the monomial-log fragment (e.g. a fractional
    power of a polynomial unit, or a log of a sign-indefinite argument)."""


class NotNormalized(CalcError):
    """An expression with duplicate term signatures was passed to an
    operation that requires normalized input."""


class UnitCertificateViolated(CalcError):
    """A polynomial unit fails its coefficient-dominance certificate."""


class ZeroTestUnsupported(CalcError):
    """is_zero was asked about an expression carrying opaque atoms
    (unit logs / bounded ratios) for which signature independence fails."""


class CellError(CalcError):
    """Base class for cell construction/validation errors."""


class InconsistentOrientation(CellError):
    """A fiber cannot be mapped into (0,1) with the available sign data."""


class NotPrepared(CellError):
    """A cell or expression is not in prepared monomial-unit form."""


class NotDetermined(CalcError):
    """absorb_determined called on a position that is not asymptotically
    determined with a pure monomial lower bound."""


class NotCase2(CalcError):
    """recenter_case2 called although the lower bound's closure contains 0."""


class EqualCenters(CalcError):
    """compare_centers called with two identical centers."""


class NotAllUndetermined(CalcError):
    """A sliver was requested for a cell with asymptotically determined
    variables (run the coordinate transform first)."""


class NotBounded(CalcError):
    """shrink_for_decay called for an exponent whose affine form is negative
    somewhere on every sub-box."""


class EmptyExpr(CalcError):
    """dominance called on an expression with no terms."""


class NotIntegrable(CalcError):
    """Symbolic integration requested for a non-integrable term."""


class BoundUnitUnsupported(CalcError):
    """Symbolic bound evaluation requested for a bound with a nontrivial
    unit part (numeric oracle only)."""


class NoDecay(CalcError):
    """decay_rate called although the dominant exponent is not positive."""


class DomainError(CalcError):
    """Numeric evaluation requested outside the cell."""


class SingularityTooStrong(CalcError):
    """Quadrature requested across an endpoint singularity y^r with r <= -1."""


class ParseError(CalcError):
    """Syntax error in the source language, with position information."""

    def __init__(self, message: str, line: int = 1, column: int = 0):
        super().__init__(f"{line}:{column}: {message}")
        self.line = line
        self.column = column

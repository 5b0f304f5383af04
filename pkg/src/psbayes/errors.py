"""Exception hierarchy shared by every psbayes module.

Each error maps to a stable CLI exit code (see ``cli.EXIT_CODES``), so new
classes should be added here rather than raised ad hoc.
"""


class PsBayesError(Exception):
    """Base class for all library errors."""


class NoConvergence(PsBayesError):
    """An iterative solver hit its iteration cap without meeting tolerance."""


class SingularJacobian(PsBayesError):
    """Jacobian condition estimate beyond the trustable range (~1e12)."""


class NonFiniteEvaluation(PsBayesError):
    """A function evaluation produced NaN or infinity at an accepted point."""


class NotPSD(PsBayesError):
    """A matrix required to be positive semi-definite failed ridge repair."""


class Separation(PsBayesError):
    """Response-model likelihood has no interior maximum (perfect separation)."""


class TooManyFailures(PsBayesError):
    """More than the allowed share of posterior draws failed to solve."""


class TooFewDraws(PsBayesError):
    """Not enough posterior draws to summarize (HPD needs at least 20)."""


class DegenerateChain(PsBayesError):
    """MH acceptance rate is pathologically low or high; rescale the proposal.

    Carries the offending draws and diagnostics so callers can inspect the
    degenerate chain (e.g. the zero-step limit glued at its initializer).
    """

    def __init__(self, message, draws=None, diagnostics=None):
        super().__init__(message)
        self.draws = draws
        self.diagnostics = diagnostics


class ParseError(PsBayesError):
    """Malformed CSV input; carries the offending row/column when known."""

    def __init__(self, message, row=None, column=None):
        if row is not None:
            message = f"{message} (row {row}" + (f", column {column!r})" if column else ")")
        super().__init__(message)
        self.row = row
        self.column = column


class InconsistentMissingness(ParseError):
    """y present with delta=0, or absent with delta=1."""


class EmptyRespondents(PsBayesError):
    """No rows with delta=1; respondent-based estimators are undefined."""


class MissingPredictor(PsBayesError):
    """A response model needs a predictor (typically y) that is unobserved."""


class NonFiniteTilt(PsBayesError):
    """Exponential tilt coefficient would overflow the shifted-normal mean."""


class WeightDegeneracyWarning(UserWarning):
    """Most fractional-imputation weight mass collapsed onto single draws."""

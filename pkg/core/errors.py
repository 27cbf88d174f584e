"""
core/errors.py
──────────────
Single exception hierarchy for the whole package.

Entry points (cli.py, app.py) map these families to exit codes / HTTP
status codes, so every raise site should use the narrowest class here.
"""


class AcdcError(Exception):
    """Root of every error raised on purpose by acdcflow."""


# ── Case ingestion / topology ─────────────────────────────

class ParseError(AcdcError):
    """Case file is not valid JSON or does not follow the case schema."""


class ValidationError(AcdcError):
    """Case parsed but violates a model invariant. Message names the element."""


class NotFound(AcdcError):
    """Referenced element (branch, bus, mode entry) does not exist."""


class DisconnectionError(ValidationError):
    """Closed AC branches no longer form a single connected graph."""


class ModeDataMissing(ValidationError):
    """A control mode needs a reference value the case does not provide."""

    def __init__(self, mode, field: str, link: int = None):
        self.mode  = mode
        self.field = field
        self.link  = link
        where = f"dc_links[{link}]" if link is not None else "case"
        super().__init__(f"{where}: {getattr(mode, 'value', mode)} requires '{field}'")


# ── Math domain ───────────────────────────────────────────

class DomainError(AcdcError):
    """Argument outside the mathematical domain of an operation."""


# ── Oracle solver ─────────────────────────────────────────

class NoConvergence(AcdcError):

    def __init__(self, iterations: int, mismatch: float, what: str = 'newton'):
        self.iterations = iterations
        self.mismatch   = mismatch
        self.what       = what
        super().__init__(
            f"{what} did not converge after {iterations} iterations "
            f"(final mismatch {mismatch:.3e})"
        )


class SingularJacobian(AcdcError):
    """Newton Jacobian could not be factorized."""


class InfeasibleDc(AcdcError):
    """No tap within bounds keeps a converter angle above its minimum."""

    def __init__(self, link: int, side: str, angle: float, angle_min: float):
        self.link      = link
        self.side      = side
        self.angle     = angle
        self.angle_min = angle_min
        super().__init__(
            f"dc_links[{link}] {side}: angle {angle:.5f} rad below minimum {angle_min:.5f} rad"
        )


class ConvergenceError(AcdcError):
    """Iterative eigenvalue estimate did not settle."""


# ── Autodiff ──────────────────────────────────────────────

class ShapeMismatch(AcdcError):
    pass


class NotScalar(AcdcError):
    pass


class TapeConsumed(AcdcError):
    """backward() already ran on this tape; reset() or record a new one."""


class NonFiniteError(AcdcError):

    def __init__(self, op: str, index: int):
        self.op    = op
        self.index = index
        super().__init__(f"non-finite value produced by '{op}' at tape index {index}")


# ── Training ──────────────────────────────────────────────

class DivergenceError(AcdcError):

    def __init__(self, outer: int, inner: int, rho: float, mean_lambda: float, cause: str = ''):
        self.outer       = outer
        self.inner       = inner
        self.rho         = rho
        self.mean_lambda = mean_lambda
        super().__init__(
            f"training diverged at outer {outer}, inner {inner} "
            f"(rho={rho:.4g}, mean lambda={mean_lambda:.4g}) {cause}".strip()
        )


# Exit-code families used by cli.py
INPUT_ERRORS = (ParseError, ValidationError, NotFound, DomainError, ShapeMismatch, NotScalar)
SOLVE_ERRORS = (NoConvergence, SingularJacobian, InfeasibleDc, DivergenceError,
                ConvergenceError, NonFiniteError)

"""Error taxonomy shared across the package.

Every failure mode named by a module contract maps to one of these types so
callers can branch on class rather than message text.
"""


class TrajDistillError(Exception):
    """Base class for all package errors."""


class ContractViolation(TrajDistillError, ValueError):
    """An argument or state violates a documented precondition."""


class ShapeMismatch(ContractViolation):
    """Operands have incompatible shapes."""


class NumericOverflowError(TrajDistillError, ArithmeticError):
    """NaN/Inf surfaced during computation; names the primitive that produced it."""

    def __init__(self, primitive: str, where: str = "backward"):
        self.primitive = primitive
        super().__init__(f"non-finite values in {where} of '{primitive}'")


class BoundaryStepError(ContractViolation):
    """sigma(k) below the floor; caller must use the x0-space fallback."""


class DataError(TrajDistillError, ValueError):
    """Malformed or inconsistent trajectory data."""


class ParseError(DataError):
    """Unparseable record in a text data file; carries the line number."""

    def __init__(self, path: str, line_no: int, reason: str):
        self.path = path
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {reason}")


class ConfigError(TrajDistillError, ValueError):
    """Invalid, missing, or unknown configuration key/value."""


class CheckpointError(TrajDistillError, ValueError):
    """Checkpoint file is unreadable, corrupt, or from an unknown version."""


class DivergenceError(TrajDistillError, ArithmeticError):
    """Training loss became non-finite; names the step where it happened."""

    def __init__(self, step: int, iteration: int | None = None, detail: str = ""):
        self.step = step
        self.iteration = iteration
        at = f"step {step}" if iteration is None else f"iteration {iteration}, step {step}"
        super().__init__(f"training diverged at {at}" + (f": {detail}" if detail else ""))

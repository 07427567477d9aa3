from typing import TYPE_CHECKING, Optional, Sequence

if TYPE_CHECKING:
    from .schemas import ValidationIssue


class LoadCoupleError(Exception):
    """Base exception for loadcouple"""

    exit_code: int = 1


class ValidationError(LoadCoupleError):
    """Raised when inputs violate a domain invariant"""

    exit_code = 2

    def __init__(self, message: str, issues: Optional[Sequence["ValidationIssue"]] = None):
        self.issues = list(issues or [])
        if self.issues:
            details = "; ".join(str(issue) for issue in self.issues)
            message = f"{message}: {details}"
        super().__init__(message)


class ScenarioValidationError(ValidationError):
    """Raised when a scenario fails topology validation"""

    pass


class DemandValidationError(ValidationError):
    """Raised when a demand allocation does not fit the topology or its caps"""

    pass


class NonPositiveDemandError(DemandValidationError):
    """Raised when a cell has zero demand where positivity is required"""

    pass


class UtilityDomainError(ValidationError, ValueError):
    """Raised when a utility is evaluated outside its domain or range"""

    pass


class ReducibleMatrixError(ValidationError):
    """Raised when Perron vectors are requested for a reducible matrix"""

    pass


class GridTooLargeError(ValidationError):
    """Raised when a brute-force grid exceeds the evaluation budget"""

    pass


class InfeasibleError(LoadCoupleError):
    """Base exception for infeasible demands and failed iterations"""

    exit_code = 3


class DivergenceError(InfeasibleError):
    """Raised when the load iteration diverges"""

    def __init__(self, iterations: int, residual: float, reason: str):
        self.iterations = iterations
        self.residual = residual
        self.reason = reason
        super().__init__(
            f"Load iteration diverged after {iterations} iterations "
            f"(residual={residual:.3e}): {reason}"
        )


class ConvergenceError(InfeasibleError):
    """Raised when an iteration exhausts its budget without converging"""

    pass


class LoadCapError(InfeasibleError):
    """Raised when no grid point keeps the maximum load below the cap"""

    pass


class ScenarioFormatError(LoadCoupleError):
    """Raised when a scenario or demand file cannot be parsed"""

    exit_code = 4

    def __init__(
        self,
        message: str,
        line: Optional[int] = None,
        column: Optional[int] = None,
        field: Optional[str] = None,
    ):
        self.line = line
        self.column = column
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}")
        if column is not None:
            where.append(f"column {column}")
        if field is not None:
            where.append(f"field '{field}'")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class SchemaVersionError(ScenarioFormatError):
    """Raised when a scenario file has an unsupported schema version"""

    def __init__(self, found: object, expected: int):
        self.found = found
        self.expected = expected
        super().__init__(
            f"Unsupported schema_version {found!r}, expected {expected}",
            field="schema_version",
        )

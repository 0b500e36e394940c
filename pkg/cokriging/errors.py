"""
Error types for the profile cokriging engine.

Every failure that crosses a module boundary is raised as a ``CokrigingError``
carrying an error code, optional details, the offending file and a suggestion.
The code also decides the process exit status used by the command-line interface.
"""

from typing import Optional


class CokrigingError(Exception):
    """
    Custom exception for model fitting, prediction and data handling errors.

    Provides detailed error information including error codes, context,
    and suggestions for resolution.
    """

    # Error codes for different types of failures
    ERROR_CODES = {
        "INVALID_CONFIG": "E001",
        "MISSING_FILES": "E002",
        "INVALID_ROW": "E003",
        "MODEL_FILE": "E004",
        "EMPTY_CLUSTER": "E005",
        "NOT_POSITIVE_DEFINITE": "E006",
        "NOT_CONVERGED": "E007",
        "NUMERIC": "E008",
        "OUT_OF_DOMAIN": "E009",
        "UNKNOWN": "E999",
    }

    # Exit status per error code; anything not listed is a numeric failure
    EXIT_CODES = {
        "E001": 2,
        "E002": 3,
        "E003": 3,
        "E004": 3,
        "E005": 4,
        "E006": 4,
        "E007": 4,
        "E008": 4,
        "E009": 3,
    }

    def __init__(
        self,
        message: str,
        error_code: Optional[str] = None,
        details: Optional[str] = None,
        file_path: Optional[str] = None,
        suggestion: Optional[str] = None,
    ):
        """
        Args:
            message: One-line summary, also what str() shows
            error_code: One of ERROR_CODES; E999 when omitted
            details: Underlying cause, e.g. the validator or solver message
            file_path: Input or output file involved
            suggestion: What the user can change
        """
        self.message = message
        self.error_code = error_code or self.ERROR_CODES["UNKNOWN"]
        self.details = details
        self.file_path = file_path
        self.suggestion = suggestion
        super().__init__(self.full_message)

    @property
    def full_message(self) -> str:
        """Code, message and every available context line."""
        context = [
            ("Details", self.details),
            ("File", self.file_path),
            ("Suggestion", self.suggestion),
        ]
        lines = [f"[{self.error_code}] {self.message}"]
        lines += [f"{label}: {value}" for label, value in context if value]
        return "\n".join(lines)

    def __str__(self):
        return self.message

    @property
    def exit_code(self) -> int:
        """Process exit status for this error (2 config, 3 data, 4 numeric)."""
        return self.EXIT_CODES.get(self.error_code, 4)

    @classmethod
    def invalid_config(cls, field: str, reason: str, file_path: str = None):
        """Create error for an invalid configuration value."""
        return cls(
            message=f"Invalid configuration: {field}",
            error_code=cls.ERROR_CODES["INVALID_CONFIG"],
            details=reason,
            file_path=file_path,
            suggestion="Run with --print-defaults to see every accepted key",
        )

    @classmethod
    def invalid_row(cls, file_path: str, row: int, field: str, reason: str):
        """Create error for a malformed data row."""
        return cls(
            message=f"Invalid data at row {row}, field '{field}'",
            error_code=cls.ERROR_CODES["INVALID_ROW"],
            details=reason,
            file_path=file_path,
            suggestion="Check the profile CSV schema in the README",
        )

    @classmethod
    def file_not_found(cls, file_path: str, file_type: str = "file"):
        """Create error for file not found."""
        return cls(
            message=f"{file_type.capitalize()} not found",
            error_code=cls.ERROR_CODES["MISSING_FILES"],
            file_path=file_path,
            suggestion=f"Check that {file_path} exists and is accessible",
        )

    @classmethod
    def model_version_mismatch(cls, file_path: str, expected: str, found: str):
        """Create error for a model file written by an incompatible version."""
        return cls(
            message="Model file version mismatch",
            error_code=cls.ERROR_CODES["MODEL_FILE"],
            details=f"Expected {expected}, found {found}",
            file_path=file_path,
            suggestion="Refit the model with the installed version",
        )

    @classmethod
    def corrupt_model(cls, file_path: str, reason: str):
        """Create error for an unreadable model file."""
        return cls(
            message=f"Corrupt model file: {reason}",
            error_code=cls.ERROR_CODES["MODEL_FILE"],
            file_path=file_path,
        )

    @classmethod
    def empty_cluster(cls, attempts: int):
        """Create error for k-means leaving a cluster empty on every restart."""
        return cls(
            message="k-means left an empty cluster",
            error_code=cls.ERROR_CODES["EMPTY_CLUSTER"],
            details=f"Gave up after {attempts} reseeded attempts",
            suggestion="Reduce the number of clusters or add profiles",
        )

    @classmethod
    def not_positive_definite(cls, what: str, details: str = None):
        """Create error for a matrix that failed a Cholesky factorization."""
        return cls(
            message=f"Matrix is not positive definite: {what}",
            error_code=cls.ERROR_CODES["NOT_POSITIVE_DEFINITE"],
            details=details,
        )

    @classmethod
    def not_converged(cls, solver: str, iterations: int, residual: float):
        """Create error for an iterative solver hitting its iteration cap."""
        return cls(
            message=f"{solver} did not converge",
            error_code=cls.ERROR_CODES["NOT_CONVERGED"],
            details=f"Stopped after {iterations} iterations, residual {residual:.3e}",
            suggestion="Loosen the solver tolerance or check the conditioning",
        )

    @classmethod
    def numeric_failure(cls, what: str, details: str = None):
        """Create error for NaN/inf or other numerical breakdown."""
        return cls(
            message=f"Numerical failure: {what}",
            error_code=cls.ERROR_CODES["NUMERIC"],
            details=details,
        )

    @classmethod
    def out_of_domain(cls, what: str, reason: str, file_path: str = None):
        """Create error for measurements outside the fitted domain."""
        return cls(
            message=f"Data outside the model domain: {what}",
            error_code=cls.ERROR_CODES["OUT_OF_DOMAIN"],
            details=reason,
            file_path=file_path,
            suggestion="Widen [basis] domain_lo/domain_hi or drop the offending profiles",
        )

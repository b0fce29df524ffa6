"""Exception hierarchy shared by the library and the CLI.

Every error carries a short machine ``code`` and a ``details`` dict; the CLI prints
``to_dict()`` as one JSON line on stderr and exits with ``exit_code``.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class HtsError(Exception):
    exit_code = 1
    code = "error"

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = dict(details or {})

    def annotate(self, **extra: Any) -> "HtsError":
        self.details.update(extra)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "error": self.code,
            "type": type(self).__name__,
            "message": self.message,
            "details": self.details,
        }


# data / usage problems -> exit 1

class DataError(HtsError):
    code = "data_error"


class ParseError(DataError):
    code = "parse_error"


class SchemaError(DataError):
    code = "schema_error"


class InvariantError(DataError):
    code = "invariant_error"


class LabelsError(DataError):
    code = "labels_incomplete"


class ManifestMismatchError(DataError):
    code = "manifest_mismatch"


class UsageError(HtsError):
    code = "usage_error"


# numerical failures -> exit 2

class NumericalError(HtsError):
    exit_code = 2
    code = "numerical_error"


class ConvergenceError(NumericalError):
    code = "not_converged"


class DimensionError(NumericalError):
    code = "dimension_mismatch"


class MaseUndefinedError(NumericalError):
    code = "mase_undefined"


class ClusterCollapseError(NumericalError):
    code = "cluster_collapse"


class ForecastError(NumericalError):
    code = "forecast_failed"

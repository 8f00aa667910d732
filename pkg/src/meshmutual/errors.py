"""Exception types shared across the package.

The CLI maps these onto exit codes, so raising the right class matters
more than the message text: parse/read problems are I/O failures,
structural problems are validation failures, and non-finite or
diverging numerics are numerical failures.
"""


class ParseError(ValueError):
    """A file could not be parsed. Carries a 1-based line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class StructuralError(ValueError):
    """Input data is well-formed but violates a structural contract."""


class DegenerateGeometryError(ValueError):
    """Geometry too degenerate to process (zero normals, collinear points)."""


class GradientCheckError(RuntimeError):
    """An analytic gradient disagrees with its finite-difference estimate."""

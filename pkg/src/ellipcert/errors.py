"""Exception types shared across the analyzer."""

from __future__ import annotations


class EllipcertError(Exception):
    """Base class for all analyzer errors."""


class SourceError(EllipcertError):
    """Error attached to a source location, reported as file:line:col: message."""

    def __init__(self, message: str, line: int = 0, col: int = 0, path: str = "<source>"):
        self.message = message
        self.line = line
        self.col = col
        self.path = path
        super().__init__(message)

    def __str__(self) -> str:
        return f"{self.path}:{self.line}:{self.col}: {self.message}"


class ParseError(SourceError):
    """Lexical or syntactic error in a controller source file."""


class AnalysisError(SourceError):
    """Semantic error found while analyzing a well-formed program."""


class UnmatchedStatement(AnalysisError):
    """Statement does not fit any propagation rule schema."""


class ConfigError(EllipcertError):
    """Invalid analysis configuration (bounds, guards, budgets)."""


class DimensionMismatch(EllipcertError):
    """Operands have incompatible dimensions or layouts."""


class NotInvertible(EllipcertError):
    """Matrix is singular or too ill-conditioned to invert."""


class NotProjectable(EllipcertError):
    """Direct-form projection undefined: trailing block singular with coupling."""


class InvalidParameter(EllipcertError):
    """Scalar rule parameter outside its valid range."""


class SpectralRadiusTooLarge(EllipcertError):
    """Linear update is not a strict contraction; no fixpoint exists."""


class CertificateFormatError(EllipcertError):
    """Certificate file is malformed or has an unsupported schema version."""

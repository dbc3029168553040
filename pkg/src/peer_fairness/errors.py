"""Exceptions and warning categories raised by peer-fairness."""

from __future__ import annotations


class PeerFairnessError(Exception):
    """Base class for every error raised by the auditing pipeline."""

    pass


class ConfigError(PeerFairnessError):
    """Raised when an audit configuration value is invalid."""

    pass


class UsageError(PeerFairnessError):
    """Raised for command-line misuse: missing files, bad flag combinations."""

    pass


class SchemaError(PeerFairnessError):
    """Raised when a schema file is malformed or inconsistent."""

    pass


class MissingColumnError(SchemaError):
    """Raised when a column named by the schema is absent from the CSV."""

    pass


class DuplicateColumnError(SchemaError):
    """Raised when a CSV header or the schema repeats a column name."""

    pass


class UnknownLevelError(SchemaError):
    """Raised when a categorical cell holds a level the schema does not list."""

    pass


class NonBinaryColumnError(SchemaError):
    """Raised when the protected or outcome column does not hold two values."""

    pass


class EmptyDatasetError(PeerFairnessError):
    """Raised when no instances survive ingestion filtering."""

    pass


class SplitError(PeerFairnessError):
    """Raised when a stratified split cannot place every stratum in both parts."""

    pass


class ModelError(PeerFairnessError):
    """Raised when a probability model cannot be fitted or applied."""

    pass


class SchemaMismatchError(ModelError):
    """Raised when an instance does not conform to a model's feature schema."""

    pass


class ModelSelectionError(ModelError):
    """Raised when cross-validated model selection has no usable fold."""

    pass


class ICError(PeerFairnessError):
    """Raised when identification coefficients cannot be computed."""

    pass


class DeltaError(PeerFairnessError):
    """Raised when the peer threshold cannot be resolved to a positive value."""

    pass


class PeerSamplingError(PeerFairnessError):
    """Raised when more peers are requested than are available."""

    pass


class AuditError(PeerFairnessError):
    """Raised when audit inputs are inconsistent with each other."""

    pass


class ProposalBoundViolation(AuditError):
    """Raised when a sampled peer subset's mean coefficient leaves the delta band."""

    pass


class ExplanationError(PeerFairnessError):
    """Raised when explanation records cannot be produced or aggregated."""

    pass


class RobustnessError(PeerFairnessError):
    """Raised when an imbalance study cannot be carried out."""

    pass


class InfeasibleOmegaError(RobustnessError):
    """Raised when an imbalance target cannot be reached by under-sampling."""

    pass


class SynthError(PeerFairnessError):
    """Raised when a generator spec is invalid or produces a degenerate dataset."""

    pass


class ReportError(PeerFairnessError):
    """Raised when a report document cannot be written or read back."""

    pass


class PeerFairnessWarning(UserWarning):
    """Base category for non-fatal anomalies noticed during an audit."""

    pass


class RowsDroppedWarning(PeerFairnessWarning):
    """Rows were removed during ingestion."""

    pass


class PropensityClampWarning(PeerFairnessWarning):
    """Propensity predictions saturated and were clamped."""

    pass


class DegenerateFoldWarning(PeerFairnessWarning):
    """A cross-validation fold held a single class and was skipped."""

    pass


class SeparationWarning(PeerFairnessWarning):
    """Logistic fitting hit the iteration cap on separable data."""

    pass

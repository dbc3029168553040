"""Binary probability models: the outcome predictor f and the propensity g.

Both are L2-penalised logistic regressions fitted by iteratively reweighted
least squares. The outcome model conditions on (X, S); the propensity model
sees X only.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from scipy.special import expit
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import StratifiedKFold

from peer_fairness.data import Dataset, FeatureEncoder, FeatureSchema, Instance
from peer_fairness.errors import (
    DegenerateFoldWarning,
    ModelError,
    ModelSelectionError,
    ReportError,
    SchemaError,
    SchemaMismatchError,
    SeparationWarning,
    UsageError,
)

# IRLS stopping rule: max absolute coefficient update, or the iteration cap
CONVERGENCE_TOL = 1e-8
MAX_ITERATIONS = 100

# Probabilities of a separated fit are clamped to [SEPARATION_CLAMP, 1 - ...]
SEPARATION_CLAMP = 1e-6
# Linear predictor magnitude beyond which a non-converged fit counts as separated
_SEPARATION_ETA = 15.0
# Beyond this the IRLS weights underflow and the iteration stalls with a zero
# gradient, which looks like convergence but is separation
_SATURATION_ETA = 30.0
_PROB_EPS = 1e-15

PROTECTED_COLUMN = "protected"
TARGETS = ("outcome", "protected")


@dataclass(frozen=True, eq=False)
class ProbabilityModel:
    """A fitted logistic model. ``coefficients[0]`` is the intercept."""

    coefficients: np.ndarray
    regularization_strength: float
    feature_columns: tuple[str, ...]
    includes_protected: bool
    encoder: FeatureEncoder | None = None
    separation: bool = False
    converged: bool = True
    iterations: int = 0
    standard_errors: np.ndarray | None = None

    def __post_init__(self) -> None:
        coefficients = np.asarray(self.coefficients, dtype=float)
        if coefficients.shape != (len(self.feature_columns) + 1,):
            raise ModelError(
                f"Expected {len(self.feature_columns) + 1} coefficients "
                f"(intercept + one per column), got {coefficients.shape}"
            )
        object.__setattr__(self, "coefficients", coefficients)
        object.__setattr__(self, "feature_columns", tuple(self.feature_columns))

    @property
    def intercept(self) -> float:
        return float(self.coefficients[0])

    @property
    def weights(self) -> np.ndarray:
        """Coefficients without the intercept."""
        return self.coefficients[1:]

    def predict_design(self, design: np.ndarray) -> np.ndarray:
        """Probabilities for an already-encoded design matrix."""
        design = np.asarray(design, dtype=float)
        if design.ndim != 2 or design.shape[1] != len(self.feature_columns):
            raise SchemaMismatchError(
                f"Design matrix has shape {design.shape}; model expects "
                f"{len(self.feature_columns)} columns"
            )
        probs = expit(self.coefficients[0] + design @ self.coefficients[1:])
        if self.separation:
            return np.clip(probs, SEPARATION_CLAMP, 1.0 - SEPARATION_CLAMP)
        return np.clip(probs, _PROB_EPS, 1.0 - _PROB_EPS)

    def design_for(self, dataset: Dataset) -> np.ndarray:
        if self.encoder is None:
            raise SchemaMismatchError("Model carries no feature encoder")
        if dataset.schema.schema_hash() != self.encoder.schema.schema_hash():
            raise SchemaMismatchError(
                "Dataset schema differs from the schema the model was fitted on"
            )
        return design_matrix(dataset, self.encoder, self.includes_protected)

    def predict_dataset(self, dataset: Dataset) -> np.ndarray:
        """P(label = 1) for every instance, each evaluated at its own (x, s)."""
        return self.predict_design(self.design_for(dataset))


@dataclass(frozen=True)
class ModelSelectionReport:
    """Grid-search outcome for one target."""

    target: str
    grid: tuple[float, ...]
    cv_auc: tuple[float, ...]
    chosen: float
    folds: int
    seed: int
    test_auc: float | None = None
    skipped_folds: tuple[int, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict[str, Any]:
        return {
            "target": self.target,
            "grid": list(self.grid),
            "cv_auc": list(self.cv_auc),
            "chosen": self.chosen,
            "folds": self.folds,
            "seed": self.seed,
            "test_auc": self.test_auc,
            "skipped_folds": list(self.skipped_folds),
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelSelectionReport:
        return cls(
            target=data["target"],
            grid=tuple(data["grid"]),
            cv_auc=tuple(data["cv_auc"]),
            chosen=float(data["chosen"]),
            folds=int(data["folds"]),
            seed=int(data["seed"]),
            test_auc=data.get("test_auc"),
            skipped_folds=tuple(data.get("skipped_folds", ())),
        )


def design_matrix(
    dataset: Dataset, encoder: FeatureEncoder, include_protected: bool
) -> np.ndarray:
    """Encoded features, plus a trailing protected-indicator column for f."""
    design = encoder.transform(dataset.frame)
    if include_protected:
        design = np.column_stack([design, dataset.protected.astype(float)])
    return design


def _columns(encoder: FeatureEncoder, include_protected: bool) -> tuple[str, ...]:
    cols = encoder.columns
    return (*cols, PROTECTED_COLUMN) if include_protected else cols


def fit_logistic(
    design: np.ndarray,
    labels: np.ndarray,
    strength: float,
    feature_columns: Sequence[str] | None = None,
    includes_protected: bool = False,
    encoder: FeatureEncoder | None = None,
) -> ProbabilityModel:
    """
    Fit an L2-penalised logistic regression by IRLS (Newton-Raphson).

    Maximises sum(y log p + (1 - y) log(1 - p)) - strength/2 * ||w||^2 where
    w excludes the intercept. Stops when the largest coefficient update is
    below 1e-8 or after 100 iterations.

    Args:
        design: (n, p) matrix of finite values
        labels: length-n binary vector with both labels present
        strength: Nonnegative penalty strength
        feature_columns: Names of the p columns (defaults to x0..x{p-1})
        includes_protected: Whether the last column is the protected indicator
        encoder: Encoder that produced ``design``, kept for later prediction

    Returns:
        The fitted model; ``separation`` is set when the cap was hit on
        separable data, in which case predictions are clamped.

    Raises:
        ModelError: Shape mismatch, non-finite design, single-class labels or
            a negative strength
    """
    design = np.asarray(design, dtype=float)
    y = np.asarray(labels, dtype=float)
    if design.ndim != 2 or design.shape[0] != y.shape[0]:
        raise ModelError(
            f"Design shape {design.shape} does not match {y.shape[0]} labels"
        )
    if not np.isfinite(design).all():
        raise ModelError("Design matrix contains non-finite entries")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ModelError("Labels must be 0 or 1")
    if y.min() == y.max():
        raise ModelError("Labels must contain both classes to fit a model")
    if strength < 0:
        raise ModelError(f"Regularisation strength must be nonnegative, got {strength}")

    n, p = design.shape
    columns = (
        tuple(feature_columns)
        if feature_columns is not None
        else tuple(f"x{i}" for i in range(p))
    )
    X = np.column_stack([np.ones(n), design])
    penalty = np.full(p + 1, float(strength))
    penalty[0] = 0.0
    beta = np.zeros(p + 1)

    converged = False
    iterations = 0
    for iterations in range(1, MAX_ITERATIONS + 1):
        mu = expit(X @ beta)
        w = mu * (1.0 - mu)
        gradient = X.T @ (y - mu) - penalty * beta
        hessian = (X.T * w) @ X + np.diag(penalty)
        try:
            step = np.linalg.solve(hessian, gradient)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hessian, gradient, rcond=None)[0]
        if not np.isfinite(step).all():
            break
        beta = beta + step
        if np.max(np.abs(step)) < CONVERGENCE_TOL:
            converged = True
            break

    eta = X @ beta
    if converged and float(np.max(np.abs(eta))) > _SATURATION_ETA:
        converged = False
    separation = not converged and (
        not np.isfinite(beta).all() or float(np.max(np.abs(eta))) > _SEPARATION_ETA
    )
    if not converged:
        reason = "separable data" if separation else "slow convergence"
        warnings.warn(
            f"Logistic fit (strength={strength}) stopped after {iterations} "
            f"iterations without converging ({reason}); predictions are clamped "
            f"to [{SEPARATION_CLAMP}, {1 - SEPARATION_CLAMP}]"
            if separation
            else f"Logistic fit (strength={strength}) stopped after {iterations} "
            f"iterations without converging ({reason})",
            SeparationWarning,
            stacklevel=2,
        )
    if not np.isfinite(beta).all():
        beta = np.nan_to_num(beta, nan=0.0, posinf=1e6, neginf=-1e6)

    return ProbabilityModel(
        coefficients=beta,
        regularization_strength=float(strength),
        feature_columns=columns,
        includes_protected=includes_protected,
        encoder=encoder,
        separation=separation,
        converged=converged,
        iterations=iterations,
        standard_errors=_standard_errors(X, beta, penalty),
    )


def _standard_errors(
    X: np.ndarray, beta: np.ndarray, penalty: np.ndarray
) -> np.ndarray | None:
    mu = expit(X @ beta)
    hessian = (X.T * (mu * (1.0 - mu))) @ X + np.diag(penalty)
    try:
        covariance = np.linalg.inv(hessian)
    except np.linalg.LinAlgError:
        return None
    diagonal = np.diag(covariance)
    if (diagonal < 0).any():
        return None
    return np.sqrt(diagonal)


def _penalized_gradient(
    model: ProbabilityModel, design: np.ndarray, labels: np.ndarray
) -> np.ndarray:
    """Gradient of the penalised log-likelihood at the model's coefficients."""
    design = np.asarray(design, dtype=float)
    X = np.column_stack([np.ones(len(design)), design])
    mu = expit(X @ model.coefficients)
    penalty = np.full(len(model.coefficients), model.regularization_strength)
    penalty[0] = 0.0
    return X.T @ (np.asarray(labels, dtype=float) - mu) - penalty * model.coefficients


def auc(
    scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray
) -> float:
    """
    Area under the ROC curve (Mann-Whitney form, ties count one half).

    Raises:
        ModelError: Length mismatch or single-class labels
    """
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ModelError(
            f"scores and labels differ in shape: {scores.shape} vs {labels.shape}"
        )
    if len(np.unique(labels)) != 2:
        raise ModelError("AUC needs both labels present")
    return float(roc_auc_score(labels, scores))


def _fold_auc(
    design: np.ndarray,
    labels: np.ndarray,
    train_idx: np.ndarray,
    valid_idx: np.ndarray,
    strength: float,
) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SeparationWarning)
        model = fit_logistic(design[train_idx], labels[train_idx], strength)
    return auc(model.predict_design(design[valid_idx]), labels[valid_idx])


def select_model(
    train: Dataset,
    target: str,
    grid: Sequence[float],
    folds: int,
    seed: int,
    test: Dataset | None = None,
    encoder: FeatureEncoder | None = None,
    n_jobs: int = 1,
) -> tuple[ProbabilityModel, ModelSelectionReport]:
    """
    Grid-search the penalty strength by mean validation AUC over stratified
    k-fold cross-validation, then refit the winner on the whole training split.

    For ``target="outcome"`` the design includes the protected indicator; for
    ``target="protected"`` it holds the encoded features only. Ties in mean
    AUC go to the smallest strength.

    Args:
        train: Training split
        target: "outcome" (model f) or "protected" (propensity g)
        grid: Candidate penalty strengths
        folds: Number of folds (>= 2)
        seed: Seed for fold assignment
        test: Optional held-out split for the reported test AUC
        encoder: Encoder to use (fitted on ``train`` when omitted)
        n_jobs: Worker threads for the (strength, fold) fits

    Returns:
        Tuple of (refitted model, selection report)

    Raises:
        ModelSelectionError: Bad arguments, or every fold was degenerate
    """
    if target not in TARGETS:
        raise ModelSelectionError(f"target must be one of {TARGETS}, got {target!r}")
    if folds < 2:
        raise ModelSelectionError(f"folds must be at least 2, got {folds}")
    if not grid:
        raise ModelSelectionError("grid must list at least one strength")

    encoder = encoder or FeatureEncoder.fit(train)
    include_protected = target == "outcome"
    design = design_matrix(train, encoder, include_protected)
    labels = (train.y if include_protected else train.protected).astype(int)
    if len(np.unique(labels)) < 2:
        raise ModelSelectionError(
            f"Training split holds a single {target} label; cannot fit a model"
        )

    try:
        splitter = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            splits = list(splitter.split(design, labels))
    except ValueError as e:
        raise ModelSelectionError(
            f"Cannot build {folds} stratified folds: {e}"
        ) from None

    usable: list[tuple[np.ndarray, np.ndarray]] = []
    skipped: list[int] = []
    for i, (tr, va) in enumerate(splits):
        if len(np.unique(labels[tr])) < 2 or len(np.unique(labels[va])) < 2:
            warnings.warn(
                f"Fold {i} of {folds} for target {target!r} holds a single class "
                f"and was skipped",
                DegenerateFoldWarning,
                stacklevel=2,
            )
            skipped.append(i)
        else:
            usable.append((tr, va))
    if not usable:
        raise ModelSelectionError(
            f"All {folds} folds for target {target!r} hold a single class"
        )

    strengths = tuple(sorted(float(g) for g in grid))
    jobs = [(s, tr, va) for s in strengths for tr, va in usable]
    scores = Parallel(n_jobs=n_jobs, backend="threading")(
        delayed(_fold_auc)(design, labels, tr, va, s) for s, tr, va in jobs
    )
    per_fold = np.asarray(scores, dtype=float).reshape(len(strengths), len(usable))
    cv_auc = tuple(float(v) for v in per_fold.mean(axis=1))

    best = 0
    for i in range(1, len(strengths)):
        if cv_auc[i] > cv_auc[best]:
            best = i
    chosen = strengths[best]

    model = fit_logistic(
        design,
        labels,
        chosen,
        feature_columns=_columns(encoder, include_protected),
        includes_protected=include_protected,
        encoder=encoder,
    )

    test_auc = None
    if test is not None:
        test_labels = (test.y if include_protected else test.protected).astype(int)
        if len(np.unique(test_labels)) == 2:
            test_auc = auc(model.predict_dataset(test), test_labels)

    report = ModelSelectionReport(
        target=target,
        grid=strengths,
        cv_auc=cv_auc,
        chosen=chosen,
        folds=folds,
        seed=seed,
        test_auc=test_auc,
        skipped_folds=tuple(skipped),
    )
    return model, report


def predict_proba(model: ProbabilityModel, instance: Instance) -> float:
    """
    Probability of label 1 for a single instance at its own (x, s).

    Raises:
        SchemaMismatchError: The instance does not conform to the model schema
    """
    if model.encoder is None:
        raise SchemaMismatchError("Model carries no feature encoder")
    try:
        row = model.encoder.encode(instance.x)
    except SchemaError as e:
        raise SchemaMismatchError(f"Instance {instance.id!r}: {e}") from None
    if model.includes_protected:
        row = np.append(row, 1.0 if instance.is_protected else 0.0)
    return float(model.predict_design(row[None, :])[0])


def model_to_dict(model: ProbabilityModel) -> dict[str, Any]:
    """JSON-able description of a model, including its encoder and schema."""
    data: dict[str, Any] = {
        "coefficients": [float(c) for c in model.coefficients],
        "regularization_strength": model.regularization_strength,
        "feature_columns": list(model.feature_columns),
        "includes_protected": model.includes_protected,
        "separation": model.separation,
        "converged": model.converged,
        "iterations": model.iterations,
    }
    if model.encoder is not None:
        data["schema"] = model.encoder.schema.to_dict()
        data["schema_hash"] = model.encoder.schema.schema_hash()
        data["encoder"] = model.encoder.to_dict()
    return data


def model_from_dict(data: dict[str, Any]) -> ProbabilityModel:
    encoder = None
    if "schema" in data:
        encoder = FeatureEncoder(
            schema=FeatureSchema.from_dict(data["schema"]),
            means=dict(data["encoder"]["means"]),
            scales=dict(data["encoder"]["scales"]),
        )
    return ProbabilityModel(
        coefficients=np.asarray(data["coefficients"], dtype=float),
        regularization_strength=float(data["regularization_strength"]),
        feature_columns=tuple(data["feature_columns"]),
        includes_protected=bool(data["includes_protected"]),
        encoder=encoder,
        separation=bool(data.get("separation", False)),
        converged=bool(data.get("converged", True)),
        iterations=int(data.get("iterations", 0)),
    )


def model_hash(model: ProbabilityModel) -> str:
    payload = json.dumps(model_to_dict(model), sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def save_model(
    model: ProbabilityModel,
    path: str | Path,
    report: ModelSelectionReport | None = None,
) -> None:
    """Write a model (and optionally its selection report) as JSON."""
    document: dict[str, Any] = {
        "model": model_to_dict(model),
        "model_hash": model_hash(model),
    }
    if report is not None:
        document["selection"] = report.to_dict()
    Path(path).write_text(json.dumps(document, indent=2, sort_keys=True) + "\n")


def load_model(
    path: str | Path,
) -> tuple[ProbabilityModel, ModelSelectionReport | None]:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"File not found: {p}")
    try:
        document = json.loads(p.read_text())
        model = model_from_dict(document["model"])
    except (json.JSONDecodeError, KeyError) as e:
        raise ReportError(f"{p} is not a model document: {e}") from None
    selection = document.get("selection")
    return model, (
        ModelSelectionReport.from_dict(selection) if selection is not None else None
    )

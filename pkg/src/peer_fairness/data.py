"""Tabular decision datasets: schema, ingestion, encoding and splitting.

A dataset is described by two files:

    data.csv     UTF-8, header row, empty string = missing
    schema.toml  protected/outcome columns plus one [[features]] entry per
                 feature column (kind, ordered levels, better_direction,
                 intrinsic)

Example schema::

    protected_column = "firm_size"
    protected_value = "micro"
    outcome_column = "loan"
    favourable_value = "approved"
    id_column = "id"

    [[features]]
    name = "risk"
    kind = "ordinal"
    levels = ["above_average", "average", "low", "minimal"]
    better_direction = "higher"
    intrinsic = false

Rows with more than 20% missing feature cells are dropped; remaining gaps are
imputed with the feature mode (categorical) or median (continuous).
"""

from __future__ import annotations

import csv
import hashlib
import warnings
from collections.abc import Iterator, Sequence
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import tomli_w
from sklearn.model_selection import train_test_split

from peer_fairness.config import read_toml
from peer_fairness.errors import (
    DuplicateColumnError,
    EmptyDatasetError,
    MissingColumnError,
    NonBinaryColumnError,
    RowsDroppedWarning,
    SchemaError,
    SplitError,
    UnknownLevelError,
    UsageError,
)

FEATURE_KINDS = ("binary", "ordinal", "nominal", "continuous")
DIRECTIONS = ("higher", "lower", "none")

# Rows missing more than this share of feature cells are dropped at ingestion
MAX_MISSING_FRACTION = 0.2


class Group(str, Enum):
    """Protected label of an instance."""

    MINUS = "s_minus"
    PLUS = "s_plus"


@dataclass(frozen=True)
class FeatureSpec:
    """One feature column of the schema."""

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    better_direction: str = "none"
    intrinsic: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        if self.kind not in FEATURE_KINDS:
            raise SchemaError(
                f"Feature {self.name!r} has unknown kind {self.kind!r}; "
                f"expected one of {FEATURE_KINDS}"
            )
        if self.better_direction not in DIRECTIONS:
            raise SchemaError(
                f"Feature {self.name!r} has unknown better_direction "
                f"{self.better_direction!r}; expected one of {DIRECTIONS}"
            )
        if self.kind == "binary" and len(self.levels) != 2:
            raise SchemaError(
                f"Binary feature {self.name!r} needs exactly 2 levels, "
                f"got {list(self.levels)}"
            )
        if self.kind in ("ordinal", "nominal") and len(self.levels) < 2:
            raise SchemaError(
                f"{self.kind.capitalize()} feature {self.name!r} needs at least "
                f"2 levels, got {list(self.levels)}"
            )
        if self.kind == "continuous" and self.levels:
            raise SchemaError(f"Continuous feature {self.name!r} cannot list levels")
        if len(set(self.levels)) != len(self.levels):
            raise DuplicateColumnError(
                f"Feature {self.name!r} repeats a level: {list(self.levels)}"
            )
        if self.kind == "nominal" and self.better_direction != "none":
            raise SchemaError(
                f"Nominal feature {self.name!r} must have better_direction 'none'"
            )

    @property
    def is_categorical(self) -> bool:
        return self.kind != "continuous"

    @property
    def explainable(self) -> bool:
        """Whether the feature takes part in watch-out explanations."""
        return not self.intrinsic and self.better_direction != "none"

    def score(self, value: Any) -> float:
        """Map a raw value onto a better-is-higher numeric scale."""
        if self.kind == "continuous":
            numeric = float(value)
        else:
            try:
                numeric = float(self.levels.index(str(value)))
            except ValueError:
                raise UnknownLevelError(
                    f"Feature {self.name!r} has no level {value!r}"
                ) from None
        return -numeric if self.better_direction == "lower" else numeric


@dataclass(frozen=True)
class FeatureSchema:
    """Column layout of a decision dataset."""

    features: tuple[FeatureSpec, ...]
    protected_column: str
    protected_value: str
    outcome_column: str
    favourable_value: str
    id_column: str | None = None
    unprotected_value: str | None = None
    unfavourable_value: str | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        if not self.features:
            raise SchemaError("Schema lists no feature columns")
        names = [f.name for f in self.features]
        special = [self.protected_column, self.outcome_column]
        if self.id_column:
            special.append(self.id_column)
        seen: set[str] = set()
        for name in names + special:
            if name in seen:
                raise DuplicateColumnError(f"Schema names column {name!r} twice")
            seen.add(name)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.features)

    def get(self, name: str) -> FeatureSpec:
        for f in self.features:
            if f.name == name:
                return f
        raise SchemaError(f"Schema has no feature {name!r}")

    @property
    def explainable_features(self) -> tuple[FeatureSpec, ...]:
        return tuple(f for f in self.features if f.explainable)

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "protected_column": self.protected_column,
            "protected_value": self.protected_value,
            "outcome_column": self.outcome_column,
            "favourable_value": self.favourable_value,
        }
        for key in ("id_column", "unprotected_value", "unfavourable_value"):
            value = getattr(self, key)
            if value is not None:
                data[key] = value
        data["features"] = []
        for f in self.features:
            entry = asdict(f)
            entry["levels"] = list(f.levels)
            if not entry["levels"]:
                del entry["levels"]
            data["features"].append(entry)
        return data

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> FeatureSchema:
        required = (
            "protected_column",
            "protected_value",
            "outcome_column",
            "favourable_value",
            "features",
        )
        missing = [k for k in required if k not in data]
        if missing:
            raise SchemaError(f"Schema is missing keys: {', '.join(missing)}")
        features = []
        for entry in data["features"]:
            if "name" not in entry or "kind" not in entry:
                raise SchemaError(f"Feature entry needs 'name' and 'kind': {entry}")
            features.append(
                FeatureSpec(
                    name=str(entry["name"]),
                    kind=str(entry["kind"]),
                    levels=tuple(entry.get("levels", ())),
                    better_direction=str(entry.get("better_direction", "none")),
                    intrinsic=bool(entry.get("intrinsic", False)),
                )
            )
        return cls(
            features=tuple(features),
            protected_column=str(data["protected_column"]),
            protected_value=str(data["protected_value"]),
            outcome_column=str(data["outcome_column"]),
            favourable_value=str(data["favourable_value"]),
            id_column=data.get("id_column"),
            unprotected_value=data.get("unprotected_value"),
            unfavourable_value=data.get("unfavourable_value"),
        )

    def schema_hash(self) -> str:
        """Stable hash of the feature layout (values of the labels excluded)."""
        layout = [asdict(f) for f in self.features]
        return hashlib.sha256(repr(layout).encode("utf-8")).hexdigest()[:16]


def load_schema(path: str | Path) -> FeatureSchema:
    """Read a TOML schema file."""
    return FeatureSchema.from_dict(read_toml(path))


def write_schema(schema: FeatureSchema, path: str | Path) -> None:
    """Write a schema as TOML."""
    Path(path).write_text(tomli_w.dumps(schema.to_dict()), encoding="utf-8")


@dataclass(frozen=True)
class Instance:
    """A single decision: features, protected label and observed outcome."""

    id: str
    x: tuple[Any, ...]
    s: Group
    y: int

    @property
    def is_protected(self) -> bool:
        return self.s is Group.MINUS


@dataclass(frozen=True)
class IngestionReport:
    """What load_dataset did to the raw rows."""

    rows_read: int
    rows_dropped_missing: int
    rows_dropped_unlabelled: int
    cells_imputed: dict[str, int] = field(default_factory=dict)
    imputation_values: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Dataset:
    """
    Immutable, validated collection of instances.

    Raw feature values live in ``frame`` (categorical columns as text,
    continuous columns as floats) in schema order. ``protected`` is True for
    s_minus rows and ``y`` is 1 for the favourable outcome.
    """

    schema: FeatureSchema
    frame: pd.DataFrame
    ids: np.ndarray
    protected: np.ndarray
    y: np.ndarray
    ingestion: IngestionReport | None = None

    def __post_init__(self) -> None:
        n = len(self.frame)
        if not (len(self.ids) == len(self.protected) == len(self.y) == n):
            raise SchemaError("Dataset arrays and frame disagree in length")
        if n == 0:
            raise EmptyDatasetError("Dataset has no instances")
        if list(self.frame.columns) != list(self.schema.names):
            raise SchemaError("Dataset frame columns do not follow the schema order")
        ids = np.asarray(self.ids, dtype=object)
        if len(pd.unique(ids)) != n:
            dupes = pd.Series(ids).loc[pd.Series(ids).duplicated()].unique()[:5]
            raise SchemaError(f"Instance ids must be unique; repeated: {list(dupes)}")
        protected = np.asarray(self.protected, dtype=bool)
        if protected.all() or not protected.any():
            raise NonBinaryColumnError(
                f"Both protected labels must be present; column "
                f"{self.schema.protected_column!r} holds a single group"
            )
        frame = self.frame.reset_index(drop=True)
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "protected", protected)
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.int8))

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def n_protected(self) -> int:
        return int(self.protected.sum())

    @property
    def n_unprotected(self) -> int:
        return len(self) - self.n_protected

    @property
    def omega(self) -> float:
        """Share of protected instances."""
        return self.n_protected / len(self)

    def instance(self, index: int) -> Instance:
        row = tuple(self.frame.iloc[index].tolist())
        return Instance(
            id=str(self.ids[index]),
            x=row,
            s=Group.MINUS if self.protected[index] else Group.PLUS,
            y=int(self.y[index]),
        )

    @property
    def instances(self) -> list[Instance]:
        rows = self.frame.astype(object).itertuples(index=False, name=None)
        return [
            Instance(
                id=str(self.ids[i]),
                x=tuple(row),
                s=Group.MINUS if self.protected[i] else Group.PLUS,
                y=int(self.y[i]),
            )
            for i, row in enumerate(rows)
        ]

    def __iter__(self) -> Iterator[Instance]:
        for i in range(len(self)):
            yield self.instance(i)

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        """Dataset restricted to the given row positions (order preserved)."""
        idx = np.asarray(indices, dtype=np.intp)
        return Dataset(
            schema=self.schema,
            frame=self.frame.iloc[idx].reset_index(drop=True),
            ids=self.ids[idx],
            protected=self.protected[idx],
            y=self.y[idx],
            ingestion=self.ingestion,
        )

    def fingerprint(self) -> str:
        """Content hash over ids, labels and raw features."""
        h = hashlib.sha256()
        h.update("\x1f".join(str(i) for i in self.ids).encode("utf-8"))
        h.update(self.protected.astype(np.uint8).tobytes())
        h.update(self.y.astype(np.uint8).tobytes())
        h.update(self.frame.to_csv(index=False).encode("utf-8"))
        return h.hexdigest()


@dataclass(frozen=True)
class FeatureEncoder:
    """
    Maps raw features to a numeric design matrix.

    binary -> {0, 1}; ordinal -> integer rank; nominal -> one-hot with the
    first level dropped as reference; continuous -> standardised with the
    statistics of the dataset the encoder was fitted on.
    """

    schema: FeatureSchema
    means: dict[str, float] = field(default_factory=dict)
    scales: dict[str, float] = field(default_factory=dict)

    @classmethod
    def fit(cls, dataset: Dataset) -> FeatureEncoder:
        means: dict[str, float] = {}
        scales: dict[str, float] = {}
        for f in dataset.schema.features:
            if f.kind == "continuous":
                values = dataset.frame[f.name].to_numpy(dtype=float)
                means[f.name] = float(values.mean())
                sd = float(values.std())
                scales[f.name] = sd if sd > 0 else 1.0
        return cls(schema=dataset.schema, means=means, scales=scales)

    @property
    def columns(self) -> tuple[str, ...]:
        cols: list[str] = []
        for f in self.schema.features:
            if f.kind == "nominal":
                cols.extend(f"{f.name}={level}" for level in f.levels[1:])
            else:
                cols.append(f.name)
        return tuple(cols)

    @property
    def width(self) -> int:
        return len(self.columns)

    def transform(self, frame: pd.DataFrame) -> np.ndarray:
        """Encode a raw feature frame into an (n, width) float matrix."""
        blocks: list[np.ndarray] = []
        for f in self.schema.features:
            if f.name not in frame.columns:
                raise MissingColumnError(f"Frame is missing feature column {f.name!r}")
            column = frame[f.name]
            if f.kind == "continuous":
                values = column.to_numpy(dtype=float)
                blocks.append(
                    ((values - self.means[f.name]) / self.scales[f.name])[:, None]
                )
                continue
            codes = pd.Categorical(column.astype(str), categories=list(f.levels)).codes
            if (codes < 0).any():
                bad = column[codes < 0].iloc[0]
                raise UnknownLevelError(
                    f"Feature {f.name!r} has unknown level {bad!r}; "
                    f"schema levels are {list(f.levels)}"
                )
            if f.kind == "nominal":
                onehot = np.zeros((len(codes), len(f.levels) - 1))
                rows = np.nonzero(codes > 0)[0]
                onehot[rows, codes[rows] - 1] = 1.0
                blocks.append(onehot)
            else:
                blocks.append(codes.astype(float)[:, None])
        return np.hstack(blocks) if blocks else np.empty((len(frame), 0))

    def encode(self, x: Sequence[Any]) -> np.ndarray:
        """Encode one raw feature vector."""
        if len(x) != len(self.schema.features):
            raise SchemaError(
                f"Feature vector has {len(x)} entries, schema has "
                f"{len(self.schema.features)}"
            )
        frame = pd.DataFrame([list(x)], columns=list(self.schema.names))
        return self.transform(frame)[0]

    def decode(self, row: Sequence[float]) -> tuple[Any, ...]:
        """Invert :meth:`encode` on observed levels."""
        values: list[Any] = []
        pos = 0
        for f in self.schema.features:
            if f.kind == "continuous":
                values.append(row[pos] * self.scales[f.name] + self.means[f.name])
                pos += 1
            elif f.kind == "nominal":
                width = len(f.levels) - 1
                hot = np.nonzero(np.asarray(row[pos : pos + width]) > 0.5)[0]
                values.append(f.levels[int(hot[0]) + 1] if len(hot) else f.levels[0])
                pos += width
            else:
                values.append(f.levels[int(round(row[pos]))])
                pos += 1
        return tuple(values)

    def to_dict(self) -> dict[str, Any]:
        return {"means": dict(self.means), "scales": dict(self.scales)}


def _read_header(path: Path) -> list[str]:
    with path.open(newline="", encoding="utf-8") as f:
        try:
            return next(csv.reader(f))
        except StopIteration:
            raise EmptyDatasetError(f"CSV file {path} is empty") from None


def _check_columns(header: list[str], schema: FeatureSchema, path: Path) -> None:
    seen: set[str] = set()
    for name in header:
        if name in seen:
            raise DuplicateColumnError(f"CSV {path} repeats column {name!r}")
        seen.add(name)
    required = [*schema.names, schema.protected_column, schema.outcome_column]
    if schema.id_column:
        required.append(schema.id_column)
    missing = [name for name in required if name not in seen]
    if missing:
        raise MissingColumnError(
            f"CSV {path} is missing columns named in the schema: {', '.join(missing)}"
        )


def _binary_labels(
    column: pd.Series, name: str, positive: str, require_both: bool
) -> tuple[np.ndarray, str | None]:
    """Map a two-valued text column to booleans (True where == positive)."""
    values = sorted(set(column.tolist()))
    if len(values) > 2:
        raise NonBinaryColumnError(
            f"Column {name!r} must hold two values, found {len(values)}: {values[:10]}"
        )
    if positive not in values:
        raise NonBinaryColumnError(
            f"Column {name!r} never takes the configured value {positive!r}; "
            f"found {values}"
        )
    others = [v for v in values if v != positive]
    if require_both and not others:
        raise NonBinaryColumnError(
            f"Column {name!r} only holds {positive!r}; both groups are required"
        )
    return (column == positive).to_numpy(), (others[0] if others else None)


def _impute_value(spec: FeatureSpec, column: pd.Series) -> Any:
    observed = column.dropna()
    if observed.empty:
        raise EmptyDatasetError(
            f"Feature {spec.name!r} has no observed values to impute from"
        )
    if spec.kind == "continuous":
        return float(observed.median())
    counts = observed.value_counts()
    best = counts.max()
    # Ties resolve to the earliest schema level
    return next(level for level in spec.levels if counts.get(level, 0) == best)


def load_dataset(csv_path: str | Path, schema_path: str | Path) -> Dataset:
    """
    Read, validate, filter and impute a decision dataset.

    Args:
        csv_path: CSV with a header row; empty cells are missing
        schema_path: TOML schema naming every column and its kind

    Returns:
        A validated Dataset carrying an IngestionReport

    Raises:
        UsageError: A file does not exist
        MissingColumnError / DuplicateColumnError: Header problems
        UnknownLevelError: A categorical cell holds an unlisted level
        NonBinaryColumnError: Protected or outcome column is not binary
        EmptyDatasetError: No rows survive filtering
    """
    csv_path = Path(csv_path)
    schema = load_schema(schema_path)
    if not csv_path.is_file():
        raise UsageError(f"File not found: {csv_path}")

    _check_columns(_read_header(csv_path), schema, csv_path)
    raw = pd.read_csv(csv_path, dtype=str, keep_default_na=False, encoding="utf-8")
    raw = raw.apply(lambda c: c.str.strip())
    rows_read = len(raw)
    if rows_read == 0:
        raise EmptyDatasetError(f"CSV {csv_path} has a header but no rows")

    labelled = (raw[schema.protected_column] != "") & (raw[schema.outcome_column] != "")
    rows_dropped_unlabelled = int((~labelled).sum())
    raw = raw.loc[labelled]

    features = raw[list(schema.names)].replace("", np.nan)
    missing_share = features.isna().mean(axis=1)
    keep = missing_share <= MAX_MISSING_FRACTION
    rows_dropped_missing = int((~keep).sum())
    raw, features = raw.loc[keep], features.loc[keep]
    if len(raw) == 0:
        raise EmptyDatasetError(
            f"No rows of {csv_path} survive filtering: {rows_dropped_missing} rows had "
            f"more than {MAX_MISSING_FRACTION:.0%} missing features and "
            f"{rows_dropped_unlabelled} lacked a protected or outcome label"
        )
    dropped = rows_dropped_missing + rows_dropped_unlabelled
    if dropped:
        warnings.warn(
            f"Dropped {dropped} of {rows_read} rows from {csv_path} "
            f"({rows_dropped_missing} over the missing-feature threshold, "
            f"{rows_dropped_unlabelled} without protected/outcome label)",
            RowsDroppedWarning,
            stacklevel=2,
        )

    clean: dict[str, pd.Series] = {}
    cells_imputed: dict[str, int] = {}
    imputation_values: dict[str, Any] = {}
    for spec in schema.features:
        column = features[spec.name]
        if spec.kind == "continuous":
            numeric = pd.to_numeric(column, errors="coerce")
            bad = column.notna() & numeric.isna()
            if bad.any():
                raise SchemaError(
                    f"Continuous feature {spec.name!r} has non-numeric value "
                    f"{column[bad].iloc[0]!r}"
                )
            column = numeric.astype(float)
        else:
            unknown = column.notna() & ~column.isin(spec.levels)
            if unknown.any():
                raise UnknownLevelError(
                    f"Feature {spec.name!r} has unknown level "
                    f"{column[unknown].iloc[0]!r}; schema levels are "
                    f"{list(spec.levels)}"
                )
        n_missing = int(column.isna().sum())
        if n_missing:
            fill = _impute_value(spec, column)
            column = column.fillna(fill)
            cells_imputed[spec.name] = n_missing
            imputation_values[spec.name] = fill
        clean[spec.name] = column
    frame = pd.DataFrame(clean, columns=list(schema.names)).reset_index(drop=True)

    protected, unprotected_value = _binary_labels(
        raw[schema.protected_column],
        schema.protected_column,
        schema.protected_value,
        require_both=True,
    )
    y, unfavourable_value = _binary_labels(
        raw[schema.outcome_column],
        schema.outcome_column,
        schema.favourable_value,
        require_both=False,
    )
    schema = replace(
        schema,
        unprotected_value=schema.unprotected_value or unprotected_value,
        unfavourable_value=schema.unfavourable_value or unfavourable_value,
    )

    if schema.id_column:
        ids = raw[schema.id_column].to_numpy(dtype=object)
    else:
        ids = np.array([str(i) for i in raw.index], dtype=object)

    return Dataset(
        schema=schema,
        frame=frame,
        ids=ids,
        protected=protected,
        y=y.astype(np.int8),
        ingestion=IngestionReport(
            rows_read=rows_read,
            rows_dropped_missing=rows_dropped_missing,
            rows_dropped_unlabelled=rows_dropped_unlabelled,
            cells_imputed=cells_imputed,
            imputation_values=imputation_values,
        ),
    )


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    """Write a dataset as CSV in the layout load_dataset expects."""
    schema = dataset.schema
    if schema.unprotected_value is None or schema.unfavourable_value is None:
        raise SchemaError(
            "Schema must name unprotected_value and unfavourable_value to be written"
        )
    out = pd.DataFrame({schema.id_column or "id": dataset.ids})
    for name in schema.names:
        out[name] = dataset.frame[name].to_numpy()
    out[schema.protected_column] = np.where(
        dataset.protected, schema.protected_value, schema.unprotected_value
    )
    out[schema.outcome_column] = np.where(
        dataset.y == 1, schema.favourable_value, schema.unfavourable_value
    )
    out.to_csv(path, index=False, encoding="utf-8")


def split(
    dataset: Dataset, train_fraction: float, seed: int
) -> tuple[Dataset, Dataset]:
    """
    Stratified train/test split by (protected label, outcome).

    Deterministic for a fixed seed. Each part keeps the input row order.

    Raises:
        SplitError: A group or outcome label is absent, or a stratum is too
            small to place at least one instance in each part
    """
    if not 0.0 < train_fraction < 1.0:
        raise SplitError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    if len(np.unique(dataset.y)) < 2:
        raise SplitError("Both outcome labels must be present to split")
    strata = dataset.protected.astype(int) * 2 + dataset.y.astype(int)
    labels, counts = np.unique(strata, return_counts=True)
    small = [
        _stratum_name(int(s)) for s, c in zip(labels, counts) if c < 2
    ]
    if small:
        raise SplitError(
            f"Strata {small} hold fewer than 2 instances and cannot appear in "
            f"both the training and testing parts"
        )
    try:
        train_idx, test_idx = train_test_split(
            np.arange(len(dataset)),
            train_size=train_fraction,
            stratify=strata,
            random_state=seed,
        )
    except ValueError as e:
        raise SplitError(f"Stratified split failed: {e}") from None
    for s in labels:
        if not (strata[train_idx] == s).any() or not (strata[test_idx] == s).any():
            raise SplitError(
                f"Stratum {_stratum_name(int(s))} is too small to place an "
                f"instance in both parts at train_fraction={train_fraction}"
            )
    return dataset.subset(np.sort(train_idx)), dataset.subset(np.sort(test_idx))


def _stratum_name(code: int) -> str:
    group = Group.MINUS.value if code >= 2 else Group.PLUS.value
    return f"({group}, y={code % 2})"

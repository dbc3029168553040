"""Synthetic decision datasets with known ground truth.

Instances are drawn feature by feature, then the protected label from a
logistic propensity model on the features, then the outcome from a logistic
outcome model on the features plus a direct bias term for the protected group:

    logit P(S = s_minus | x)    = a_s + sum gamma(x)
    logit P(Y = 1 | x, s)       = a_y + sum beta(x) + b * 1[s = s_minus]

Coefficients are given per feature either as a number (multiplied by the
level index for categorical features, by the raw value for continuous ones)
or as a mapping from level to additive effect. Intercepts may be calibrated so
the expected protected share or outcome rate hits a target.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union, cast

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import expit

from peer_fairness.audit import AuditResult
from peer_fairness.config import read_toml
from peer_fairness.data import (
    Dataset,
    FeatureEncoder,
    FeatureSchema,
    FeatureSpec,
    write_dataset,
    write_schema,
)
from peer_fairness.errors import SynthError
from peer_fairness.model import PROTECTED_COLUMN, ProbabilityModel

Coefficient = Union[float, Mapping[str, float]]

MIN_INSTANCES = 100

# Reference counts of the SME survey extract the preset imitates
SME_INSTANCES = 4159
SME_PROTECTED = 1719
SME_APPROVED = 3391


@dataclass(frozen=True)
class FeatureGenerator:
    """Marginal distribution of one generated feature."""

    name: str
    kind: str
    levels: tuple[str, ...] = ()
    probabilities: tuple[float, ...] = ()
    mean: float = 0.0
    sd: float = 1.0
    better_direction: str = "none"
    intrinsic: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(str(v) for v in self.levels))
        probs = tuple(float(p) for p in self.probabilities)
        if self.kind == "continuous":
            if not self.sd > 0:
                raise SynthError(f"Feature {self.name!r} needs a positive sd")
        else:
            if len(probs) != len(self.levels):
                raise SynthError(
                    f"Feature {self.name!r} lists {len(self.levels)} levels but "
                    f"{len(probs)} probabilities"
                )
            if any(p < 0 for p in probs) or not sum(probs) > 0:
                raise SynthError(
                    f"Feature {self.name!r} probabilities must be nonnegative "
                    f"with a positive total"
                )
            total = sum(probs)
            probs = tuple(p / total for p in probs)
        object.__setattr__(self, "probabilities", probs)
        # Validates kind, levels and direction
        self.spec()

    def spec(self) -> FeatureSpec:
        try:
            return FeatureSpec(
                name=self.name,
                kind=self.kind,
                levels=self.levels,
                better_direction=self.better_direction,
                intrinsic=self.intrinsic,
            )
        except Exception as e:
            raise SynthError(str(e)) from None

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Level indices for categorical features, raw values otherwise."""
        if self.kind == "continuous":
            return rng.normal(self.mean, self.sd, size=n)
        return rng.choice(len(self.levels), size=n, p=np.asarray(self.probabilities))

    def values(self, draws: np.ndarray) -> np.ndarray:
        if self.kind == "continuous":
            return draws.astype(float)
        return np.asarray(self.levels, dtype=object)[draws]


@dataclass(frozen=True)
class LinearLogit:
    """Logit = intercept + per-feature contributions."""

    intercept: float = 0.0
    coefficients: Mapping[str, Coefficient] = field(default_factory=dict)
    target_rate: float | None = None

    def __post_init__(self) -> None:
        if self.target_rate is not None and not 0.0 < self.target_rate < 1.0:
            raise SynthError(f"target rate must lie in (0, 1), got {self.target_rate}")

    def contributions(
        self, features: Sequence[FeatureGenerator], draws: Mapping[str, np.ndarray]
    ) -> np.ndarray:
        n = len(next(iter(draws.values())))
        total = np.zeros(n)
        by_name = {g.name: g for g in features}
        for name, coef in self.coefficients.items():
            generator = by_name[name]
            column = draws[name]
            if isinstance(coef, Mapping):
                effects = np.array(
                    [float(coef.get(lv, 0.0)) for lv in generator.levels]
                )
                total += effects[column]
            else:
                total += float(coef) * column.astype(float)
        return total

    def check(self, features: Sequence[FeatureGenerator], label: str) -> None:
        by_name = {g.name: g for g in features}
        for name, coef in self.coefficients.items():
            if name not in by_name:
                raise SynthError(f"{label} coefficient names unknown feature {name!r}")
            if isinstance(coef, Mapping):
                if by_name[name].kind == "continuous":
                    raise SynthError(
                        f"{label} coefficient for continuous feature {name!r} "
                        f"must be a number"
                    )
                unknown = set(coef) - set(by_name[name].levels)
                if unknown:
                    raise SynthError(
                        f"{label} coefficient for {name!r} names unknown levels "
                        f"{sorted(unknown)}"
                    )


@dataclass(frozen=True)
class SynthSpec:
    """Everything needed to generate one synthetic dataset."""

    n: int
    features: tuple[FeatureGenerator, ...]
    propensity: LinearLogit = field(default_factory=LinearLogit)
    outcome: LinearLogit = field(default_factory=LinearLogit)
    direct_bias: float = 0.0
    seed: int = 0
    protected_column: str = "group"
    protected_value: str = "protected"
    unprotected_value: str = "reference"
    outcome_column: str = "outcome"
    favourable_value: str = "favourable"
    unfavourable_value: str = "unfavourable"

    def __post_init__(self) -> None:
        object.__setattr__(self, "features", tuple(self.features))
        if self.n < MIN_INSTANCES:
            raise SynthError(f"n must be at least {MIN_INSTANCES}, got {self.n}")
        if not self.features:
            raise SynthError("Generator spec lists no features")
        self.propensity.check(self.features, "propensity")
        self.outcome.check(self.features, "outcome")
        if not math.isfinite(self.direct_bias):
            raise SynthError(f"direct_bias must be finite, got {self.direct_bias}")

    def schema(self) -> FeatureSchema:
        return FeatureSchema(
            features=tuple(g.spec() for g in self.features),
            protected_column=self.protected_column,
            protected_value=self.protected_value,
            outcome_column=self.outcome_column,
            favourable_value=self.favourable_value,
            id_column="id",
            unprotected_value=self.unprotected_value,
            unfavourable_value=self.unfavourable_value,
        )


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True probabilities of every generated instance."""

    ids: np.ndarray
    protected: np.ndarray
    propensity: np.ndarray
    p_minus: np.ndarray
    p_plus: np.ndarray
    propensity_intercept: float
    outcome_intercept: float

    @property
    def factual(self) -> np.ndarray:
        """P(Y = 1) at each instance's own protected label."""
        return np.where(self.protected, self.p_minus, self.p_plus)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "id": self.ids,
                "propensity": self.propensity,
                "p_y_s_minus": self.p_minus,
                "p_y_s_plus": self.p_plus,
            }
        )


@dataclass(frozen=True)
class OracleGap:
    """Distance between peer means and true counterfactual probabilities."""

    count: int
    mean: float
    median: float
    p90: float
    max: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "count": self.count,
            "mean": self.mean,
            "median": self.median,
            "p90": self.p90,
            "max": self.max,
        }


def _calibrate(linear: np.ndarray, target: float) -> float:
    def excess(a: float) -> float:
        return float(expit(a + linear).mean()) - target

    return float(brentq(excess, -60.0, 60.0, xtol=1e-12))


def generate(spec: SynthSpec) -> tuple[Dataset, GroundTruth]:
    """
    Draw a dataset from ``spec``.

    Features are sampled in spec order, then the protected labels, then the
    outcomes, all from one seeded generator, so the same spec always yields
    the same dataset.

    Raises:
        SynthError: The draw produced a single protected group or a single
            outcome label
    """
    rng = np.random.default_rng(spec.seed)
    draws = {g.name: g.sample(rng, spec.n) for g in spec.features}
    u_s = rng.random(spec.n)
    u_y = rng.random(spec.n)

    s_linear = spec.propensity.contributions(spec.features, draws)
    s_intercept = spec.propensity.intercept
    if spec.propensity.target_rate is not None:
        s_intercept = _calibrate(s_linear, spec.propensity.target_rate)
    propensity = expit(s_intercept + s_linear)
    protected = u_s < propensity

    y_linear = spec.outcome.contributions(spec.features, draws)
    y_intercept = spec.outcome.intercept
    if spec.outcome.target_rate is not None:
        y_intercept = _calibrate(
            y_linear + spec.direct_bias * protected, spec.outcome.target_rate
        )
    p_plus = expit(y_intercept + y_linear)
    p_minus = expit(y_intercept + y_linear + spec.direct_bias)
    y = (u_y < np.where(protected, p_minus, p_plus)).astype(np.int8)

    if protected.all() or not protected.any():
        raise SynthError(
            f"Generated data holds a single protected group (seed {spec.seed}); "
            f"adjust the propensity model"
        )
    if y.min() == y.max():
        raise SynthError(
            f"Generated data holds a single outcome label (seed {spec.seed}); "
            f"adjust the outcome model"
        )

    width = len(str(spec.n - 1))
    ids = np.array([f"i{i:0{width}d}" for i in range(spec.n)], dtype=object)
    frame = pd.DataFrame(
        {g.name: g.values(draws[g.name]) for g in spec.features},
        columns=[g.name for g in spec.features],
    )
    dataset = Dataset(
        schema=spec.schema(), frame=frame, ids=ids, protected=protected, y=y
    )
    truth = GroundTruth(
        ids=ids,
        protected=protected,
        propensity=propensity,
        p_minus=p_minus,
        p_plus=p_plus,
        propensity_intercept=float(s_intercept),
        outcome_intercept=float(y_intercept),
    )
    return dataset, truth


def _linear_model(
    spec: SynthSpec,
    logit: LinearLogit,
    intercept: float,
    encoder: FeatureEncoder,
    protected_weight: float | None,
) -> ProbabilityModel:
    by_name = {g.name: g for g in spec.features}
    weights: dict[str, float] = {}
    for name, coef in logit.coefficients.items():
        generator = by_name[name]
        if generator.kind == "continuous":
            scale = encoder.scales[name]
            weights[name] = float(cast(float, coef)) * scale
            intercept += float(cast(float, coef)) * encoder.means[name]
        elif generator.kind == "nominal":
            effects = (
                dict(coef)
                if isinstance(coef, Mapping)
                else {lv: float(coef) * i for i, lv in enumerate(generator.levels)}
            )
            base = float(effects.get(generator.levels[0], 0.0))
            intercept += base
            for level in generator.levels[1:]:
                weights[f"{name}={level}"] = float(effects.get(level, 0.0)) - base
        else:
            if isinstance(coef, Mapping):
                effects = [float(coef.get(lv, 0.0)) for lv in generator.levels]
                steps = np.diff(effects)
                if not np.allclose(steps, steps[0]):
                    raise SynthError(
                        f"Coefficient for {name!r} is not linear in the level index"
                    )
                intercept += effects[0]
                weights[name] = float(steps[0])
            else:
                weights[name] = float(coef)

    columns = list(encoder.columns)
    coefficients = [intercept] + [weights.get(c, 0.0) for c in columns]
    if protected_weight is not None:
        columns.append(PROTECTED_COLUMN)
        coefficients.append(protected_weight)
    return ProbabilityModel(
        coefficients=np.asarray(coefficients),
        regularization_strength=0.0,
        feature_columns=tuple(columns),
        includes_protected=protected_weight is not None,
        encoder=encoder,
    )


def oracle_models(
    spec: SynthSpec, truth: GroundTruth, encoder: FeatureEncoder
) -> tuple[ProbabilityModel, ProbabilityModel]:
    """
    The generating outcome and propensity models expressed over ``encoder``.

    Returns:
        (outcome model f, propensity model g)
    """
    f = _linear_model(
        spec, spec.outcome, truth.outcome_intercept, encoder, spec.direct_bias
    )
    g = _linear_model(spec, spec.propensity, truth.propensity_intercept, encoder, None)
    return f, g


def oracle_gap(truth: GroundTruth, results: Sequence[AuditResult]) -> OracleGap:
    """
    |peer_mean - true P(Y = 1 | x, s_plus)| over auditable instances.

    Raises:
        SynthError: A result id is not in the ground truth, or nothing is
            auditable
    """
    index = {str(i): k for k, i in enumerate(truth.ids)}
    gaps = []
    for r in results:
        if r.id not in index:
            raise SynthError(f"Audit result {r.id!r} has no ground-truth record")
        if r.auditable and r.peer_mean is not None:
            gaps.append(abs(r.peer_mean - float(truth.p_plus[index[r.id]])))
    if not gaps:
        raise SynthError("No auditable instance to compare with the ground truth")
    values = np.asarray(gaps)
    return OracleGap(
        count=len(values),
        mean=float(values.mean()),
        median=float(np.median(values)),
        p90=float(np.quantile(values, 0.9)),
        max=float(values.max()),
    )


def _binary(
    name: str, yes_share: float, direction: str, intrinsic: bool = False
) -> FeatureGenerator:
    return FeatureGenerator(
        name=name,
        kind="binary",
        levels=("no", "yes"),
        probabilities=(1.0 - yes_share, yes_share),
        better_direction=direction,
        intrinsic=intrinsic,
    )


def sme_features() -> tuple[FeatureGenerator, ...]:
    """The fifteen survey features with their published level shares."""
    return (
        _binary("previous_turn_down", 0.0906, "lower"),
        _binary("finance_qualification", 0.5434, "higher"),
        _binary("written_plan", 0.6242, "higher"),
        FeatureGenerator(
            name="risk",
            kind="ordinal",
            levels=("above_average", "average", "low", "minimal"),
            probabilities=(0.1131, 0.2598, 0.4311, 0.1959),
            better_direction="higher",
        ),
        _binary("product_development", 0.2975, "lower"),
        _binary("business_innovation", 0.5984, "lower"),
        FeatureGenerator(
            name="loss_or_profit",
            kind="ordinal",
            levels=("loss", "broken_even", "profit"),
            probabilities=(0.8607, 0.0869, 0.0525),
            better_direction="higher",
        ),
        FeatureGenerator(
            name="turnover_growth",
            kind="ordinal",
            levels=("declined", "stayed_same", "grown_under_20", "grown_over_20"),
            probabilities=(0.1230, 0.3369, 0.4033, 0.1369),
            better_direction="higher",
        ),
        _binary("funds_injection", 0.3283, "lower"),
        _binary("credit_purchase", 0.8152, "higher"),
        _binary("management_accounts", 0.8094, "higher"),
        FeatureGenerator(
            name="sector",
            kind="nominal",
            levels=(
                "construction",
                "agriculture",
                "fishing",
                "health",
                "hospitality",
                "manufacturing",
                "real_estate",
                "transport",
                "wholesale_retail",
                "other_services",
            ),
            probabilities=(
                0.0664,
                0.1082,
                0.1201,
                0.1262,
                0.1168,
                0.0869,
                0.1668,
                0.0963,
                0.1123,
                0.0963,
            ),
            intrinsic=True,
        ),
        FeatureGenerator(
            name="legal_status",
            kind="nominal",
            levels=("sole_proprietorship", "partnership", "llp", "limited_company"),
            probabilities=(0.0488, 0.1057, 0.0750, 0.7705),
            intrinsic=True,
        ),
        _binary("startup", 0.025, "none", intrinsic=True),
        _binary("london_south_east", 0.7639, "none", intrinsic=True),
    )


def sme_preset(
    n: int = SME_INSTANCES, seed: int = 0, direct_bias: float = -1.0
) -> SynthSpec:
    """
    SME-shaped generator: survey feature shares, firm size as the protected
    attribute, and intercepts calibrated to the survey's micro-firm share and
    approval rate.
    """
    propensity = LinearLogit(
        coefficients={
            "sector": {
                "agriculture": 0.4,
                "fishing": 0.3,
                "health": -0.3,
                "manufacturing": -0.4,
                "real_estate": 0.2,
                "other_services": 0.3,
            },
            "legal_status": {
                "sole_proprietorship": 1.0,
                "partnership": 0.5,
                "limited_company": -0.5,
            },
            "startup": 1.0,
            "london_south_east": -0.2,
            "management_accounts": -0.6,
        },
        target_rate=SME_PROTECTED / SME_INSTANCES,
    )
    outcome = LinearLogit(
        coefficients={
            "previous_turn_down": -1.2,
            "finance_qualification": 0.3,
            "written_plan": 0.3,
            "risk": 0.5,
            "product_development": -0.3,
            "business_innovation": -0.4,
            "loss_or_profit": 0.4,
            "turnover_growth": 0.2,
            "funds_injection": -0.2,
            "credit_purchase": 0.2,
            "management_accounts": 0.4,
        },
        target_rate=SME_APPROVED / SME_INSTANCES,
    )
    return SynthSpec(
        n=n,
        features=sme_features(),
        propensity=propensity,
        outcome=outcome,
        direct_bias=direct_bias,
        seed=seed,
        protected_column="firm_size",
        protected_value="micro",
        unprotected_value="non_micro",
        outcome_column="loan",
        favourable_value="approved",
        unfavourable_value="rejected",
    )


def _logit_from(table: Mapping[str, Any]) -> LinearLogit:
    return LinearLogit(
        intercept=float(table.get("intercept", 0.0)),
        coefficients=dict(table.get("coefficients", {})),
        target_rate=table.get("target_rate"),
    )


def load_synth_spec(path: str | Path) -> SynthSpec:
    """
    Read a TOML generator spec.

    Either ``preset = "sme"`` (with optional ``n``, ``seed``, ``direct_bias``)
    or an explicit spec with ``[[features]]``, ``[propensity]`` and
    ``[outcome]`` tables.
    """
    document = read_toml(path)
    preset = document.get("preset")
    if preset is not None:
        if preset != "sme":
            raise SynthError(f"Unknown generator preset {preset!r}; known: 'sme'")
        return sme_preset(
            n=int(document.get("n", SME_INSTANCES)),
            seed=int(document.get("seed", 0)),
            direct_bias=float(document.get("direct_bias", -1.0)),
        )
    if "n" not in document or "features" not in document:
        raise SynthError(f"Generator spec {path} needs 'n' and [[features]]")
    features = []
    for entry in document["features"]:
        try:
            features.append(
                FeatureGenerator(
                    name=str(entry["name"]),
                    kind=str(entry["kind"]),
                    levels=tuple(entry.get("levels", ())),
                    probabilities=tuple(entry.get("probabilities", ())),
                    mean=float(entry.get("mean", 0.0)),
                    sd=float(entry.get("sd", 1.0)),
                    better_direction=str(entry.get("better_direction", "none")),
                    intrinsic=bool(entry.get("intrinsic", False)),
                )
            )
        except KeyError as e:
            raise SynthError(f"Feature entry in {path} is missing {e}") from None
    labels = {
        key: str(document[key])
        for key in (
            "protected_column",
            "protected_value",
            "unprotected_value",
            "outcome_column",
            "favourable_value",
            "unfavourable_value",
        )
        if key in document
    }
    return SynthSpec(
        n=int(document["n"]),
        features=tuple(features),
        propensity=_logit_from(document.get("propensity", {})),
        outcome=_logit_from(document.get("outcome", {})),
        direct_bias=float(document.get("direct_bias", 0.0)),
        seed=int(document.get("seed", 0)),
        **labels,
    )


def write_synthetic(
    dataset: Dataset, truth: GroundTruth, out_dir: str | Path, stem: str = "synthetic"
) -> tuple[Path, Path, Path]:
    """
    Write the CSV + schema pair and the ground-truth sidecar.

    Returns:
        Paths of (data CSV, schema TOML, ground-truth CSV)
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data_path = out / f"{stem}.csv"
    schema_path = out / f"{stem}.schema.toml"
    truth_path = out / f"{stem}.truth.csv"
    write_dataset(dataset, data_path)
    write_schema(dataset.schema, schema_path)
    truth.to_frame().to_csv(truth_path, index=False)
    return data_path, schema_path, truth_path

"""Shared test fixtures and configuration for peer-fairness tests."""

import os

import pytest

from peer_fairness.data import FeatureSchema, FeatureSpec
from peer_fairness.synth import FeatureGenerator, LinearLogit, SynthSpec, generate

# Enable pytester fixture for testing the pytest plugin
pytest_plugins = ["pytester"]


SCHEMA_TOML = """\
protected_column = "firm_size"
protected_value = "micro"
outcome_column = "loan"
favourable_value = "approved"
id_column = "id"

[[features]]
name = "written_plan"
kind = "binary"
levels = ["no", "yes"]
better_direction = "higher"

[[features]]
name = "risk"
kind = "ordinal"
levels = ["high", "average", "low"]
better_direction = "higher"

[[features]]
name = "sector"
kind = "nominal"
levels = ["retail", "farming", "services"]
intrinsic = true

[[features]]
name = "turnover"
kind = "continuous"
better_direction = "higher"
"""


@pytest.fixture
def schema():
    """Four-column schema covering every feature kind."""
    return FeatureSchema(
        features=(
            FeatureSpec("written_plan", "binary", ("no", "yes"), "higher"),
            FeatureSpec("risk", "ordinal", ("high", "average", "low"), "higher"),
            FeatureSpec(
                "sector", "nominal", ("retail", "farming", "services"), intrinsic=True
            ),
            FeatureSpec("turnover", "continuous", better_direction="higher"),
        ),
        protected_column="firm_size",
        protected_value="micro",
        outcome_column="loan",
        favourable_value="approved",
        id_column="id",
    )


@pytest.fixture
def write_files(tmp_path):
    """Write a CSV body (and the standard schema) and return both paths."""

    def write(csv_text, schema_text=SCHEMA_TOML, stem="data"):
        data_path = tmp_path / f"{stem}.csv"
        schema_path = tmp_path / f"{stem}.schema.toml"
        data_path.write_text(csv_text, encoding="utf-8")
        schema_path.write_text(schema_text, encoding="utf-8")
        return data_path, schema_path

    return write


def continuous_spec(
    n=2000,
    seed=0,
    direct_bias=0.0,
    outcome_weights=(0.8, 0.5, -0.4),
    propensity_weight=1.0,
):
    """
    Three standard-normal features; the propensity depends on the first one
    only, the outcome on all three plus the direct bias.
    """
    features = tuple(
        FeatureGenerator(name=f"x{i}", kind="continuous", better_direction="higher")
        for i in range(1, 4)
    )
    return SynthSpec(
        n=n,
        features=features,
        propensity=LinearLogit(intercept=-0.3, coefficients={"x1": propensity_weight}),
        outcome=LinearLogit(
            intercept=0.4,
            coefficients={f"x{i + 1}": w for i, w in enumerate(outcome_weights)},
        ),
        direct_bias=direct_bias,
        seed=seed,
    )


@pytest.fixture(scope="session")
def make_spec():
    """Factory for the three-feature continuous generator spec."""
    return continuous_spec


@pytest.fixture
def synthetic():
    """(spec, dataset, truth) for a 2000-instance draw without direct bias."""
    spec = continuous_spec()
    dataset, truth = generate(spec)
    return spec, dataset, truth


@pytest.fixture
def clean_env():
    """Ensure peer-fairness env vars are not set, restore after test."""
    saved = {
        name: os.environ.pop(name, None)
        for name in ("PEER_FAIRNESS_SEED", "PEER_FAIRNESS_THREADS", "SOURCE_DATE_EPOCH")
    }

    yield

    # Restore
    for name, value in saved.items():
        if value is not None:
            os.environ[name] = value

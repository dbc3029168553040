"""Audit configuration.

Every knob of the audit lives on :class:`AuditConfig`. Defaults follow the
published experimental protocol:

    delta = 0.3 x standard deviation of the protected group's coefficients
    N = 100 peer subsets of K = 30 peers, at least 35 peers per instance
    alpha = 5%, extreme factor 0.1, 80/20 split, 5-fold cross-validation

Values are resolved with the priority

    command-line flag > environment variable > config file > default

Config files are TOML with an ``[audit]`` table whose keys are the field
names of :class:`AuditConfig`.
"""

from __future__ import annotations

import os
import sys
from collections.abc import Mapping
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from peer_fairness.errors import ConfigError, UsageError

DEFAULT_GRID: tuple[float, ...] = (0.01, 0.1, 1.0, 10.0, 100.0)

TEST_STATISTICS = ("grand_mean", "dispersion")
IOR_LABEL_MODES = ("three_way", "five_way")

# Environment overrides, consulted between CLI flags and the config file
ENV_SEED = "PEER_FAIRNESS_SEED"
ENV_THREADS = "PEER_FAIRNESS_THREADS"
_ENV_VARS = {"seed": ENV_SEED, "threads": ENV_THREADS}

# Execution-only settings that must not influence report bytes
_EXECUTION_FIELDS = frozenset({"threads"})


@dataclass(frozen=True)
class AuditConfig:
    """Configuration for one audit run (and the imbalance study built on it)."""

    delta_multiplier: float = 0.3
    delta: float | None = None
    n_subsets: int = 100
    subset_size: int = 30
    min_peers: int = 35
    alpha: float = 0.05
    extreme_factor: float = 0.1
    test_statistic: str = "grand_mean"
    one_sided: bool = False
    seed: int = 0
    train_fraction: float = 0.8
    folds: int = 5
    grid: tuple[float, ...] = field(default=DEFAULT_GRID)
    explain_alpha: float | None = None
    min_accepted_peers: int = 10
    threads: int = 1
    freeze_delta: bool = False
    reselect: bool = True
    ior_labels: str = "three_way"

    def __post_init__(self) -> None:
        # Normalise list-valued grids coming from TOML or argparse
        object.__setattr__(self, "grid", tuple(float(g) for g in self.grid))
        self._validate()

    def _validate(self) -> None:
        if self.delta_multiplier <= 0:
            raise ConfigError(
                f"delta_multiplier must be positive, got {self.delta_multiplier}"
            )
        if self.delta is not None and self.delta <= 0:
            raise ConfigError(f"delta override must be positive, got {self.delta}")
        if self.n_subsets < 2:
            raise ConfigError(f"n_subsets (N) must be at least 2, got {self.n_subsets}")
        if self.subset_size < 1:
            raise ConfigError(
                f"subset_size (K) must be at least 1, got {self.subset_size}"
            )
        if self.min_peers < 1:
            raise ConfigError(f"min_peers must be at least 1, got {self.min_peers}")
        if self.subset_size > self.min_peers:
            raise ConfigError(
                f"subset_size (K={self.subset_size}) cannot exceed min_peers "
                f"({self.min_peers}): every auditable instance must be able to "
                f"supply K distinct peers."
            )
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.explain_alpha is not None and not 0.0 < self.explain_alpha < 1.0:
            raise ConfigError(
                f"explain_alpha must lie in (0, 1), got {self.explain_alpha}"
            )
        if self.extreme_factor < 0:
            raise ConfigError(
                f"extreme_factor must be nonnegative, got {self.extreme_factor}"
            )
        if self.test_statistic not in TEST_STATISTICS:
            raise ConfigError(
                f"test_statistic must be one of {TEST_STATISTICS}, "
                f"got {self.test_statistic!r}"
            )
        if self.ior_labels not in IOR_LABEL_MODES:
            raise ConfigError(
                f"ior_labels must be one of {IOR_LABEL_MODES}, got {self.ior_labels!r}"
            )
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )
        if self.folds < 2:
            raise ConfigError(f"folds must be at least 2, got {self.folds}")
        if not self.grid or any(g < 0 for g in self.grid):
            raise ConfigError(
                f"grid must be a non-empty list of nonnegative strengths, "
                f"got {list(self.grid)}"
            )
        if self.min_accepted_peers < 1:
            raise ConfigError(
                f"min_accepted_peers must be at least 1, got {self.min_accepted_peers}"
            )
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")

    @property
    def effective_explain_alpha(self) -> float:
        """Significance level for explanations (defaults to the audit alpha)."""
        return self.alpha if self.explain_alpha is None else self.explain_alpha

    def snapshot(self) -> dict[str, Any]:
        """JSON-able view of the semantic settings, excluding execution knobs."""
        data = asdict(self)
        for name in _EXECUTION_FIELDS:
            data.pop(name, None)
        data["grid"] = list(self.grid)
        return data

    def with_overrides(self, **overrides: Any) -> AuditConfig:
        """Return a copy with the non-None overrides applied."""
        clean = {k: v for k, v in overrides.items() if v is not None}
        try:
            return replace(self, **clean)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> AuditConfig:
        """Build a config from a plain mapping, rejecting unknown keys."""
        _check_keys(values)
        return cls(**dict(values))


def _check_keys(values: Mapping[str, Any]) -> None:
    known = {f.name for f in fields(AuditConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(
            f"Unknown audit configuration keys: {', '.join(unknown)}. "
            f"Known keys: {', '.join(sorted(known))}"
        )


def read_toml(path: str | Path) -> dict[str, Any]:
    """Read a TOML document; IO and syntax failures raise UsageError or ConfigError."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"File not found: {p}")
    try:
        with p.open("rb") as f:
            return tomllib.load(f)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"Could not parse {p}: {e}") from None


def _coerce(name: str, raw: str) -> Any:
    """Convert an environment string to the type of the named field."""
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(
            f"Environment override for {name!r} must be an integer, got {raw!r}"
        ) from None


def _get_config_value(
    name: str,
    cli_values: Mapping[str, Any],
    file_values: Mapping[str, Any],
    environ: Mapping[str, str],
) -> Any:
    """Get a value from CLI flag, env var, config file, in that order.

    Returns None when no source sets the value so the dataclass default applies.
    """
    # 1. CLI flag (highest priority)
    value = cli_values.get(name)
    if value is not None:
        return value

    # 2. Environment variable
    env_var = _ENV_VARS.get(name)
    if env_var is not None:
        env_value = environ.get(env_var)
        if env_value:
            return _coerce(name, env_value)

    # 3. Config file
    return file_values.get(name)


def load_config(
    path: str | Path | None = None,
    cli_values: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    base: Mapping[str, Any] | None = None,
) -> AuditConfig:
    """
    Resolve an AuditConfig from all configuration sources.

    Args:
        path: Optional TOML config file with an ``[audit]`` table
        cli_values: Values given on the command line (None means "not given")
        environ: Environment mapping (defaults to ``os.environ``)
        base: Values from a previous run's snapshot, below the config file

    Returns:
        The resolved, validated AuditConfig
    """
    file_values: dict[str, Any] = {}
    if base is not None:
        _check_keys(base)
        file_values.update({k: v for k, v in base.items() if v is not None})
    if path is not None:
        document = read_toml(path)
        audit_table = dict(document.get("audit", {}))
        _check_keys(audit_table)
        file_values.update(audit_table)

    cli_values = cli_values or {}
    environ = os.environ if environ is None else environ

    resolved: dict[str, Any] = {}
    for f in fields(AuditConfig):
        value = _get_config_value(f.name, cli_values, file_values, environ)
        if value is not None:
            resolved[f.name] = value
    return AuditConfig.from_mapping(resolved)

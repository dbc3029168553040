"""Pytest plugin providing fairness-audit fixtures.

Fixtures:
    peer_audit_config: Session-scoped AuditConfig
    sme_dataset: Session-scoped SME-shaped synthetic dataset, generated once
        and shared by every pytest-xdist worker
    peer_audit: Callable running the full audit on a dataset

Configuration:
    --peer-seed / PEER_FAIRNESS_SEED / ini ``peer_fairness_seed``
    --peer-threads / PEER_FAIRNESS_THREADS / ini ``peer_fairness_threads``

Example:
    def test_no_direct_bias(sme_dataset, peer_audit):
        run = peer_audit(sme_dataset, test_statistic="dispersion")
        assert compute_put(run.results) < 0.5
"""

from __future__ import annotations

import json
import os
from collections.abc import Callable
from pathlib import Path
from typing import Any

import pytest
from filelock import FileLock

from peer_fairness.config import ENV_SEED, ENV_THREADS, AuditConfig
from peer_fairness.data import Dataset, load_dataset
from peer_fairness.errors import ConfigError
from peer_fairness.pipeline import AuditRun, run_audit_pipeline
from peer_fairness.synth import generate, sme_preset, write_synthetic


def _get_xdist_worker_id() -> str:
    """
    Get the pytest-xdist worker ID, or "main" if not running under xdist.

    Each xdist worker process gets a unique ID (gw0, gw1, ...), used here to
    decide whether shared resources need coordinating.
    """
    return os.environ.get("PYTEST_XDIST_WORKER", "main")


class XdistCoordinator:
    """
    Coordinates shared resources across pytest-xdist workers.

    Uses file locks and JSON cache files so only one worker builds a shared
    resource (like the synthetic dataset) while the others reuse it.
    """

    def __init__(self, tmp_path_factory: pytest.TempPathFactory):
        self.worker_id = _get_xdist_worker_id()
        self.is_xdist = self.worker_id != "main"
        if self.is_xdist:
            self.shared_dir = tmp_path_factory.getbasetemp().parent
        else:
            self.shared_dir = tmp_path_factory.mktemp("peer_fairness")

    def coordinate_resource(
        self,
        resource_name: str,
        create_fn: Callable[[Path], dict[str, Any]],
    ) -> tuple[dict[str, Any], bool]:
        """
        Coordinate creation of a shared resource across workers.

        Args:
            resource_name: Name of the resource (used for cache/lock files)
            create_fn: Builds the resource in the given directory and returns
                a JSON-able description of it

        Returns:
            Tuple of (cached_data, is_creator)
        """
        if not self.is_xdist:
            return create_fn(self.shared_dir), True

        cache_file = self.shared_dir / f"peer_fairness_{resource_name}.json"
        lock_file = self.shared_dir / f"peer_fairness_{resource_name}.lock"

        with FileLock(str(lock_file)):
            if cache_file.exists():
                return json.loads(cache_file.read_text()), False
            data = create_fn(self.shared_dir)
            cache_file.write_text(json.dumps(data))
            return data, True


def pytest_addoption(parser: pytest.Parser) -> None:
    """Add peer-fairness command line options and ini settings."""
    group = parser.getgroup("peer_fairness", "Peer-induced fairness audits")
    group.addoption(
        "--peer-seed",
        dest="peer_seed",
        type=int,
        help=f"Audit and generator seed (default: {ENV_SEED} env var, then 0)",
    )
    group.addoption(
        "--peer-threads",
        dest="peer_threads",
        type=int,
        help=f"Worker threads for audits (default: {ENV_THREADS} env var, then 1)",
    )

    parser.addini("peer_fairness_seed", "Audit and generator seed", default=None)
    parser.addini("peer_fairness_threads", "Worker threads for audits", default=None)


def _get_option_value(
    config: pytest.Config,
    option: str,
    env_var: str,
    ini_name: str,
) -> Any:
    """Get config value from CLI option, env var, or ini setting.

    Priority order: CLI option > environment variable > ini setting.
    Returns None when none is set.
    """
    # 1. CLI option (highest priority)
    value = config.getoption(option, default=None)
    if value is not None:
        return value

    # 2. Environment variable
    env_value = os.environ.get(env_var)
    if env_value:
        return env_value

    # 3. INI setting (pytest.ini, pyproject.toml, etc.)
    ini_value = config.getini(ini_name)
    if ini_value:
        return ini_value
    return None


def config_from_pytest(config: pytest.Config) -> AuditConfig:
    """Resolve the session AuditConfig from pytest options."""
    values: dict[str, int] = {}
    for field, option, env_var, ini_name in (
        ("seed", "peer_seed", ENV_SEED, "peer_fairness_seed"),
        ("threads", "peer_threads", ENV_THREADS, "peer_fairness_threads"),
    ):
        raw = _get_option_value(config, option, env_var, ini_name)
        if raw is None:
            continue
        try:
            values[field] = int(raw)
        except ValueError:
            raise ConfigError(f"{field} must be an integer, got {raw!r}") from None
    return AuditConfig(**values)


@pytest.fixture(scope="session")
def peer_audit_config(request: pytest.FixtureRequest) -> AuditConfig:
    """Session-scoped audit configuration (CLI > env > ini > default)."""
    return config_from_pytest(request.config)


@pytest.fixture(scope="session")
def _peer_xdist_coordinator(
    tmp_path_factory: pytest.TempPathFactory,
) -> XdistCoordinator:
    """Session-scoped coordinator for xdist worker synchronization."""
    return XdistCoordinator(tmp_path_factory)


@pytest.fixture(scope="session")
def sme_dataset(
    peer_audit_config: AuditConfig,
    _peer_xdist_coordinator: XdistCoordinator,
) -> Dataset:
    """
    SME-shaped synthetic dataset, seeded with the session seed.

    The first worker writes the CSV and schema to a shared directory; the
    others load the same files.
    """
    seed = peer_audit_config.seed

    def create_dataset(directory: Path) -> dict[str, Any]:
        dataset, truth = generate(sme_preset(seed=seed))
        data_path, schema_path, _ = write_synthetic(
            dataset, truth, directory, stem=f"sme_{seed}"
        )
        return {"data": str(data_path), "schema": str(schema_path)}

    data, _ = _peer_xdist_coordinator.coordinate_resource(
        f"sme_dataset_{seed}", create_dataset
    )
    return load_dataset(data["data"], data["schema"])


@pytest.fixture
def peer_audit(peer_audit_config: AuditConfig) -> Callable[..., AuditRun]:
    """
    Callable running the full audit pipeline with the session config.

    Keyword arguments override AuditConfig fields for that call.
    """

    def run(dataset: Dataset, explain: bool = True, **overrides: Any) -> AuditRun:
        config = peer_audit_config.with_overrides(**overrides)
        return run_audit_pipeline(dataset, config, explain=explain)

    return run

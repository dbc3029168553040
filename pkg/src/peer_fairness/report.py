"""Report documents and plot-ready tables.

Every output carries the run manifest: JSON reports embed it under
``"manifest"``, CSV tables start with ``# key=value`` provenance lines.
Writes into an output directory are serialised with a file lock so parallel
runs (for example pytest-xdist workers) never interleave partial files.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import os
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pandas as pd
from filelock import FileLock

from peer_fairness.audit import (
    AuditResult,
    category_counts,
    category_rejection_stats,
    results_frame,
)
from peer_fairness.errors import ReportError, UsageError
from peer_fairness.model import ProbabilityModel, load_model, model_hash, save_model
from peer_fairness.pipeline import AuditRun
from peer_fairness.robustness import ImbalanceReport, compute_put

REPORT_FILE = "audit_report.json"
LIKELIHOOD_FILE = "likelihood_comparison.csv"
REJECTION_FILE = "category_rejection.csv"
IC_FILE = "ic_table.csv"
PEERS_FILE = "peers.csv"
PEER_EDGES_FILE = "peers_edges.csv"
OUTCOME_MODEL_FILE = "outcome_model.json"
PROTECTED_MODEL_FILE = "protected_model.json"
EXPLANATIONS_FILE = "explanations.csv"
EXPLANATION_SUMMARY_FILE = "explanation_summary.csv"
IMBALANCE_FILE = "imbalance.csv"
LOCK_FILE = ".peer-fairness.lock"

REPORT_FORMAT = 1

# Decisions that shape the numbers but are not visible in the config
DESIGN_NOTES = (
    "rows with more than 20% missing features are dropped; remaining gaps are "
    "imputed with the feature mode (categorical) or median (continuous)",
    "the selected models are refit on the training split and score every "
    "instance, training instances included",
    "discriminated means the instance's own probability is below its peers' mean",
    "peer subsets are drawn without replacement within a subset and "
    "independently across subsets",
)


def generated_at() -> str | None:
    """
    UTC timestamp taken from SOURCE_DATE_EPOCH.

    Returns None when the variable is unset; reports then carry no timestamp
    so that identical runs write identical bytes.
    """
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if not epoch:
        return None
    try:
        seconds = int(epoch)
    except ValueError:
        raise UsageError(
            f"SOURCE_DATE_EPOCH must be an integer, got {epoch!r}"
        ) from None
    moment = datetime.datetime.fromtimestamp(seconds, tz=datetime.timezone.utc)
    return moment.isoformat()


@dataclass(frozen=True)
class RunManifest:
    """What produced a report: settings, data, models and software."""

    config: dict[str, Any]
    dataset_fingerprint: str
    dataset_rows: int
    software_version: str
    generated_at: str | None = None
    model_hashes: dict[str, str] = field(default_factory=dict)
    model_selection: dict[str, Any] = field(default_factory=dict)
    ingestion: dict[str, Any] | None = None
    notes: tuple[str, ...] = DESIGN_NOTES

    @classmethod
    def from_run(cls, run: AuditRun) -> RunManifest:
        from peer_fairness import __version__

        selection = {
            report.target: report.to_dict()
            for report in (run.f_selection, run.g_selection)
            if report is not None
        }
        return cls(
            config=run.config.snapshot(),
            dataset_fingerprint=run.dataset.fingerprint(),
            dataset_rows=len(run.dataset),
            software_version=__version__,
            generated_at=generated_at(),
            model_hashes={
                "outcome": model_hash(run.f_model),
                "protected": model_hash(run.g_model),
            },
            model_selection=selection,
            ingestion=(
                run.dataset.ingestion.to_dict()
                if run.dataset.ingestion is not None
                else None
            ),
        )

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {
            "config": self.config,
            "dataset_fingerprint": self.dataset_fingerprint,
            "dataset_rows": self.dataset_rows,
            "software_version": self.software_version,
            "model_hashes": self.model_hashes,
            "model_selection": self.model_selection,
            "ingestion": self.ingestion,
            "notes": list(self.notes),
        }
        if self.generated_at is not None:
            data["generated_at"] = self.generated_at
        return data

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunManifest:
        try:
            return cls(
                config=dict(data["config"]),
                dataset_fingerprint=str(data["dataset_fingerprint"]),
                dataset_rows=int(data["dataset_rows"]),
                software_version=str(data["software_version"]),
                generated_at=data.get("generated_at"),
                model_hashes=dict(data.get("model_hashes", {})),
                model_selection=dict(data.get("model_selection", {})),
                ingestion=data.get("ingestion"),
                notes=tuple(data.get("notes", ())),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ReportError(f"Malformed run manifest: {e}") from None

    def config_hash(self) -> str:
        payload = json.dumps(self.config, sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def header(self) -> dict[str, str]:
        """Provenance lines for CSV outputs."""
        header = {"software_version": self.software_version}
        if self.generated_at is not None:
            header["generated_at"] = self.generated_at
        header.update(
            dataset_fingerprint=self.dataset_fingerprint,
            config_sha256=self.config_hash(),
            model_hashes=json.dumps(self.model_hashes, sort_keys=True),
            config=json.dumps(self.config, sort_keys=True),
        )
        return header


def _dumps(document: Mapping[str, Any]) -> str:
    return json.dumps(document, indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_csv_with_provenance(
    path: Path, header: Mapping[str, str], frame: pd.DataFrame
) -> None:
    with path.open("w", newline="", encoding="utf-8") as f:
        for key, value in header.items():
            f.write(f"# {key}={value}\n")
        frame.to_csv(f, index=False)


def read_csv_with_provenance(path: str | Path) -> tuple[dict[str, str], pd.DataFrame]:
    """Split a provenance-headed CSV into its header mapping and table."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"File not found: {p}")
    header: dict[str, str] = {}
    skip = 0
    with p.open(encoding="utf-8") as f:
        for line in f:
            if not line.startswith("# "):
                break
            key, _, value = line[2:].rstrip("\n").partition("=")
            header[key] = value
            skip += 1
    return header, pd.read_csv(p, skiprows=skip, dtype={"id": str, "instance_id": str})


def audit_document(run: AuditRun, manifest: RunManifest) -> dict[str, Any]:
    """The JSON audit report as a plain mapping."""
    counts = category_counts(run.results)
    auditable = sum(r.auditable for r in run.results)
    document: dict[str, Any] = {
        "format": REPORT_FORMAT,
        "manifest": manifest.to_dict(),
        "summary": {
            "protected_instances": len(run.results),
            "auditable": auditable,
            "category_counts": {c.value: n for c, n in counts.items()},
            "put": compute_put(run.results) if auditable else None,
            "marginal": run.marginal,
            "sigma_minus": run.ic.sigma_minus,
            "delta": run.delta,
            "clamped_propensities": run.ic.clamped,
        },
        "results": [r.to_dict() for r in run.results],
    }
    if run.explanations is not None:
        document["explanations"] = run.explanations.to_dict()
    return document


def write_audit_report(
    run: AuditRun, out_dir: str | Path, manifest: RunManifest | None = None
) -> dict[str, Path]:
    """
    Write the JSON report and every table of an audit run.

    Returns:
        Mapping from output name to path
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = manifest or RunManifest.from_run(run)
    header = manifest.header()
    paths = {
        "report": out / REPORT_FILE,
        "likelihood": out / LIKELIHOOD_FILE,
        "rejection": out / REJECTION_FILE,
        "ic": out / IC_FILE,
        "peers": out / PEERS_FILE,
        "peer_edges": out / PEER_EDGES_FILE,
        "outcome_model": out / OUTCOME_MODEL_FILE,
        "protected_model": out / PROTECTED_MODEL_FILE,
    }
    with FileLock(str(out / LOCK_FILE)):
        document = audit_document(run, manifest)
        paths["report"].write_text(_dumps(document), encoding="utf-8")
        write_csv_with_provenance(
            paths["likelihood"], header, results_frame(run.results)
        )
        write_csv_with_provenance(
            paths["rejection"],
            header,
            category_rejection_stats(run.results, run.dataset, run.peer_set),
        )
        write_csv_with_provenance(paths["ic"], header, run.ic.to_frame())
        write_csv_with_provenance(paths["peers"], header, run.peer_set.to_frame())
        write_csv_with_provenance(
            paths["peer_edges"], header, run.peer_set.edges_frame()
        )
        save_model(run.f_model, paths["outcome_model"], run.f_selection)
        save_model(run.g_model, paths["protected_model"], run.g_selection)
        if run.explanations is not None:
            paths["explanations"] = out / EXPLANATIONS_FILE
            paths["explanation_summary"] = out / EXPLANATION_SUMMARY_FILE
            write_csv_with_provenance(
                paths["explanations"], header, run.explanations.records_frame()
            )
            write_csv_with_provenance(
                paths["explanation_summary"], header, run.explanations.summary_frame()
            )
    return paths


def write_explanations(
    run: AuditRun, out_dir: str | Path, manifest: RunManifest | None = None
) -> dict[str, Path]:
    """Write only the explanation tables of a run."""
    if run.explanations is None:
        raise ReportError("Audit run carries no explanations")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = (manifest or RunManifest.from_run(run)).header()
    paths = {
        "explanations": out / EXPLANATIONS_FILE,
        "explanation_summary": out / EXPLANATION_SUMMARY_FILE,
    }
    with FileLock(str(out / LOCK_FILE)):
        write_csv_with_provenance(
            paths["explanations"], header, run.explanations.records_frame()
        )
        write_csv_with_provenance(
            paths["explanation_summary"], header, run.explanations.summary_frame()
        )
    return paths


def write_imbalance_report(
    report: ImbalanceReport, out_dir: str | Path, manifest: RunManifest
) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / IMBALANCE_FILE
    header = dict(manifest.header())
    header["baseline_omega"] = repr(report.baseline_omega)
    header["baseline_put"] = repr(report.baseline_put)
    for i, note in enumerate(report.notes):
        header[f"note_{i}"] = note
    with FileLock(str(out / LOCK_FILE)):
        write_csv_with_provenance(path, header, report.to_frame())
    return path


@dataclass(frozen=True)
class AuditReport:
    """A report read back from disk."""

    manifest: RunManifest
    summary: dict[str, Any]
    results: list[AuditResult]


def read_audit_report(path: str | Path) -> AuditReport:
    """
    Load an audit report JSON.

    Raises:
        UsageError: The file does not exist
        ReportError: The file is not an audit report
    """
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"File not found: {p}")
    try:
        document = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ReportError(f"{p} is not valid JSON: {e}") from None
    if not isinstance(document, dict) or document.get("format") != REPORT_FORMAT:
        raise ReportError(f"{p} is not a peer-fairness audit report")
    try:
        results = [AuditResult.from_dict(r) for r in document["results"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ReportError(f"{p} holds a malformed result record: {e}") from None
    return AuditReport(
        manifest=RunManifest.from_dict(document["manifest"]),
        summary=dict(document.get("summary", {})),
        results=results,
    )


def load_report_models(
    path: str | Path, manifest: RunManifest
) -> tuple[ProbabilityModel, ProbabilityModel] | None:
    """
    The (outcome, protected) models saved next to a report JSON.

    Returns None when the model files are not there.

    Raises:
        ReportError: A saved model does not hash to the value in the manifest
    """
    directory = Path(path).parent
    files = {
        "outcome": directory / OUTCOME_MODEL_FILE,
        "protected": directory / PROTECTED_MODEL_FILE,
    }
    if not all(p.is_file() for p in files.values()):
        return None
    models = {}
    for target, p in files.items():
        model, _ = load_model(p)
        if model_hash(model) != manifest.model_hashes.get(target):
            raise ReportError(
                f"{p} does not match the {target} model recorded in the report"
            )
        models[target] = model
    return models["outcome"], models["protected"]


def convert_report(path: str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Rebuild the likelihood and category-rejection tables from a report JSON."""
    report = read_audit_report(path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    header = report.manifest.header()
    paths = {"likelihood": out / LIKELIHOOD_FILE, "rejection": out / REJECTION_FILE}
    with FileLock(str(out / LOCK_FILE)):
        write_csv_with_provenance(
            paths["likelihood"], header, results_frame(report.results)
        )
        write_csv_with_provenance(
            paths["rejection"], header, category_rejection_stats(report.results)
        )
    return paths


def summary_lines(results: Sequence[AuditResult]) -> list[str]:
    """Human-readable category counts and PUT."""
    counts = category_counts(results)
    lines = [
        f"{c.abbreviation}  {c.value:<24} {n:>7}" for c, n in counts.items()
    ]
    lines.append(f"    {'total':<24} {sum(counts.values()):>7}")
    if any(r.auditable for r in results):
        lines.append(f"PUT {compute_put(results):.4f}")
    return lines

"""Peer-induced fairness auditing for binary decision systems."""

from peer_fairness.audit import AuditResult, Category, audit_all
from peer_fairness.config import AuditConfig, load_config
from peer_fairness.data import (
    Dataset,
    FeatureEncoder,
    FeatureSchema,
    FeatureSpec,
    load_dataset,
    load_schema,
    split,
)
from peer_fairness.explain import ExplanationReport, explain_all, explain_instance
from peer_fairness.ic import ICTable, compute_ic, compute_marginal
from peer_fairness.model import ProbabilityModel, fit_logistic, select_model
from peer_fairness.peers import PeerSet, identify_peers, resolve_delta
from peer_fairness.pipeline import AuditRun, run_audit_pipeline
from peer_fairness.robustness import (
    ImbalanceReport,
    compute_ior,
    compute_put,
    run_imbalance_study,
    undersample_to_omega,
)
from peer_fairness.synth import SynthSpec, generate, oracle_models, sme_preset

__version__ = "0.1.0"
__all__ = [
    "AuditConfig",
    "AuditResult",
    "AuditRun",
    "Category",
    "Dataset",
    "ExplanationReport",
    "FeatureEncoder",
    "FeatureSchema",
    "FeatureSpec",
    "ICTable",
    "ImbalanceReport",
    "PeerSet",
    "ProbabilityModel",
    "SynthSpec",
    "audit_all",
    "compute_ic",
    "compute_ior",
    "compute_marginal",
    "compute_put",
    "explain_all",
    "explain_instance",
    "fit_logistic",
    "generate",
    "identify_peers",
    "load_config",
    "load_dataset",
    "load_schema",
    "oracle_models",
    "resolve_delta",
    "run_audit_pipeline",
    "run_imbalance_study",
    "select_model",
    "sme_preset",
    "split",
    "undersample_to_omega",
]

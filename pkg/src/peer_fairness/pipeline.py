"""End-to-end audit: split, model selection, coefficients, peers, verdicts."""

from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

from peer_fairness.audit import AuditResult, Category, audit_all, category_counts
from peer_fairness.config import AuditConfig
from peer_fairness.data import Dataset, FeatureEncoder, split
from peer_fairness.explain import ExplanationReport, explain_all
from peer_fairness.ic import ICTable, compute_ic, compute_marginal
from peer_fairness.model import ModelSelectionReport, ProbabilityModel, select_model
from peer_fairness.peers import PeerSet, identify_peers, resolve_delta

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AuditRun:
    """Every intermediate product of one audit."""

    dataset: Dataset
    config: AuditConfig
    f_model: ProbabilityModel
    g_model: ProbabilityModel
    marginal: float
    ic: ICTable
    delta: float
    peer_set: PeerSet
    results: list[AuditResult]
    f_selection: ModelSelectionReport | None = None
    g_selection: ModelSelectionReport | None = None
    explanations: ExplanationReport | None = None

    @property
    def counts(self) -> dict[Category, int]:
        return category_counts(self.results)

    @property
    def chosen_strengths(self) -> dict[str, float]:
        return {
            "outcome": self.f_model.regularization_strength,
            "protected": self.g_model.regularization_strength,
        }


def fit_models(
    dataset: Dataset,
    config: AuditConfig,
    strengths: Mapping[str, float] | None = None,
) -> tuple[
    ProbabilityModel, ModelSelectionReport, ProbabilityModel, ModelSelectionReport
]:
    """
    Split, then select the outcome model f and the propensity model g.

    ``strengths`` pins the penalty of each target ("outcome", "protected")
    instead of searching ``config.grid``.
    """
    train, test = split(dataset, config.train_fraction, config.seed)
    encoder = FeatureEncoder.fit(train)
    fitted = []
    for target in ("outcome", "protected"):
        grid = (strengths[target],) if strengths else config.grid
        model, report = select_model(
            train,
            target,
            grid,
            config.folds,
            config.seed,
            test=test,
            encoder=encoder,
            n_jobs=config.threads,
        )
        logger.info(
            "Selected %s model: strength=%s cv_auc=%s test_auc=%s",
            target,
            report.chosen,
            max(report.cv_auc),
            report.test_auc,
        )
        fitted.append((model, report))
    (f_model, f_report), (g_model, g_report) = fitted
    return f_model, f_report, g_model, g_report


def run_audit_pipeline(
    dataset: Dataset,
    config: AuditConfig,
    explain: bool = True,
    strengths: Mapping[str, float] | None = None,
    delta: float | None = None,
    models: tuple[ProbabilityModel, ProbabilityModel] | None = None,
) -> AuditRun:
    """
    Run the whole audit on ``dataset``.

    Args:
        dataset: Instances to audit (every protected instance is audited)
        config: Audit settings
        explain: Whether to build watch-out lists for fair rejections
        strengths: Fixed penalty per target instead of a grid search
        delta: Absolute peer threshold, overriding the config
        models: Pre-fitted (f, g) models; skips splitting and selection

    Returns:
        The AuditRun with every intermediate product
    """
    f_selection = g_selection = None
    if models is None:
        f_model, f_selection, g_model, g_selection = fit_models(
            dataset, config, strengths
        )
    else:
        f_model, g_model = models

    marginal = compute_marginal(dataset)
    ic = compute_ic(dataset, g_model, marginal)
    if delta is None:
        delta = (
            config.delta
            if config.delta is not None
            else resolve_delta(ic, config.delta_multiplier)
        )
    peer_set = identify_peers(ic, delta, config.min_peers)
    logger.info(
        "delta=%.6g: %d of %d protected instances have at least %d peers",
        delta,
        int(peer_set.auditable.sum()),
        len(peer_set),
        config.min_peers,
    )

    results = audit_all(dataset, f_model, peer_set, config)
    explanations = (
        explain_all(dataset, results, peer_set, config) if explain else None
    )
    return AuditRun(
        dataset=dataset,
        config=config,
        f_model=f_model,
        g_model=g_model,
        marginal=marginal,
        ic=ic,
        delta=delta,
        peer_set=peer_set,
        results=results,
        f_selection=f_selection,
        g_selection=g_selection,
        explanations=explanations,
    )

"""Audit stability under group imbalance.

The protected group is under-sampled to a series of target shares omega and
the full audit is re-run on each subset. Two summaries are tracked:

    PUT  share of audited protected instances labelled unfair
    IOR  share of instances audited in both runs whose verdict is unchanged
"""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd

from peer_fairness.audit import AuditResult
from peer_fairness.config import AuditConfig
from peer_fairness.data import Dataset
from peer_fairness.errors import InfeasibleOmegaError, RobustnessError
from peer_fairness.pipeline import AuditRun, run_audit_pipeline

logger = logging.getLogger(__name__)

MIN_PROTECTED = 50
DEFAULT_REPEATS = 5
# Reference imbalance levels: the baseline share of 41.33% stepped down by 5 points
REFERENCE_OMEGAS = (0.3633, 0.3133, 0.2633, 0.2133, 0.1633, 0.1133)


def undersample_to_omega(
    dataset: Dataset,
    target_omega: float,
    seed: int,
    min_protected: int = MIN_PROTECTED,
) -> Dataset:
    """
    Drop protected instances uniformly at random until their share is
    ``target_omega`` (within one instance). Unprotected instances are kept.

    Raises:
        InfeasibleOmegaError: The target exceeds the current share, is not in
            (0, 1), or leaves fewer than ``min_protected`` protected instances
    """
    current = dataset.omega
    if not 0.0 < target_omega < 1.0:
        raise InfeasibleOmegaError(
            f"Target omega must lie in (0, 1), got {target_omega}"
        )
    if target_omega > current + 1e-12:
        raise InfeasibleOmegaError(
            f"Target omega {target_omega:.4f} exceeds the current share "
            f"{current:.4f}; only under-sampling is supported"
        )
    n_plus = dataset.n_unprotected
    keep = int(round(target_omega * n_plus / (1.0 - target_omega)))
    if keep >= dataset.n_protected:
        return dataset
    if keep < min_protected:
        raise InfeasibleOmegaError(
            f"Target omega {target_omega:.4f} leaves {keep} protected instances; "
            f"at least {min_protected} are required"
        )
    rng = np.random.default_rng(seed)
    protected = np.flatnonzero(dataset.protected)
    kept = rng.choice(protected, size=keep, replace=False)
    rows = np.sort(np.concatenate([np.flatnonzero(~dataset.protected), kept]))
    return dataset.subset(rows)


def compute_put(results: Sequence[AuditResult]) -> float:
    """Unfairly treated share among auditable results."""
    auditable = [r for r in results if r.auditable]
    if not auditable:
        raise RobustnessError("PUT is undefined: no instance was auditable")
    return sum(r.category.is_unfair for r in auditable) / len(auditable)


def compute_ior(
    baseline: Sequence[AuditResult],
    variant: Sequence[AuditResult],
    labels: str = "three_way",
) -> float:
    """
    Share of commonly audited instances whose verdict did not change.

    ``labels="three_way"`` compares discriminated / fair / privileged;
    ``"five_way"`` compares the full category.
    """
    if labels not in ("three_way", "five_way"):
        raise RobustnessError(f"Unknown IOR label mode {labels!r}")
    base = {r.id: r.category for r in baseline if r.auditable}
    common = [(base[r.id], r.category) for r in variant if r.auditable and r.id in base]
    if not common:
        raise RobustnessError("IOR is undefined: no instance was audited in both runs")
    if labels == "three_way":
        same = sum(a.side == b.side for a, b in common)
    else:
        same = sum(a is b for a, b in common)
    return same / len(common)


def _spread(values: list[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


@dataclass(frozen=True)
class ImbalanceLevel:
    omega: float
    realised_omega: float
    put_mean: float
    put_sd: float
    ior_mean: float
    ior_sd: float
    repeats: int
    audited_counts: tuple[int, ...]

    @property
    def sd_undefined(self) -> bool:
        """A single repeat has no spread; its sd is reported as 0."""
        return self.repeats < 2


@dataclass(frozen=True)
class ImbalanceReport:
    baseline_omega: float
    baseline_put: float
    levels: tuple[ImbalanceLevel, ...]
    notes: tuple[str, ...] = field(default_factory=tuple)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "omega": level.omega,
                    "realised_omega": level.realised_omega,
                    "put_mean": level.put_mean,
                    "put_sd": level.put_sd,
                    "ior_mean": level.ior_mean,
                    "ior_sd": level.ior_sd,
                    "repeats": level.repeats,
                    "audited_mean": float(np.mean(level.audited_counts)),
                    "sd_undefined": level.sd_undefined,
                }
                for level in self.levels
            ],
            columns=[
                "omega",
                "realised_omega",
                "put_mean",
                "put_sd",
                "ior_mean",
                "ior_sd",
                "repeats",
                "audited_mean",
                "sd_undefined",
            ],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "baseline_omega": self.baseline_omega,
            "baseline_put": self.baseline_put,
            "levels": self.to_frame().to_dict(orient="records"),
            "notes": list(self.notes),
        }


def _repeat_seed(seed: int, level: int, repeat: int) -> int:
    return int(np.random.SeedSequence([seed, level, repeat]).generate_state(1)[0])


def run_imbalance_study(
    dataset: Dataset,
    config: AuditConfig,
    omegas: Sequence[float] = REFERENCE_OMEGAS,
    repeats: int = DEFAULT_REPEATS,
    seed: int | None = None,
    baseline: AuditRun | None = None,
) -> ImbalanceReport:
    """
    Re-run the audit at each target omega, ``repeats`` times, and compare
    every run with the baseline audit of the full dataset.

    Each run refits both models, recomputes coefficients and re-resolves
    delta, unless ``config.reselect`` is off (baseline penalties are reused)
    or ``config.freeze_delta`` is on (baseline delta is reused). Infeasible
    targets are skipped and noted.

    Args:
        dataset: Full dataset (its protected share is the baseline omega)
        config: Audit settings, shared by every run
        omegas: Target protected shares
        repeats: Independent under-samples per target
        seed: Under-sampling seed (defaults to ``config.seed``)
        baseline: A finished audit of ``dataset`` to reuse

    Returns:
        ImbalanceReport with PUT and IOR mean and sd per feasible target
    """
    if repeats < 1:
        raise RobustnessError(f"repeats must be at least 1, got {repeats}")
    seed = config.seed if seed is None else seed
    if baseline is None:
        baseline = run_audit_pipeline(dataset, config, explain=False)
    strengths = None if config.reselect else baseline.chosen_strengths
    delta = baseline.delta if config.freeze_delta else None

    levels: list[ImbalanceLevel] = []
    notes: list[str] = []
    for i, omega in enumerate(omegas):
        puts: list[float] = []
        iors: list[float] = []
        audited: list[int] = []
        realised: list[float] = []
        try:
            for r in range(repeats):
                subset = undersample_to_omega(dataset, omega, _repeat_seed(seed, i, r))
                run = run_audit_pipeline(
                    subset, config, explain=False, strengths=strengths, delta=delta
                )
                puts.append(compute_put(run.results))
                iors.append(
                    compute_ior(baseline.results, run.results, config.ior_labels)
                )
                audited.append(sum(res.auditable for res in run.results))
                realised.append(subset.omega)
        except InfeasibleOmegaError as e:
            logger.warning("Skipping omega=%s: %s", omega, e)
            notes.append(f"omega={omega}: {e}")
            continue
        logger.info(
            "omega=%.4f: PUT %.4f, IOR %.4f over %d repeats",
            omega,
            float(np.mean(puts)),
            float(np.mean(iors)),
            repeats,
        )
        levels.append(
            ImbalanceLevel(
                omega=float(omega),
                realised_omega=float(np.mean(realised)),
                put_mean=float(np.mean(puts)),
                put_sd=_spread(puts),
                ior_mean=float(np.mean(iors)),
                ior_sd=_spread(iors),
                repeats=repeats,
                audited_counts=tuple(audited),
            )
        )
    if repeats == 1:
        notes.append("single repeat per level: standard deviations reported as 0")
    return ImbalanceReport(
        baseline_omega=dataset.omega,
        baseline_put=compute_put(baseline.results),
        levels=tuple(levels),
        notes=tuple(notes),
    )

"""Watch-out lists for fairly treated rejections.

A fairly treated instance that was nonetheless rejected is compared feature by
feature with its accepted peers. For every non-intrinsic feature with a
direction, values are mapped onto a better-is-higher scale and the mid-rank
tail probability

    q = (#peers strictly worse than the instance + 0.5 * #ties) / #peers

is computed. The feature is flagged when q <= alpha.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from peer_fairness.audit import AuditResult, Category
from peer_fairness.config import AuditConfig
from peer_fairness.data import Dataset, FeatureSchema, Instance
from peer_fairness.errors import ExplanationError
from peer_fairness.peers import PeerSet

DEFAULT_MIN_ACCEPTED_PEERS = 10


@dataclass(frozen=True)
class FeatureTest:
    feature: str
    value: Any
    q: float
    worse: bool


@dataclass(frozen=True)
class ExplanationRecord:
    """Per-feature flags for one instance. ``note`` says why nothing was tested."""

    id: str
    tested: tuple[FeatureTest, ...] = ()
    accepted_peers: int = 0
    note: str | None = None

    @property
    def explained(self) -> bool:
        return bool(self.tested)

    @property
    def flagged(self) -> tuple[str, ...]:
        return tuple(t.feature for t in self.tested if t.worse)


@dataclass(frozen=True)
class ExplanationReport:
    """Explanation records plus the per-feature share of flagged instances."""

    records: tuple[ExplanationRecord, ...]
    features: tuple[str, ...]
    flagged_counts: dict[str, int]
    explained_count: int
    notes: tuple[str, ...] = field(default_factory=tuple)

    @property
    def percentages(self) -> dict[str, float]:
        if not self.explained_count:
            return {}
        return {
            f: 100.0 * self.flagged_counts[f] / self.explained_count
            for f in self.features
        }

    def records_frame(self) -> pd.DataFrame:
        rows = [
            {
                "instance_id": r.id,
                "feature": t.feature,
                "value": t.value,
                "q": t.q,
                "flagged": t.worse,
            }
            for r in self.records
            for t in r.tested
        ]
        return pd.DataFrame(
            rows, columns=["instance_id", "feature", "value", "q", "flagged"]
        )

    def summary_frame(self) -> pd.DataFrame:
        percentages = self.percentages
        return pd.DataFrame(
            [
                {
                    "feature": f,
                    "flagged": self.flagged_counts[f],
                    "explained": self.explained_count,
                    "percentage": percentages.get(f, 0.0),
                }
                for f in self.features
            ],
            columns=["feature", "flagged", "explained", "percentage"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "explained_count": self.explained_count,
            "percentages": self.percentages,
            "notes": list(self.notes),
            "skipped": [
                {"id": r.id, "note": r.note} for r in self.records if not r.explained
            ],
        }


def tail_probability(value: float, peer_values: np.ndarray) -> float:
    """Mid-rank share of peers strictly below ``value`` (ties count one half)."""
    worse = np.count_nonzero(peer_values < value)
    ties = np.count_nonzero(peer_values == value)
    return (worse + 0.5 * ties) / len(peer_values)


def explain_instance(
    instance: Instance,
    accepted_peers: Sequence[Instance],
    schema: FeatureSchema,
    alpha: float,
    min_accepted_peers: int = DEFAULT_MIN_ACCEPTED_PEERS,
) -> ExplanationRecord:
    """
    Compare a rejected instance with its accepted peers feature by feature.

    Args:
        instance: A fairly treated instance with observed y = 0
        accepted_peers: The instance's peers with observed y = 1
        schema: Feature schema (directions and intrinsic flags)
        alpha: Flag threshold for the tail probability
        min_accepted_peers: Below this many accepted peers nothing is tested

    Returns:
        ExplanationRecord; empty with a note when skipped
    """
    if not 0.0 < alpha < 1.0:
        raise ExplanationError(f"alpha must lie in (0, 1), got {alpha}")
    if instance.y != 0:
        raise ExplanationError(
            f"Instance {instance.id!r} was accepted; only rejections are explained"
        )
    if any(p.y != 1 for p in accepted_peers):
        raise ExplanationError(
            f"Peers passed for instance {instance.id!r} must all be accepted (y = 1)"
        )
    if len(accepted_peers) < min_accepted_peers:
        return ExplanationRecord(
            id=instance.id,
            accepted_peers=len(accepted_peers),
            note=(
                f"only {len(accepted_peers)} accepted peers; at least "
                f"{min_accepted_peers} are needed"
            ),
        )

    eligible = [(i, f) for i, f in enumerate(schema.features) if f.explainable]
    if not eligible:
        return ExplanationRecord(
            id=instance.id,
            accepted_peers=len(accepted_peers),
            note="schema has no non-intrinsic feature with a better direction",
        )

    tested = []
    for i, spec in eligible:
        own = spec.score(instance.x[i])
        peer_scores = np.array([spec.score(p.x[i]) for p in accepted_peers])
        q = tail_probability(own, peer_scores)
        tested.append(
            FeatureTest(feature=spec.name, value=instance.x[i], q=q, worse=q <= alpha)
        )
    return ExplanationRecord(
        id=instance.id, tested=tuple(tested), accepted_peers=len(accepted_peers)
    )


def aggregate_explanations(
    records: Sequence[ExplanationRecord], schema: FeatureSchema
) -> ExplanationReport:
    """Share of explained instances flagged on each eligible feature."""
    features = tuple(f.name for f in schema.explainable_features)
    counts = dict.fromkeys(features, 0)
    explained = [r for r in records if r.explained]
    for r in explained:
        for name in r.flagged:
            counts[name] += 1
    notes: list[str] = []
    if not explained:
        notes.append("no instance qualified for an explanation")
    skipped = len(records) - len(explained)
    if skipped:
        notes.append(f"{skipped} instances skipped")
    return ExplanationReport(
        records=tuple(records),
        features=features,
        flagged_counts=counts,
        explained_count=len(explained),
        notes=tuple(notes),
    )


def explain_all(
    dataset: Dataset,
    results: Sequence[AuditResult],
    peer_set: PeerSet,
    config: AuditConfig,
) -> ExplanationReport:
    """
    Explain every fairly treated rejection of an audit.

    Only instances labelled FairlyTreated with observed y = 0 are considered;
    their accepted peers are the delta-peers with observed y = 1.
    """
    by_id = {r.id: r for r in results}
    targets = []
    for k in range(len(peer_set)):
        result = by_id.get(peer_set.protected_id(k))
        if result is None:
            raise ExplanationError(
                f"No audit result for protected instance {peer_set.protected_id(k)!r}"
            )
        if result.category is Category.FAIRLY_TREATED and result.observed_y == 0:
            targets.append(k)

    instances = dataset.instances if targets else []

    def run(k: int) -> ExplanationRecord:
        position = int(peer_set.protected_positions[k])
        peers = peer_set.peers[k]
        accepted = [instances[int(j)] for j in peers[dataset.y[peers] == 1]]
        return explain_instance(
            instances[position],
            accepted,
            dataset.schema,
            config.effective_explain_alpha,
            config.min_accepted_peers,
        )

    records = Parallel(n_jobs=config.threads, backend="threading")(
        delayed(run)(k) for k in targets
    )
    return aggregate_explanations(records, dataset.schema)

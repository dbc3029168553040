"""Per-instance peer audit.

For each auditable protected instance a:

    p_a      = f(x_a, s_minus)
    T_j      = f(x_j, s_plus) for every peer j
    t_bars   = means of N random K-subsets of the T_j
    z, p     = z-test of mean(t_bars) against p_a
    category = treatment label from p, the sign of the gap and its size
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum
from typing import Any

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.stats import norm

from peer_fairness.config import AuditConfig
from peer_fairness.data import Dataset
from peer_fairness.errors import AuditError, PeerSamplingError, ProposalBoundViolation
from peer_fairness.model import ProbabilityModel
from peer_fairness.peers import PeerSet

# Below this spread the t_bars are treated as constant
_DEGENERATE_SD = 1e-12
# Slack for floating-point rounding in the subset-mean bound check
_BOUND_SLACK = 1e-12


class Category(str, Enum):
    """Treatment category of an audited protected instance."""

    EXTREMELY_DISCRIMINATED = "ExtremelyDiscriminated"
    SLIGHTLY_DISCRIMINATED = "SlightlyDiscriminated"
    FAIRLY_TREATED = "FairlyTreated"
    SLIGHTLY_PRIVILEGED = "SlightlyPrivileged"
    EXTREMELY_PRIVILEGED = "ExtremelyPrivileged"
    UNKNOWN = "Unknown"

    @property
    def abbreviation(self) -> str:
        return _ABBREVIATIONS[self]

    @property
    def side(self) -> str:
        """Three-way label: discriminated, fair or privileged (or unknown)."""
        return _SIDES[self]

    @property
    def is_unfair(self) -> bool:
        return self.side in ("discriminated", "privileged")


_ABBREVIATIONS = {
    Category.EXTREMELY_DISCRIMINATED: "ED",
    Category.SLIGHTLY_DISCRIMINATED: "SD",
    Category.FAIRLY_TREATED: "FT",
    Category.SLIGHTLY_PRIVILEGED: "SP",
    Category.EXTREMELY_PRIVILEGED: "EP",
    Category.UNKNOWN: "UN",
}

_SIDES = {
    Category.EXTREMELY_DISCRIMINATED: "discriminated",
    Category.SLIGHTLY_DISCRIMINATED: "discriminated",
    Category.FAIRLY_TREATED: "fair",
    Category.SLIGHTLY_PRIVILEGED: "privileged",
    Category.EXTREMELY_PRIVILEGED: "privileged",
    Category.UNKNOWN: "unknown",
}


@dataclass(frozen=True)
class AuditResult:
    """
    Verdict for one protected instance.

    Statistics (t_bars, peer_mean, peer_sd, z, p_value, peer_rejection_rate)
    are None for Unknown instances.
    """

    id: str
    p_a: float
    peer_count: int
    category: Category
    observed_y: int
    t_bars: tuple[float, ...] | None = None
    peer_mean: float | None = None
    peer_sd: float | None = None
    z: float | None = None
    p_value: float | None = None
    peer_rejection_rate: float | None = None

    @property
    def auditable(self) -> bool:
        return self.category is not Category.UNKNOWN

    def to_dict(self) -> dict[str, Any]:
        """Report record; t_bars are summarised by peer_mean and peer_sd."""
        return {
            "id": self.id,
            "p_a": self.p_a,
            "peer_mean": self.peer_mean,
            "peer_sd": self.peer_sd,
            "z": _encode_float(self.z),
            "p_value": self.p_value,
            "category": self.category.value,
            "peer_count": self.peer_count,
            "observed_y": self.observed_y,
            "peer_rejection_rate": self.peer_rejection_rate,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> AuditResult:
        return cls(
            id=str(data["id"]),
            p_a=float(data["p_a"]),
            peer_count=int(data["peer_count"]),
            category=Category(data["category"]),
            observed_y=int(data["observed_y"]),
            peer_mean=data.get("peer_mean"),
            peer_sd=data.get("peer_sd"),
            z=_decode_float(data.get("z")),
            p_value=data.get("p_value"),
            peer_rejection_rate=data.get("peer_rejection_rate"),
        )


def _encode_float(value: float | None) -> float | str | None:
    # JSON has no infinities
    if value is None or math.isfinite(value):
        return value
    return "inf" if value > 0 else "-inf"


def _decode_float(value: float | str | None) -> float | None:
    if value is None:
        return None
    return float(value)


def instance_seed(seed: int, instance_id: str) -> int:
    """Stable per-instance seed, independent of execution order."""
    digest = hashlib.sha256(f"{seed}:{instance_id}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def _sample_subsets(m: int, k: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """(n, k) positions: each row a uniform k-subset of range(m)."""
    if k > m:
        raise PeerSamplingError(f"Cannot draw K={k} peers from {m} available")
    if k < 1:
        raise PeerSamplingError(f"K must be at least 1, got {k}")
    if k == m:
        return np.tile(np.arange(m), (n, 1))
    return rng.random((n, m)).argpartition(k - 1, axis=1)[:, :k]


def sample_peer_means(
    peer_probs: Sequence[float] | np.ndarray, K: int, N: int, rng_seed: int
) -> np.ndarray:
    """
    Means of N random K-subsets of the peer probabilities.

    Peers are drawn without replacement inside a subset and independently
    across subsets.

    Raises:
        PeerSamplingError: K exceeds the number of peers
    """
    probs = np.asarray(peer_probs, dtype=float)
    rng = np.random.default_rng(rng_seed)
    subsets = _sample_subsets(len(probs), K, N, rng)
    return probs[subsets].mean(axis=1)


def z_test(
    t_bars: Sequence[float] | np.ndarray,
    p_a: float,
    variant: str = "grand_mean",
    one_sided: bool = False,
) -> tuple[float, float]:
    """
    Compare the mean of the t_bars with p_a.

    ``grand_mean`` scales by the standard error sd/sqrt(N); ``dispersion``
    scales by sd alone. sd is the sample standard deviation. The two-sided
    p-value is reported unless ``one_sided`` is set, in which case the
    one-sided p-value in the observed direction is used.

    Returns:
        (z, p_value)
    """
    t = np.asarray(t_bars, dtype=float)
    if len(t) < 2:
        raise AuditError(f"z_test needs at least 2 subset means, got {len(t)}")
    if variant not in ("grand_mean", "dispersion"):
        raise AuditError(f"Unknown test variant {variant!r}")

    diff = float(t.mean()) - p_a
    sd = float(t.std(ddof=1))
    if sd < _DEGENERATE_SD:
        if abs(diff) < _DEGENERATE_SD:
            return 0.0, 1.0
        return math.copysign(math.inf, diff), 0.0

    z = diff / sd
    if variant == "grand_mean":
        z *= math.sqrt(len(t))
    tail = float(norm.sf(abs(z)))
    return z, (tail if one_sided else min(1.0, 2.0 * tail))


def categorize(
    p_a: float,
    peer_mean: float,
    p_value: float,
    alpha: float,
    extreme_factor: float,
) -> Category:
    """
    Treatment category for an auditable instance.

    Instances whose own probability sits below the peers' mean are on the
    discriminated side. The label is "Extremely" when the gap exceeds
    ``extreme_factor * p_a``.
    """
    if p_value >= alpha:
        return Category.FAIRLY_TREATED
    gap = peer_mean - p_a
    if gap == 0:
        return Category.FAIRLY_TREATED
    extreme = abs(gap) > extreme_factor * p_a
    if gap > 0:
        return (
            Category.EXTREMELY_DISCRIMINATED
            if extreme
            else Category.SLIGHTLY_DISCRIMINATED
        )
    return Category.EXTREMELY_PRIVILEGED if extreme else Category.SLIGHTLY_PRIVILEGED


def _audit_one(
    k: int,
    probs: np.ndarray,
    dataset: Dataset,
    peer_set: PeerSet,
    config: AuditConfig,
) -> AuditResult:
    position = int(peer_set.protected_positions[k])
    instance_id = str(dataset.ids[position])
    peers = peer_set.peers[k]
    p_a = float(probs[position])
    observed_y = int(dataset.y[position])

    if len(peers) < peer_set.min_peers:
        return AuditResult(
            id=instance_id,
            p_a=p_a,
            peer_count=len(peers),
            category=Category.UNKNOWN,
            observed_y=observed_y,
        )

    rng = np.random.default_rng(instance_seed(config.seed, instance_id))
    subsets = _sample_subsets(len(peers), config.subset_size, config.n_subsets, rng)

    xi = peer_set.ic.xi
    subset_xi = xi[peers][subsets].mean(axis=1)
    worst = float(np.max(np.abs(subset_xi - xi[position])))
    if worst > peer_set.delta + _BOUND_SLACK:
        raise ProposalBoundViolation(
            f"Instance {instance_id!r}: a peer subset's mean coefficient lies "
            f"{worst} from the instance, beyond delta={peer_set.delta}"
        )

    t_bars = probs[peers][subsets].mean(axis=1)
    z, p_value = z_test(t_bars, p_a, config.test_statistic, config.one_sided)
    peer_mean = float(t_bars.mean())
    return AuditResult(
        id=instance_id,
        p_a=p_a,
        peer_count=len(peers),
        category=categorize(
            p_a, peer_mean, p_value, config.alpha, config.extreme_factor
        ),
        observed_y=observed_y,
        t_bars=tuple(float(t) for t in t_bars),
        peer_mean=peer_mean,
        peer_sd=float(t_bars.std(ddof=1)),
        z=z,
        p_value=p_value,
        peer_rejection_rate=float(np.mean(dataset.y[peers] == 0)),
    )


def audit_all(
    dataset: Dataset,
    f_model: ProbabilityModel,
    peer_set: PeerSet,
    config: AuditConfig,
) -> list[AuditResult]:
    """
    Audit every protected instance of ``dataset``.

    Each instance and each peer is scored by ``f_model`` at its own (x, s).
    Sampling is seeded per instance from (config.seed, id), so the output does
    not depend on ``config.threads``.

    Returns:
        One AuditResult per protected instance, in dataset order

    Raises:
        AuditError: The peer set was built on different instances
        ProposalBoundViolation: A sampled subset broke the delta bound
    """
    if len(peer_set.ic) != len(dataset) or not np.array_equal(
        peer_set.ic.ids, dataset.ids
    ):
        raise AuditError("Peer set and dataset describe different instances")
    if not f_model.includes_protected:
        raise AuditError(
            "The outcome model must condition on the protected attribute; "
            "fit it with target='outcome'"
        )

    probs = f_model.predict_dataset(dataset)
    results: list[AuditResult] = Parallel(n_jobs=config.threads, backend="threading")(
        delayed(_audit_one)(k, probs, dataset, peer_set, config)
        for k in range(len(peer_set))
    )
    return results


def category_counts(results: Sequence[AuditResult]) -> dict[Category, int]:
    """Member count of every category, in category order (zeros included)."""
    counts = {category: 0 for category in Category}
    for r in results:
        counts[r.category] += 1
    return counts


def category_rejection_stats(
    results: Sequence[AuditResult],
    dataset: Dataset | None = None,
    peer_set: PeerSet | None = None,
) -> pd.DataFrame:
    """
    Rejection rates per treatment category.

    For each non-Unknown category: the share of members with observed y = 0,
    and the mean and sd over members of each member's peer rejection rate.
    Categories without members are omitted and listed in
    ``frame.attrs["omitted"]``.

    When ``dataset`` and ``peer_set`` are given, peer rejection rates are
    recomputed from them; otherwise the rates stored on the results are used.
    """
    rates = {r.id: r.peer_rejection_rate for r in results}
    if dataset is not None and peer_set is not None:
        for k in range(len(peer_set)):
            peers = peer_set.peers[k]
            if len(peers):
                rates[peer_set.protected_id(k)] = float(np.mean(dataset.y[peers] == 0))

    rows = []
    omitted = []
    for category in Category:
        if category is Category.UNKNOWN:
            continue
        members = [r for r in results if r.category is category]
        if not members:
            omitted.append(category.value)
            continue
        peer_rates = np.array([rates[r.id] for r in members], dtype=float)
        rows.append(
            {
                "category": category.value,
                "abbreviation": category.abbreviation,
                "members": len(members),
                "rejection_rate": float(np.mean([r.observed_y == 0 for r in members])),
                "peer_rejection_mean": float(peer_rates.mean()),
                "peer_rejection_sd": (
                    float(peer_rates.std(ddof=1)) if len(peer_rates) > 1 else 0.0
                ),
            }
        )
    frame = pd.DataFrame(
        rows,
        columns=[
            "category",
            "abbreviation",
            "members",
            "rejection_rate",
            "peer_rejection_mean",
            "peer_rejection_sd",
        ],
    )
    frame.attrs["omitted"] = omitted
    return frame


def results_frame(results: Sequence[AuditResult]) -> pd.DataFrame:
    """Likelihood comparison table: one row per auditable instance."""
    return pd.DataFrame(
        [
            {
                "id": r.id,
                "p_a": r.p_a,
                "peer_mean": r.peer_mean,
                "peer_sd": r.peer_sd,
                "z": r.z,
                "p_value": r.p_value,
                "category": r.category.value,
                "abbreviation": r.category.abbreviation,
                "peer_count": r.peer_count,
                "observed_y": r.observed_y,
            }
            for r in results
            if r.auditable
        ],
        columns=[
            "id",
            "p_a",
            "peer_mean",
            "peer_sd",
            "z",
            "p_value",
            "category",
            "abbreviation",
            "peer_count",
            "observed_y",
        ],
    )

"""Peer identification on identification coefficients.

An unprotected instance j is a delta-peer of a protected instance a when
|xi_a - xi_j| < delta. Protected instances with fewer than ``min_peers`` peers
are not auditable and end up labelled Unknown.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import pandas as pd

from peer_fairness.errors import DeltaError
from peer_fairness.ic import ICTable

# Relative padding of the binary-search bounds; membership is decided exactly
_WINDOW_SLACK = 1e-9


class PeerStatus(str, Enum):
    AUDITABLE = "auditable"
    UNKNOWN = "unknown"


@dataclass(frozen=True, eq=False)
class PeerSet:
    """
    Peers of every protected instance.

    ``protected_positions[k]`` is the row position of the k-th protected
    instance in the IC table; ``peers[k]`` holds the row positions of its
    unprotected peers in ascending order.
    """

    delta: float
    min_peers: int
    ic: ICTable
    protected_positions: np.ndarray
    peers: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.protected_positions)

    @property
    def peer_counts(self) -> np.ndarray:
        return np.array([len(p) for p in self.peers], dtype=int)

    @property
    def auditable(self) -> np.ndarray:
        return self.peer_counts >= self.min_peers

    def status(self, k: int) -> PeerStatus:
        if len(self.peers[k]) >= self.min_peers:
            return PeerStatus.AUDITABLE
        return PeerStatus.UNKNOWN

    def protected_id(self, k: int) -> str:
        return str(self.ic.ids[self.protected_positions[k]])

    def peer_ids(self, k: int) -> list[str]:
        return [str(i) for i in self.ic.ids[self.peers[k]]]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "protected_id": self.ic.ids[self.protected_positions],
                "peer_count": self.peer_counts,
                "status": [self.status(k).value for k in range(len(self))],
            }
        )

    def edges_frame(self) -> pd.DataFrame:
        """One row per (protected instance, peer) pair."""
        rows_a = np.repeat(self.protected_positions, self.peer_counts)
        rows_j = (
            np.concatenate(self.peers) if self.peers else np.empty(0, dtype=np.intp)
        )
        return pd.DataFrame(
            {
                "protected_id": self.ic.ids[rows_a],
                "peer_id": self.ic.ids[rows_j],
                "xi_gap": np.abs(self.ic.xi[rows_a] - self.ic.xi[rows_j]),
            }
        )

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)


def resolve_delta(ic: ICTable, multiplier: float) -> float:
    """
    delta = multiplier * sigma_minus.

    Raises:
        DeltaError: The multiplier is not positive, or the protected group's
            coefficients have zero spread
    """
    if not multiplier > 0 or not math.isfinite(multiplier):
        raise DeltaError(
            f"delta multiplier must be a positive number, got {multiplier}"
        )
    if not ic.sigma_minus > 0:
        raise DeltaError(
            "Identification coefficients of the protected group have zero spread, "
            "so a relative delta is undefined; set an absolute delta override "
            "(--delta or 'delta' in the [audit] config table)"
        )
    return multiplier * ic.sigma_minus


def identify_peers(ic: ICTable, delta: float, min_peers: int) -> PeerSet:
    """
    Find the delta-peers of every protected instance.

    Unprotected coefficients are sorted once; each protected instance's window
    (xi_a - delta, xi_a + delta) is located by binary search on bounds padded
    by a few rounding errors, then filtered with the strict inequality so the
    result matches an exhaustive pairwise scan exactly.

    Args:
        ic: Identification coefficients for both groups
        delta: Positive threshold (may be infinite)
        min_peers: Minimum peer count for an instance to be auditable

    Returns:
        PeerSet over all protected instances
    """
    if not delta > 0:
        raise DeltaError(f"delta must be positive, got {delta}")
    if min_peers < 1:
        raise DeltaError(f"min_peers must be at least 1, got {min_peers}")

    protected = ic.protected_positions
    unprotected = ic.unprotected_positions
    order = np.argsort(ic.xi[unprotected], kind="stable")
    sorted_pos = unprotected[order]
    sorted_xi = ic.xi[sorted_pos]

    centres = ic.xi[protected]
    slack = _WINDOW_SLACK * (np.abs(centres) + delta + 1.0)
    lo = np.searchsorted(sorted_xi, centres - delta - slack, side="left")
    hi = np.searchsorted(sorted_xi, centres + delta + slack, side="right")

    peers: list[np.ndarray] = []
    for centre, start, stop in zip(centres, lo, hi):
        window = sorted_pos[start:stop]
        inside = np.abs(ic.xi[window] - centre) < delta
        peers.append(np.sort(window[inside]))

    return PeerSet(
        delta=float(delta),
        min_peers=int(min_peers),
        ic=ic,
        protected_positions=protected,
        peers=tuple(peers),
    )

"""Identification coefficients.

For an instance with features x the identification coefficient is

    xi(s_minus, x) = P(S = s_minus | x) / P(S = s_minus)
    xi(s_plus,  x) = P(S = s_plus  | x) / P(S = s_plus)

so that P(s_minus) * xi(s_minus, x) + P(s_plus) * xi(s_plus, x) = 1 for
every x. Instances of opposite groups with close coefficients are peers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from peer_fairness.data import Dataset, Group
from peer_fairness.errors import ICError, PropensityClampWarning
from peer_fairness.model import ProbabilityModel

PROPENSITY_CLAMP = 1e-6


@dataclass(frozen=True, eq=False)
class ICTable:
    """Per-instance propensities and identification coefficients."""

    marginal: float
    ids: np.ndarray
    protected: np.ndarray
    propensity: np.ndarray
    xi: np.ndarray
    sigma_minus: float
    clamped: int = 0

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def protected_positions(self) -> np.ndarray:
        return np.flatnonzero(self.protected)

    @property
    def unprotected_positions(self) -> np.ndarray:
        return np.flatnonzero(~self.protected)

    def identity_residual(self) -> np.ndarray:
        """|P(s-) xi(s-, x) + P(s+) xi(s+, x) - 1| per row."""
        p = self.propensity
        total = self.marginal * (p / self.marginal) + (1.0 - self.marginal) * (
            (1.0 - p) / (1.0 - self.marginal)
        )
        return np.abs(total - 1.0)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "id": self.ids,
                "group": np.where(self.protected, Group.MINUS.value, Group.PLUS.value),
                "propensity": self.propensity,
                "xi": self.xi,
            }
        )

    def to_csv(self, path: str | Path) -> None:
        self.to_frame().to_csv(path, index=False)


def compute_marginal(dataset: Dataset) -> float:
    """Share of protected instances in the dataset."""
    marginal = dataset.n_protected / len(dataset)
    if not 0.0 < marginal < 1.0:
        raise ICError(f"Both groups must be present; protected share is {marginal}")
    return marginal


def compute_ic(
    dataset: Dataset, propensity_model: ProbabilityModel, marginal: float
) -> ICTable:
    """
    Compute xi for every instance of ``dataset``.

    Args:
        dataset: Instances to score
        propensity_model: Fitted model of P(S = s_minus | X); must not use S
        marginal: P(S = s_minus), in (0, 1)

    Returns:
        ICTable with sigma_minus = population sd of xi over protected rows

    Raises:
        ICError: The marginal is outside (0, 1) or the model conditions on S
    """
    if not 0.0 < marginal < 1.0:
        raise ICError(f"marginal must lie in (0, 1), got {marginal}")
    if propensity_model.includes_protected:
        raise ICError(
            "The propensity model conditions on the protected attribute; "
            "fit it with target='protected'"
        )

    raw = propensity_model.predict_dataset(dataset)
    saturated = (raw <= PROPENSITY_CLAMP) | (raw >= 1.0 - PROPENSITY_CLAMP)
    clamped = int(saturated.sum())
    if clamped:
        warnings.warn(
            f"{clamped} propensities reached the clamp bounds "
            f"[{PROPENSITY_CLAMP}, {1 - PROPENSITY_CLAMP}]",
            PropensityClampWarning,
            stacklevel=2,
        )
    propensity = np.clip(raw, PROPENSITY_CLAMP, 1.0 - PROPENSITY_CLAMP)

    xi = np.where(
        dataset.protected,
        propensity / marginal,
        (1.0 - propensity) / (1.0 - marginal),
    )
    sigma_minus = float(np.std(xi[dataset.protected]))
    return ICTable(
        marginal=float(marginal),
        ids=dataset.ids,
        protected=dataset.protected,
        propensity=propensity,
        xi=xi,
        sigma_minus=sigma_minus,
        clamped=clamped,
    )

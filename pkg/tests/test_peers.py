"""Tests for delta resolution and peer identification."""

import math

import numpy as np
import pytest

from peer_fairness.errors import DeltaError
from peer_fairness.ic import ICTable
from peer_fairness.peers import PeerStatus, identify_peers, resolve_delta


def _table(xi_minus, xi_plus):
    xi = np.concatenate([xi_minus, xi_plus]).astype(float)
    protected = np.array([True] * len(xi_minus) + [False] * len(xi_plus))
    names = [f"m{i}" for i in range(len(xi_minus))]
    names += [f"p{i}" for i in range(len(xi_plus))]
    ids = np.array(names, dtype=object)
    return ICTable(
        marginal=0.5,
        ids=ids,
        protected=protected,
        propensity=np.full(len(xi), 0.5),
        xi=xi,
        sigma_minus=float(np.std(xi_minus)),
    )


class TestResolveDelta:
    """Test the relative delta rule."""

    def test_multiplier_times_sigma(self):
        """delta = multiplier x sd of protected coefficients."""
        ic = _table([1.0, 2.0, 3.0], [1.0])

        assert resolve_delta(ic, 0.3) == pytest.approx(0.3 * np.std([1.0, 2.0, 3.0]))

    def test_zero_spread(self):
        """Constant protected coefficients need an absolute override."""
        ic = _table([1.2, 1.2], [0.8])

        with pytest.raises(DeltaError, match="--delta"):
            resolve_delta(ic, 0.3)

    @pytest.mark.parametrize("multiplier", [0.0, -1.0, math.nan])
    def test_bad_multiplier(self, multiplier):
        """Non-positive multipliers are rejected."""
        with pytest.raises(DeltaError):
            resolve_delta(_table([1.0, 2.0], [1.0]), multiplier)


class TestIdentifyPeers:
    """Test the peer search."""

    def test_strict_inequality(self):
        """A gap of exactly delta is not a peer."""
        ic = _table([1.0], [0.5, 0.75, 1.25, 1.5])

        peer_set = identify_peers(ic, 0.5, 1)

        assert peer_set.peer_ids(0) == ["p1", "p2"]

    def test_matches_brute_force(self):
        """Binary-search windows agree with an exhaustive scan."""
        rng = np.random.default_rng(3)
        xi_minus = rng.gamma(2.0, 0.5, size=300)
        # rounding creates ties and gaps of exactly delta
        xi_plus = np.round(rng.gamma(2.0, 0.5, size=700), 2)
        ic = _table(np.round(xi_minus, 2), xi_plus)

        for delta in (0.01, 0.05, 0.3):
            peer_set = identify_peers(ic, delta, 5)
            for k, a in enumerate(ic.protected_positions):
                expected = [
                    int(j)
                    for j in ic.unprotected_positions
                    if abs(ic.xi[a] - ic.xi[j]) < delta
                ]
                assert peer_set.peers[k].tolist() == expected

    def test_peers_grow_with_delta(self):
        """A wider threshold keeps every peer of a narrower one."""
        rng = np.random.default_rng(8)
        ic = _table(rng.gamma(2.0, 0.5, size=200), rng.gamma(2.0, 0.5, size=500))

        previous = None
        for delta in (0.005, 0.02, 0.1, 0.4, 2.0):
            peer_set = identify_peers(ic, delta, 1)
            if previous is not None:
                for k in range(len(peer_set)):
                    assert set(previous.peers[k]) <= set(peer_set.peers[k])
                assert (previous.peer_counts <= peer_set.peer_counts).all()
            previous = peer_set

    def test_equal_coefficients_share_peers(self):
        """Protected instances with the same coefficient get the same peers."""
        xi_plus = np.random.default_rng(9).gamma(2.0, 0.5, size=400)
        ic = _table([0.7, 1.3, 0.7, 2.1, 1.3], xi_plus)

        peer_set = identify_peers(ic, 0.1, 1)

        assert peer_set.peers[0].tolist() == peer_set.peers[2].tolist()
        assert peer_set.peers[1].tolist() == peer_set.peers[4].tolist()
        assert peer_set.peers[0].tolist() != peer_set.peers[1].tolist()

    def test_infinite_delta(self):
        """An infinite delta makes every unprotected instance a peer."""
        ic = _table([0.1, 5.0], [1.0, 2.0, 3.0])

        peer_set = identify_peers(ic, math.inf, 3)

        assert peer_set.peer_counts.tolist() == [3, 3]
        assert peer_set.auditable.all()

    def test_status_follows_min_peers(self):
        """Instances below the peer floor are unknown."""
        ic = _table([1.0, 3.0], [0.9, 1.05, 1.1, 2.95])

        peer_set = identify_peers(ic, 0.2, 2)

        assert peer_set.status(0) is PeerStatus.AUDITABLE
        assert peer_set.status(1) is PeerStatus.UNKNOWN
        assert peer_set.auditable.tolist() == [True, False]

    def test_frames(self, tmp_path):
        """Summary and edge tables describe the same peers."""
        ic = _table([1.0, 3.0], [0.9, 1.05, 1.1, 2.95])
        peer_set = identify_peers(ic, 0.2, 2)

        summary = peer_set.to_frame()
        edges = peer_set.edges_frame()
        peer_set.to_csv(tmp_path / "peers.csv")

        assert summary["peer_count"].tolist() == [3, 1]
        assert summary["status"].tolist() == ["auditable", "unknown"]
        assert len(edges) == 4
        assert edges.loc[edges["protected_id"] == "m1", "peer_id"].tolist() == ["p3"]
        assert (edges["xi_gap"] < 0.2).all()
        assert (tmp_path / "peers.csv").read_text().startswith("protected_id,")

    @pytest.mark.parametrize("delta, min_peers", [(0.0, 1), (-1.0, 1), (0.1, 0)])
    def test_invalid_arguments(self, delta, min_peers):
        """delta must be positive and min_peers at least 1."""
        with pytest.raises(DeltaError):
            identify_peers(_table([1.0], [1.0]), delta, min_peers)

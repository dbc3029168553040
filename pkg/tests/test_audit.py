"""Tests for the per-instance peer audit."""

import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import norm

from peer_fairness.audit import (
    AuditResult,
    Category,
    audit_all,
    categorize,
    category_counts,
    category_rejection_stats,
    instance_seed,
    results_frame,
    sample_peer_means,
    z_test,
)
from peer_fairness.config import TEST_STATISTICS, AuditConfig
from peer_fairness.data import FeatureEncoder
from peer_fairness.errors import (
    AuditError,
    PeerSamplingError,
    ProposalBoundViolation,
)
from peer_fairness.ic import compute_ic, compute_marginal
from peer_fairness.peers import identify_peers, resolve_delta
from peer_fairness.synth import generate, oracle_models


def _oracle_audit(spec, config):
    dataset, truth = generate(spec)
    f, g = oracle_models(spec, truth, FeatureEncoder.fit(dataset))
    ic = compute_ic(dataset, g, compute_marginal(dataset))
    delta = config.delta or resolve_delta(ic, config.delta_multiplier)
    peer_set = identify_peers(ic, delta, config.min_peers)
    return dataset, truth, peer_set, audit_all(dataset, f, peer_set, config)


class TestCategory:
    """Test category labels."""

    def test_abbreviations(self):
        """Every category has a two-letter abbreviation."""
        abbreviations = [c.abbreviation for c in Category]
        assert abbreviations == ["ED", "SD", "FT", "SP", "EP", "UN"]

    def test_sides(self):
        """Unfair categories are the discriminated and privileged ones."""
        assert Category.SLIGHTLY_DISCRIMINATED.side == "discriminated"
        assert Category.EXTREMELY_PRIVILEGED.side == "privileged"
        assert not Category.FAIRLY_TREATED.is_unfair
        assert not Category.UNKNOWN.is_unfair
        assert Category.EXTREMELY_DISCRIMINATED.is_unfair


class TestSamplePeerMeans:
    """Test subset sampling."""

    def test_shape_and_range(self):
        """N means, each within the range of the peer probabilities."""
        probs = np.linspace(0.1, 0.9, 40)

        t_bars = sample_peer_means(probs, K=30, N=100, rng_seed=1)

        assert t_bars.shape == (100,)
        assert t_bars.min() >= 0.1
        assert t_bars.max() <= 0.9

    def test_without_replacement(self):
        """K = M uses every peer once, so all means are equal."""
        probs = np.array([0.2, 0.4, 0.9])

        t_bars = sample_peer_means(probs, K=3, N=5, rng_seed=0)

        np.testing.assert_allclose(t_bars, probs.mean())

    def test_seeded(self):
        """The same seed reproduces the same means."""
        probs = np.random.default_rng(0).random(50)

        first = sample_peer_means(probs, 10, 20, rng_seed=7)
        second = sample_peer_means(probs, 10, 20, rng_seed=7)

        np.testing.assert_array_equal(first, second)

    def test_k_exceeds_peers(self):
        """K larger than the peer count is an error."""
        with pytest.raises(PeerSamplingError):
            sample_peer_means([0.5, 0.6], K=3, N=10, rng_seed=0)

    def test_instance_seed_stable(self):
        """Per-instance seeds depend only on (seed, id)."""
        assert instance_seed(0, "a") == instance_seed(0, "a")
        assert instance_seed(0, "a") != instance_seed(0, "b")
        assert instance_seed(0, "a") != instance_seed(1, "a")


class TestZTest:
    """Test the two z-test variants."""

    def test_grand_mean_scales_by_sqrt_n(self):
        """grand_mean z is sqrt(N) times the dispersion z."""
        t_bars = np.array([0.50, 0.52, 0.48, 0.51, 0.49])

        z_grand, _ = z_test(t_bars, 0.45, "grand_mean")
        z_disp, _ = z_test(t_bars, 0.45, "dispersion")

        assert z_grand == pytest.approx(z_disp * math.sqrt(5))
        assert z_disp == pytest.approx(0.05 / np.std(t_bars, ddof=1))

    def test_closed_form(self):
        """Mean 0.9, sd 0.05 over 100 subsets against p_a = 0.8."""
        u = np.tile([1.0, -1.0], 50)
        u = (u - u.mean()) / u.std(ddof=1)
        t_bars = 0.9 + 0.05 * u

        z_grand, p_grand = z_test(t_bars, 0.8, "grand_mean")
        z_disp, p_disp = z_test(t_bars, 0.8, "dispersion")

        assert z_grand == pytest.approx(20.0, abs=1e-12)
        assert z_disp == pytest.approx(2.0, abs=1e-12)
        assert z_grand == z_disp * math.sqrt(100)
        assert p_disp == pytest.approx(2 * norm.sf(2.0), abs=1e-12)
        assert p_disp == pytest.approx(0.0455, abs=1e-4)
        assert p_grand == pytest.approx(2 * norm.sf(20.0), abs=1e-12)

    @pytest.mark.parametrize("n", [2, 30, 100, 1000])
    def test_variants_differ_by_sqrt_n(self, n):
        """z_grand equals z_disp times sqrt(N) for any subset count."""
        t_bars = np.random.default_rng(n).normal(0.6, 0.03, size=n)

        z_grand, _ = z_test(t_bars, 0.55, "grand_mean")
        z_disp, _ = z_test(t_bars, 0.55, "dispersion")

        assert z_grand == z_disp * math.sqrt(n)

    def test_two_sided_p_value(self):
        """Two-sided p doubles the tail; one-sided keeps it."""
        t_bars = np.array([0.50, 0.52, 0.48, 0.51, 0.49])

        _, two = z_test(t_bars, 0.49, "dispersion")
        _, one = z_test(t_bars, 0.49, "dispersion", one_sided=True)

        assert two == pytest.approx(2 * one)

    def test_degenerate_equal(self):
        """Constant subset means equal to p_a give z = 0, p = 1."""
        assert z_test([0.3, 0.3, 0.3], 0.3) == (0.0, 1.0)

    def test_degenerate_gap(self):
        """Constant subset means away from p_a give an infinite z."""
        z, p = z_test([0.3, 0.3, 0.3], 0.1)

        assert z == math.inf
        assert p == 0.0

    def test_needs_two_means(self):
        """A single subset mean has no spread."""
        with pytest.raises(AuditError):
            z_test([0.3], 0.1)


class TestCategorize:
    """Test the category rule."""

    @pytest.mark.parametrize(
        "p_a, peer_mean, p_value, expected",
        [
            (0.5, 0.8, 0.01, Category.EXTREMELY_DISCRIMINATED),
            (0.5, 0.52, 0.01, Category.SLIGHTLY_DISCRIMINATED),
            (0.5, 0.8, 0.20, Category.FAIRLY_TREATED),
            (0.5, 0.48, 0.01, Category.SLIGHTLY_PRIVILEGED),
            (0.5, 0.2, 0.01, Category.EXTREMELY_PRIVILEGED),
            (0.5, 0.5, 0.0, Category.FAIRLY_TREATED),
        ],
    )
    def test_rule(self, p_a, peer_mean, p_value, expected):
        """Significance, direction and size of the gap pick the category."""
        assert categorize(p_a, peer_mean, p_value, 0.05, 0.1) is expected

    def test_extreme_threshold_is_strict(self):
        """A gap of exactly factor x p_a is only slight."""
        assert (
            categorize(0.5, 0.5625, 0.0, 0.05, 0.125)
            is Category.SLIGHTLY_DISCRIMINATED
        )


class TestAuditAll:
    """Test the full audit on synthetic data with the generating models."""

    def test_one_result_per_protected_instance(self, make_spec):
        """Results follow the protected instances in dataset order."""
        dataset, _, peer_set, results = _oracle_audit(make_spec(), AuditConfig())

        assert [r.id for r in results] == list(dataset.ids[dataset.protected])
        for k, r in enumerate(results):
            assert r.peer_count == len(peer_set.peers[k])
            assert r.auditable == bool(peer_set.auditable[k])

    def test_unknown_below_peer_floor(self, make_spec):
        """Instances without enough peers carry no statistics."""
        config = AuditConfig(delta=0.002, min_peers=35)
        _, _, _, results = _oracle_audit(make_spec(), config)

        unknown = [r for r in results if r.category is Category.UNKNOWN]
        assert unknown
        assert all(r.z is None and r.t_bars is None for r in unknown)
        assert all(r.peer_count < 35 for r in unknown)

    def test_independent_of_threads(self, make_spec):
        """Per-instance seeding makes the result identical across threads."""
        _, _, _, serial = _oracle_audit(make_spec(n=800), AuditConfig(threads=1))
        _, _, _, threaded = _oracle_audit(make_spec(n=800), AuditConfig(threads=3))

        assert serial == threaded

    def test_constant_outcome_is_fair(self, make_spec):
        """With no direct bias and an outcome independent of x, no one is flagged."""
        spec = make_spec(n=800, outcome_weights=(0.0, 0.0, 0.0))
        _, _, _, results = _oracle_audit(spec, AuditConfig())

        auditable = [r for r in results if r.auditable]
        assert auditable
        assert all(r.category is Category.FAIRLY_TREATED for r in auditable)

    def test_grand_mean_flags_at_least_dispersion(self, make_spec):
        """The standard-error scaling never flags fewer instances."""
        spec = make_spec(n=1200, direct_bias=-0.3)
        _, _, _, grand = _oracle_audit(spec, AuditConfig(test_statistic="grand_mean"))
        _, _, _, disp = _oracle_audit(spec, AuditConfig(test_statistic="dispersion"))

        flagged_grand = {r.id for r in grand if r.category.is_unfair}
        flagged_disp = {r.id for r in disp if r.category.is_unfair}
        assert flagged_disp <= flagged_grand

    @pytest.mark.slow
    @pytest.mark.parametrize("test_statistic", TEST_STATISTICS)
    def test_discrimination_grows_with_direct_bias(self, make_spec, test_statistic):
        """A stronger negative direct bias moves more instances to the
        discriminated side, and most of them at b = -1.5."""
        for seed in range(10):
            config = AuditConfig(seed=seed, test_statistic=test_statistic)
            fractions = []
            for bias in (0.0, -0.5, -1.0, -1.5):
                spec = make_spec(n=3000, seed=seed, direct_bias=bias)
                _, _, _, results = _oracle_audit(spec, config)
                auditable = [r for r in results if r.auditable]
                discriminated = sum(
                    r.category.side == "discriminated" for r in auditable
                )
                fractions.append(discriminated / len(auditable))

            assert all(a < b for a, b in zip(fractions, fractions[1:])), (
                seed,
                fractions,
            )
            assert fractions[-1] > 0.5, (seed, fractions)

    def test_rejects_propensity_model_as_f(self, synthetic):
        """The outcome model must condition on S."""
        spec, dataset, truth = synthetic
        _, g = oracle_models(spec, truth, FeatureEncoder.fit(dataset))
        ic = compute_ic(dataset, g, compute_marginal(dataset))
        peer_set = identify_peers(ic, 0.1, 35)

        with pytest.raises(AuditError, match="condition on the protected"):
            audit_all(dataset, g, peer_set, AuditConfig())

    def test_rejects_foreign_peer_set(self, make_spec):
        """Peer sets built on another dataset are rejected."""
        dataset, _, _, _ = _oracle_audit(make_spec(n=500), AuditConfig())
        _, truth_b, peer_set_b, _ = _oracle_audit(make_spec(n=600), AuditConfig())
        f, _ = oracle_models(make_spec(n=500), truth_b, FeatureEncoder.fit(dataset))

        with pytest.raises(AuditError, match="different instances"):
            audit_all(dataset, f, peer_set_b, AuditConfig())

    def test_subset_bound_checked(self, make_spec):
        """A peer set whose delta no longer covers its peers is refused."""
        spec = make_spec(n=800)
        dataset, truth = generate(spec)
        f, g = oracle_models(spec, truth, FeatureEncoder.fit(dataset))
        ic = compute_ic(dataset, g, compute_marginal(dataset))
        peer_set = identify_peers(ic, resolve_delta(ic, 0.3), 35)
        tampered = replace(peer_set, delta=peer_set.delta * 1e-4)

        with pytest.raises(ProposalBoundViolation, match="beyond delta"):
            audit_all(dataset, f, tampered, AuditConfig())


class TestSummaries:
    """Test counts and tables built from results."""

    def _results(self):
        return [
            AuditResult("a", 0.3, 40, Category.EXTREMELY_DISCRIMINATED, 0,
                        peer_mean=0.6, peer_rejection_rate=0.2),
            AuditResult("b", 0.3, 40, Category.EXTREMELY_DISCRIMINATED, 1,
                        peer_mean=0.6, peer_rejection_rate=0.4),
            AuditResult("c", 0.5, 40, Category.FAIRLY_TREATED, 0,
                        peer_mean=0.5, peer_rejection_rate=0.5),
            AuditResult("d", 0.5, 3, Category.UNKNOWN, 0),
        ]

    def test_counts_include_empty_categories(self):
        """Every category appears, zeros included."""
        counts = category_counts(self._results())

        assert list(counts) == list(Category)
        assert counts[Category.EXTREMELY_DISCRIMINATED] == 2
        assert counts[Category.SLIGHTLY_PRIVILEGED] == 0
        assert counts[Category.UNKNOWN] == 1

    def test_rejection_stats(self):
        """Observed and peer rejection rates per populated category."""
        frame = category_rejection_stats(self._results())

        assert frame["abbreviation"].tolist() == ["ED", "FT"]
        ed = frame.iloc[0]
        assert ed["members"] == 2
        assert ed["rejection_rate"] == pytest.approx(0.5)
        assert ed["peer_rejection_mean"] == pytest.approx(0.3)
        assert ed["peer_rejection_sd"] == pytest.approx(np.std([0.2, 0.4], ddof=1))
        assert frame.iloc[1]["peer_rejection_sd"] == 0.0
        assert "SlightlyPrivileged" in frame.attrs["omitted"]

    def test_results_frame_skips_unknown(self):
        """The likelihood table lists auditable instances only."""
        frame = results_frame(self._results())

        assert frame["id"].tolist() == ["a", "b", "c"]

    def test_infinite_z_round_trips(self):
        """Infinite z values survive the report encoding."""
        result = AuditResult(
            "a", 0.1, 40, Category.EXTREMELY_DISCRIMINATED, 0, z=math.inf
        )

        data = result.to_dict()

        assert data["z"] == "inf"
        assert AuditResult.from_dict(data).z == math.inf

"""Tests for the logistic outcome and propensity models."""

import warnings

import numpy as np
import pytest
from scipy.special import expit

from peer_fairness.data import FeatureEncoder
from peer_fairness.errors import (
    DegenerateFoldWarning,
    ModelError,
    ModelSelectionError,
    SchemaMismatchError,
    SeparationWarning,
)
from peer_fairness.model import (
    PROTECTED_COLUMN,
    SEPARATION_CLAMP,
    _penalized_gradient,
    auc,
    design_matrix,
    fit_logistic,
    load_model,
    model_hash,
    predict_proba,
    save_model,
    select_model,
)
from peer_fairness.synth import generate, sme_preset


def _simulated(n=5000, seed=0, coefficients=(-0.5, 1.0, -0.7, 0.3)):
    rng = np.random.default_rng(seed)
    design = rng.normal(size=(n, len(coefficients) - 1))
    eta = coefficients[0] + design @ np.asarray(coefficients[1:])
    labels = (rng.random(n) < expit(eta)).astype(int)
    return design, labels


class TestFitLogistic:
    """Test the IRLS fit."""

    def test_recovers_coefficients(self):
        """Unpenalised estimates land within 3 standard errors of the truth."""
        truth = np.array([-0.5, 1.0, -0.7, 0.3])
        design, labels = _simulated(n=10_000, coefficients=tuple(truth))

        model = fit_logistic(design, labels, 0.0)

        assert model.converged
        assert not model.separation
        assert model.standard_errors is not None
        assert np.all(np.abs(model.coefficients - truth) <= 3 * model.standard_errors)

    def test_gradient_vanishes_at_optimum(self):
        """The penalised score is zero at the fitted coefficients."""
        design, labels = _simulated(n=1000)

        model = fit_logistic(design, labels, 1.0)

        gradient = _penalized_gradient(model, design, labels)
        np.testing.assert_allclose(gradient, 0.0, atol=1e-6)

    def test_penalty_shrinks_weights(self):
        """Stronger penalties give smaller weights; the intercept is free."""
        design, labels = _simulated(n=1000)

        weak = fit_logistic(design, labels, 0.01)
        strong = fit_logistic(design, labels, 1000.0)

        assert np.linalg.norm(strong.weights) < np.linalg.norm(weak.weights)
        assert expit(strong.intercept) == pytest.approx(labels.mean(), abs=0.05)

    def test_separation_flagged_and_clamped(self):
        """Perfectly separable data warns and clamps predictions."""
        design = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]])
        labels = np.array([0, 0, 0, 1, 1, 1])

        with pytest.warns(SeparationWarning, match="clamped"):
            model = fit_logistic(design, labels, 0.0)

        assert model.separation
        assert not model.converged
        probs = model.predict_design(design)
        assert probs.min() >= SEPARATION_CLAMP
        assert probs.max() <= 1.0 - SEPARATION_CLAMP

    def test_penalty_prevents_separation(self):
        """A positive penalty keeps separable data finite and converged."""
        design = np.array([[-2.0], [-1.0], [-0.5], [0.5], [1.0], [2.0]])
        labels = np.array([0, 0, 0, 1, 1, 1])

        with warnings.catch_warnings():
            warnings.simplefilter("error", SeparationWarning)
            model = fit_logistic(design, labels, 1.0)

        assert model.converged
        assert not model.separation

    @pytest.mark.parametrize(
        "design, labels, strength, message",
        [
            (np.ones((3, 1)), np.array([0, 1]), 0.0, "does not match"),
            (np.array([[np.nan], [1.0]]), np.array([0, 1]), 0.0, "non-finite"),
            (np.ones((2, 1)), np.array([1, 1]), 0.0, "both classes"),
            (np.ones((2, 1)), np.array([0, 2]), 0.0, "0 or 1"),
            (np.ones((2, 1)), np.array([0, 1]), -1.0, "nonnegative"),
        ],
    )
    def test_invalid_inputs(self, design, labels, strength, message):
        """Bad shapes, values and strengths raise ModelError."""
        with pytest.raises(ModelError, match=message):
            fit_logistic(design, labels, strength)


class TestAuc:
    """Test the AUC helper."""

    def test_perfect_and_tied(self):
        """Perfect ranking scores 1; constant scores score 0.5."""
        labels = np.array([0, 0, 1, 1])
        assert auc([0.1, 0.2, 0.8, 0.9], labels) == 1.0
        assert auc([0.5, 0.5, 0.5, 0.5], labels) == 0.5

    def test_invariant_under_monotone_transform(self):
        """Only the ranking of the scores matters."""
        rng = np.random.default_rng(3)
        scores = rng.normal(size=400)
        labels = (rng.random(400) < expit(scores)).astype(int)

        base = auc(scores, labels)

        assert 0.5 < base < 1.0
        assert auc(expit(scores), labels) == pytest.approx(base, abs=1e-12)
        assert auc(np.exp(2.0 * scores) + 7.0, labels) == pytest.approx(base, abs=1e-12)

    def test_single_class(self):
        """AUC needs both labels."""
        with pytest.raises(ModelError, match="both labels"):
            auc([0.1, 0.2], [1, 1])


class TestSelectModel:
    """Test grid search by cross-validated AUC."""

    def test_outcome_model_includes_protected(self, synthetic):
        """The outcome model ends with the protected indicator column."""
        _, dataset, _ = synthetic

        model, report = select_model(dataset, "outcome", (0.1, 10.0), 3, seed=0)

        assert model.includes_protected
        assert model.feature_columns[-1] == PROTECTED_COLUMN
        assert report.chosen in (0.1, 10.0)
        assert len(report.cv_auc) == 2
        assert all(0.5 < a <= 1.0 for a in report.cv_auc)

    def test_propensity_model_excludes_protected(self, synthetic):
        """The propensity model sees features only."""
        _, dataset, _ = synthetic

        model, _ = select_model(dataset, "protected", (1.0,), 3, seed=0)

        assert not model.includes_protected
        assert PROTECTED_COLUMN not in model.feature_columns

    def test_ties_go_to_smallest_strength(self, synthetic):
        """Equal cross-validated AUC picks the smallest penalty."""
        _, dataset, _ = synthetic

        _, report = select_model(dataset, "outcome", (5.0, 5.0, 5.0), 3, seed=0)

        assert report.chosen == 5.0
        assert report.cv_auc[0] == report.cv_auc[1] == report.cv_auc[2]

    def test_grid_reported_in_ascending_order(self, synthetic):
        """The report lists strengths smallest first."""
        _, dataset, _ = synthetic

        _, report = select_model(dataset, "outcome", (100.0, 0.01), 3, seed=0)

        assert report.grid == (0.01, 100.0)

    def test_selection_is_deterministic(self, synthetic):
        """Same seed, same folds, same choice, regardless of threads."""
        _, dataset, _ = synthetic

        _, serial = select_model(dataset, "outcome", (0.01, 1.0, 100.0), 3, seed=4)
        _, threaded = select_model(
            dataset, "outcome", (0.01, 1.0, 100.0), 3, seed=4, n_jobs=2
        )

        assert serial == threaded

    def test_test_auc_reported(self, synthetic):
        """A held-out split produces a test AUC."""
        _, dataset, _ = synthetic
        train, test = dataset.subset(range(1500)), dataset.subset(range(1500, 2000))

        _, report = select_model(train, "outcome", (1.0,), 3, seed=0, test=test)

        assert report.test_auc is not None
        assert 0.5 < report.test_auc <= 1.0

    def test_bad_target(self, synthetic):
        """Only outcome and protected are valid targets."""
        _, dataset, _ = synthetic
        with pytest.raises(ModelSelectionError, match="target"):
            select_model(dataset, "income", (1.0,), 3, seed=0)

    def test_degenerate_folds_skipped(self, synthetic):
        """Folds holding one class are skipped with a warning."""
        _, dataset, _ = synthetic
        rare = np.flatnonzero(dataset.y == 0)[:2]
        common = np.flatnonzero(dataset.y == 1)[:200]
        tiny = dataset.subset(np.sort(np.concatenate([rare, common])))

        with pytest.warns(DegenerateFoldWarning):
            _, report = select_model(tiny, "outcome", (1.0,), 3, seed=0)

        assert len(report.skipped_folds) >= 1


class TestPrediction:
    """Test scoring and persistence."""

    def test_predict_proba_matches_dataset(self, synthetic):
        """Single-instance scoring agrees with whole-dataset scoring."""
        _, dataset, _ = synthetic
        model, _ = select_model(dataset, "outcome", (1.0,), 3, seed=0)

        probs = model.predict_dataset(dataset)

        for i in (0, 7, 1999):
            assert predict_proba(model, dataset.instance(i)) == pytest.approx(probs[i])

    def test_schema_mismatch(self, synthetic):
        """Scoring a dataset with another layout raises SchemaMismatchError."""
        _, dataset, _ = synthetic
        model, _ = select_model(dataset, "outcome", (1.0,), 3, seed=0)
        other, _ = generate(sme_preset(n=500))

        with pytest.raises(SchemaMismatchError, match="differs"):
            model.predict_dataset(other)

    def test_design_width_mismatch(self, synthetic):
        """A design with the wrong column count is rejected."""
        _, dataset, _ = synthetic
        model, _ = select_model(dataset, "protected", (1.0,), 3, seed=0)
        encoder = FeatureEncoder.fit(dataset)

        with pytest.raises(SchemaMismatchError, match="expects 3 columns"):
            model.predict_design(design_matrix(dataset, encoder, True))

    def test_save_and_load(self, synthetic, tmp_path):
        """A saved model predicts identically after loading."""
        _, dataset, _ = synthetic
        model, report = select_model(dataset, "outcome", (1.0,), 3, seed=0)
        path = tmp_path / "f.json"

        save_model(model, path, report)
        loaded, loaded_report = load_model(path)

        assert model_hash(loaded) == model_hash(model)
        assert loaded_report == report
        np.testing.assert_allclose(
            loaded.predict_dataset(dataset), model.predict_dataset(dataset)
        )

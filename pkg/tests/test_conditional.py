import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import integrate, stats

from d2c.autodiff import gradcheck
from d2c.conditional import (
    LatentClassifier,
    ManipulationSpec,
    classifier_gradient_norm,
    conditional_sample,
    estimate_c,
    fit_classifier,
    fit_pu_classifier,
    logistic_loss,
    logit_ascent,
    manipulate,
    rejection_sample,
)
from d2c.errors import AcceptanceStarvation, EmptySplit, InvalidParameter, ShapeMismatch, SingleClassInput


def _blobs(rng, n, gap=4.0, k=2):
    y = np.arange(n) % 2
    z = rng.normal(size=(n, k))
    z[:, 0] += np.where(y == 1, gap, -gap)
    return z, y


def _gaussian_draw(m, g):
    return g.standard_normal((m, 1))


class TestClassifier:
    def test_separable_training_accuracy(self, rng):
        z, y = _blobs(rng, 100)
        clf = fit_classifier(z, y)
        assert np.mean((clf.prob(z) > 0.5) == y) == 1.0

    def test_random_labels_are_chance(self, rng):
        z = rng.normal(size=(400, 4))
        y = rng.integers(0, 2, 400)
        clf = fit_classifier(z[:200], y[:200])
        acc = np.mean((clf.prob(z[200:]) > 0.5) == y[200:])
        assert abs(acc - 0.5) <= 0.1

    def test_converged_gradient(self, rng):
        z, y = _blobs(rng, 60, gap=0.7, k=3)
        z = z * np.array([5.0, 0.2, 1.0]) + 3.0
        clf = fit_classifier(z, y, tol=1e-7)
        assert classifier_gradient_norm(clf, z, y) < 1e-6

    def test_probabilities_in_unit_interval(self, rng):
        clf = LatentClassifier(3, weight=rng.normal(size=3) * 50)
        p = clf.prob(rng.normal(size=(100, 3)))
        assert np.all((p >= 0) & (p <= 1))
        assert_allclose(clf.prob(np.zeros((1, 3)), target=0), [0.5])

    def test_loss_gradients(self, rng):
        clf = LatentClassifier(4, weight=rng.normal(size=4), bias=0.3)
        z, y = rng.normal(size=(20, 4)), rng.integers(0, 2, 20)
        assert gradcheck(lambda: logistic_loss(clf, z, y, l2=0.1), clf.parameters(), 100) < 1e-4

    def test_errors(self, rng):
        with pytest.raises(SingleClassInput):
            fit_classifier(rng.normal(size=(5, 2)), np.ones(5))
        with pytest.raises(ShapeMismatch):
            fit_classifier(rng.normal(size=(5, 2)), np.ones(4))
        with pytest.raises(ShapeMismatch):
            LatentClassifier(3).logit(np.zeros((2, 4)))
        with pytest.raises(InvalidParameter):
            LatentClassifier(3, c_pu=0.0)


class TestPositiveUnlabeled:
    def test_reduces_to_supervised_when_unlabeled_are_negative(self, rng):
        pos = rng.normal(size=(100, 2)) + [4.0, 0.0]
        neg = rng.normal(size=(100, 2)) - [4.0, 0.0]
        clf = fit_pu_classifier(pos, neg, rng=rng)
        test_pos = rng.normal(size=(200, 2)) + [4.0, 0.0]
        test_neg = rng.normal(size=(200, 2)) - [4.0, 0.0]
        acc = (np.sum(clf.prob(test_pos) > 0.5) + np.sum(clf.prob(test_neg) <= 0.5)) / 400
        assert acc == 1.0

    def test_calibration_lifts_positive_scores(self, rng):
        # 15% of the unlabeled pool is positive; the raw score on positives is then well below 1
        n_unl = 2000
        y = rng.uniform(size=n_unl) < 0.15
        unl = rng.normal(size=(n_unl, 2)) + np.where(y[:, None], [3.0, 0.0], [-3.0, 0.0])
        pos = rng.normal(size=(100, 2)) + [3.0, 0.0]
        clf = fit_pu_classifier(pos, unl, rng=rng)
        assert clf.c_pu < 0.9
        test_y = rng.uniform(size=1000) < 0.15
        test = rng.normal(size=(1000, 2)) + np.where(test_y[:, None], [3.0, 0.0], [-3.0, 0.0])
        assert np.mean((clf.prob(test) > 0.5) == test_y) >= 0.95

    def test_estimate_c(self):
        assert estimate_c(np.ones(10)) == 1.0
        assert estimate_c([0.2, 0.4]) == pytest.approx(0.3)
        assert estimate_c(np.zeros(3)) == 1e-6
        identity = LatentClassifier(2, weight=[1.0, -1.0], c_pu=estimate_c(np.ones(4)))
        z = np.array([[0.3, 0.1], [-1.0, 2.0]])
        assert_array_equal(identity.prob(z), LatentClassifier(2, weight=[1.0, -1.0]).prob(z))

    def test_pu_outputs_clamped(self):
        clf = LatentClassifier(1, weight=[10.0], c_pu=0.5)
        assert clf.prob(np.array([[5.0]]))[0] == 1.0

    def test_too_few(self, rng):
        with pytest.raises(EmptySplit):
            fit_pu_classifier(rng.normal(size=(5, 2)), rng.normal(size=(50, 2)))


class TestRejection:
    def test_histogram_matches_product_density(self):
        # prior N(0, 1), acceptance sigmoid(2z): accepted density is proportional to sigmoid(2z) phi(z)
        def score(z):
            return 1.0 / (1.0 + np.exp(-2.0 * z[:, 0]))

        z, st = rejection_sample(_gaussian_draw, score, 100_000, np.random.default_rng(2024), batch=4096)
        assert z.shape == (100_000, 1)

        def product(x):
            return stats.norm.pdf(x) / (1.0 + math.exp(-2.0 * x))

        edges = np.concatenate([[-np.inf], np.linspace(-3, 3.5, 27), [np.inf]])
        probs = np.array([integrate.quad(product, a, b)[0] for a, b in zip(edges[:-1], edges[1:])])
        probs /= probs.sum()
        counts = np.histogram(z[:, 0], bins=edges)[0]
        assert stats.chisquare(counts, probs * len(z)).pvalue > 0.01
        # the mean acceptance rate is E_p[r] = 1/2 by symmetry
        assert abs(st.rate - 0.5) < 0.01

    def test_threshold_mode(self, rng):
        z, _ = rejection_sample(_gaussian_draw, lambda z: (z[:, 0] > 0).astype(float), 500, rng, mode="threshold")
        assert np.all(z > 0)

    def test_always_accept(self, rng):
        z, st = rejection_sample(_gaussian_draw, lambda z: np.ones(len(z)), 300, rng, batch=100)
        assert st.rate == 1.0 and st.candidates == 300 and len(z) == 300

    def test_order_stable(self):
        seq = iter(range(10**6))

        def draw(m, g):
            return np.array([[next(seq)] for _ in range(m)], dtype=float)

        z, _ = rejection_sample(draw, lambda z: (z[:, 0] % 3 == 0).astype(float), 50, np.random.default_rng(0),
                                mode="threshold", batch=32)
        assert_array_equal(z[:, 0], np.arange(0, 150, 3))

    def test_starvation(self, rng):
        with pytest.raises(AcceptanceStarvation):
            rejection_sample(_gaussian_draw, lambda z: np.zeros(len(z)), 10, rng, mode="threshold")

    def test_bad_mode(self, rng):
        with pytest.raises(InvalidParameter):
            rejection_sample(_gaussian_draw, lambda z: np.ones(len(z)), 10, rng, mode="always")


class TestManipulationSpec:
    def test_band(self):
        ManipulationSpec(alpha=0.65)
        ManipulationSpec(alpha=0.9)
        with pytest.raises(InvalidParameter):
            ManipulationSpec(alpha=0.5)
        ManipulationSpec(alpha=0.5, allow_any_alpha=True)

    @pytest.mark.parametrize("kw", [dict(target=2), dict(eta=-1.0), dict(alpha=0.0, allow_any_alpha=True), dict(steps=0)])
    def test_rejects(self, kw):
        with pytest.raises(InvalidParameter):
            ManipulationSpec(**kw)

    def test_default_eta(self):
        assert ManipulationSpec.default_eta(32) == pytest.approx(2.8284271247461903)

    def test_logit_ascent_moves_along_weight(self):
        clf = LatentClassifier(3, weight=[1.0, -2.0, 0.5], bias=0.1)
        z = np.zeros((2, 3))
        assert_allclose(logit_ascent(clf, z, 0.5), np.tile([0.5, -1.0, 0.25], (2, 1)))
        assert_allclose(logit_ascent(clf, z, 0.5, target=0), -np.tile([0.5, -1.0, 0.25], (2, 1)))


class TestAgainstTrainedModel:
    def test_no_op_manipulation_is_reconstruction(self, tiny_run):
        model = tiny_run.model
        x = model.decode(np.random.default_rng(0).normal(size=(4, model.config.latent_dim)))
        clf = LatentClassifier(model.config.latent_dim, weight=np.ones(model.config.latent_dim))
        out = manipulate(model, clf, ManipulationSpec(eta=0.0, alpha=1.0, allow_any_alpha=True), x, np.random.default_rng(1))
        assert_allclose(out.image, model.decode(model.encode(x)), atol=1e-12)
        assert_allclose(out.displacement, 0.0, atol=1e-12)

    def test_manipulation_raises_score(self, tiny_run):
        model = tiny_run.model
        k = model.config.latent_dim
        clf = LatentClassifier(k, weight=np.eye(k)[0] * 2.0)
        x = model.decode(np.random.default_rng(3).normal(size=(6, k)))
        out = manipulate(model, clf, ManipulationSpec(eta=3.0, alpha=0.9), x, np.random.default_rng(4))
        assert out.image.shape == x.shape
        assert np.all(np.isfinite(out.image))
        assert np.mean(out.score_after >= out.score_before) >= 0.8

    def test_conditional_sample_accept_all(self, tiny_run):
        model = tiny_run.model
        clf = LatentClassifier(model.config.latent_dim, bias=50.0)
        imgs, z, st = conditional_sample(model, clf, 1, 5, np.random.default_rng(0), steps=10, batch=8)
        assert imgs.shape[0] == 5 and z.shape == (5, model.config.latent_dim)
        assert st.rate == 1.0
        ref = model.prior_sample(8, np.random.default_rng(0), steps=10)
        # an always-accepting classifier returns the unconditional draws unchanged
        assert_allclose(z, ref[:5])

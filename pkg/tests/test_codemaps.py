import math

import numpy as np
import pytest
from sklearn.base import clone

from codechannel.codemaps import (
    DecoderCodeMap,
    EncoderCodeMap,
    GaussianComponent,
    GmmCodebook,
    GmmSummary,
    affine_reformulation_label,
    bregman_margin_percentile,
    decoder_label,
    encoder_label,
    fisher_mismatch,
    fit_gmm,
    legendre_dual_label,
)
from codechannel.synth import gen_blobs


def make_summary(means, covs, weights):
    comps = [
        GaussianComponent(np.asarray(m, dtype=float), np.asarray(c, dtype=float), float(w))
        for m, c, w in zip(means, covs, weights)
    ]
    return GmmSummary(comps, fit_log=np.array([0.0]), covariance_type="full", converged=True)


class TestFitGmm:
    def test_recovers_separated_blobs(self):
        ds = gen_blobs(400, [[-3.0, 0.0], [3.0, 0.0]], sigma=0.4, seed=1)
        summary = fit_gmm(ds.features, 2, init_seed=0)
        fitted = np.sort(summary.means()[:, 0])
        per_label = np.stack(
            [ds.features[ds.labels == lab].mean(axis=0) for lab in (1, 2)]
        )
        oracle = np.sort(per_label[:, 0])
        assert np.all(np.abs(fitted - oracle) < 0.05)

    def test_k1_closed_form(self):
        rng = np.random.default_rng(2)
        X = rng.normal(size=(200, 2)) @ np.array([[1.0, 0.3], [0.0, 0.7]])
        summary = fit_gmm(X, 1, init_seed=0, restarts=1)
        assert np.allclose(summary.means()[0], X.mean(axis=0), atol=1e-9)
        sample_cov = (X - X.mean(0)).T @ (X - X.mean(0)) / len(X)
        assert np.allclose(summary.covariances()[0], sample_cov + 1e-6 * np.eye(2), atol=1e-8)

    def test_nested_likelihood_ordering(self):
        ds = gen_blobs(300, [[-3.0, 0.0], [3.0, 0.0]], sigma=0.5, seed=3)
        ll2 = fit_gmm(ds.features, 2, init_seed=0).fit_log[-1]
        ll3 = fit_gmm(ds.features, 3, init_seed=0).fit_log[-1]
        assert ll3 >= ll2 - 1e-6

    def test_fit_log_monotone(self):
        rng = np.random.default_rng(4)
        X = np.concatenate([rng.normal(-2, 0.7, (150, 3)), rng.normal(2, 0.7, (150, 3))])
        summary = fit_gmm(X, 2, init_seed=1)
        assert np.all(np.diff(summary.fit_log) >= -1e-9)

    def test_degenerate_data_flagged(self):
        X = np.ones((50, 2))
        summary = fit_gmm(X, 3, init_seed=0)
        assert summary.degenerate
        assert np.allclose(summary.means(), 1.0)

    def test_rejects_too_few_samples(self):
        with pytest.raises(ValueError):
            fit_gmm(np.zeros((2, 2)), 5)

    def test_auto_covariance_rule(self):
        rng = np.random.default_rng(5)
        low = fit_gmm(rng.normal(size=(80, 2)), 2, init_seed=0, restarts=1, max_iter=5)
        high = fit_gmm(rng.normal(size=(80, 5)), 2, init_seed=0, restarts=1, max_iter=5)
        assert low.covariance_type == "full"
        assert high.covariance_type == "diag"

    def test_serialization_round_trip(self):
        ds = gen_blobs(150, [[-2.0, 1.0], [2.0, -1.0]], sigma=0.5, seed=6)
        summary = fit_gmm(ds.features, 2, init_seed=0, restarts=2)
        back = GmmSummary.from_dict(summary.to_dict())
        assert np.allclose(back.means(), summary.means())
        assert np.allclose(back.covariances(), summary.covariances())


class TestEncoderCodeMap:
    def test_symmetric_tie_breaks_low(self):
        summary = make_summary(
            [[-1.0, 0.0], [1.0, 0.0]], [np.eye(2), np.eye(2)], [0.5, 0.5]
        )
        cm = EncoderCodeMap(summary)
        assert cm.regime == "isotropic_uniform"
        assert encoder_label(cm, [0.0, 0.0]) == 1

    def test_additively_weighted_boundary(self):
        # sigma^2 = 1, weights (0.9, 0.1): boundary solves
        # (x+1)^2 - 2 log 0.9 = (x-1)^2 - 2 log 0.1, i.e. x = log(9)/2
        summary = make_summary(
            [[-1.0, 0.0], [1.0, 0.0]], [np.eye(2), np.eye(2)], [0.9, 0.1]
        )
        cm = EncoderCodeMap(summary)
        assert cm.regime == "additively_weighted"
        boundary = math.log(9.0) / 2.0
        assert encoder_label(cm, [1.0, 0.0]) == 1
        assert encoder_label(cm, [1.2, 0.0]) == 2
        assert encoder_label(cm, [boundary - 1e-9, 0.0]) == 1
        assert encoder_label(cm, [boundary + 1e-9, 0.0]) == 2

    def test_quadric_boundary_matches_energy_sign_change(self):
        summary = make_summary(
            [[-1.0, 0.0], [1.0, 0.0]],
            [np.diag([0.5, 1.0]), np.diag([2.0, 1.0])],
            [0.6, 0.4],
        )
        cm = EncoderCodeMap(summary)
        assert cm.regime == "mahalanobis_quadric"
        xs = np.linspace(-4.0, 4.0, 4001)
        pts = np.stack([xs, np.zeros_like(xs)], axis=1)
        labels = cm.predict(pts)
        energies = cm.energies(pts)
        sign = np.sign(energies[:, 0] - energies[:, 1])
        # label flips exactly where the energy difference changes sign
        flips = np.nonzero(labels[:-1] != labels[1:])[0]
        sign_changes = np.nonzero(sign[:-1] != sign[1:])[0]
        assert np.array_equal(flips, sign_changes)

    def test_isotropic_uniform_equals_nearest_mean(self):
        rng = np.random.default_rng(7)
        means = rng.normal(size=(5, 3))
        summary = make_summary(means, [0.3 * np.eye(3)] * 5, [0.2] * 5)
        cm = EncoderCodeMap(summary)
        Z = rng.normal(size=(10_000, 3), scale=2.0)
        nearest = np.argmin(((Z[:, None, :] - means[None]) ** 2).sum(axis=2), axis=1) + 1
        assert np.array_equal(cm.predict(Z), nearest)

    def test_weight_monotonicity_grows_cell(self):
        rng = np.random.default_rng(8)
        means = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.5]])
        Z = rng.normal(size=(3000, 2), scale=1.5)
        previous = None
        for w1 in (0.1, 0.3, 0.6, 0.9):
            rest = (1.0 - w1) / 2.0
            summary = make_summary(means, [np.eye(2)] * 3, [w1, rest, rest])
            members = set(np.nonzero(EncoderCodeMap(summary).predict(Z) == 1)[0].tolist())
            if previous is not None:
                assert previous <= members
            previous = members

    def test_serialization_round_trip(self):
        summary = make_summary(
            [[-1.0, 0.0], [1.0, 0.5]], [np.eye(2), np.diag([0.5, 2.0])], [0.7, 0.3]
        )
        cm = EncoderCodeMap(summary)
        back = EncoderCodeMap.from_dict(cm.to_dict())
        rng = np.random.default_rng(9)
        Z = rng.normal(size=(500, 2))
        assert np.array_equal(back.predict(Z), cm.predict(Z))


class TestDecoderCodeMap:
    def test_basic_examples(self):
        cm = DecoderCodeMap(np.array([[0.9, 0.1], [0.1, 0.9]]))
        assert decoder_label(cm, [0.8, 0.2]) == 1
        assert decoder_label(cm, [0.1, 0.9]) == 2
        assert cm.divergences(np.array([[0.9, 0.1]]))[0, 0] == pytest.approx(0.0, abs=1e-12)
        assert decoder_label(cm, [0.5, 0.5]) == 1  # tie-break

    def test_single_prototype(self):
        cm = DecoderCodeMap(np.array([[0.3, 0.6, 0.2]]))
        rng = np.random.default_rng(10)
        X = rng.uniform(0.05, 0.95, size=(100, 3))
        assert np.all(cm.predict(X) == 1)

    def test_divergence_is_bernoulli_kl_sum(self):
        cm = DecoderCodeMap(np.array([[0.7, 0.4]]))
        x = np.array([[0.2, 0.5]])
        expected = sum(
            a * math.log(a / b) + (1 - a) * math.log((1 - a) / (1 - b))
            for a, b in zip(x[0], cm.prototypes[0])
        )
        assert cm.divergences(x)[0, 0] == pytest.approx(expected, rel=1e-12)

    def test_reformulations_agree_everywhere(self):
        rng = np.random.default_rng(11)
        cm = DecoderCodeMap(rng.uniform(0.05, 0.95, size=(5, 6)))
        X = rng.uniform(0.02, 0.98, size=(10_000, 6))
        margins = cm.margins(X)
        keep = margins > 1e-9
        direct = cm.predict(X[keep])
        assert np.array_equal(direct, cm.predict_affine(X[keep]))
        assert np.array_equal(direct, cm.predict_dual(X[keep]))

    def test_tie_point_shares_tie_break(self):
        cm = DecoderCodeMap(np.array([[0.9, 0.1], [0.1, 0.9]]))
        x = np.array([[0.5, 0.5]])
        assert cm.predict(x)[0] == cm.predict_affine(x)[0] == cm.predict_dual(x)[0] == 1

    def test_tie_mass_is_negligible(self):
        rng = np.random.default_rng(12)
        cm = DecoderCodeMap(rng.uniform(0.1, 0.9, size=(4, 5)))
        X = rng.uniform(0.02, 0.98, size=(10_000, 5))
        assert np.mean(cm.margins(X) < 1e-12) <= 1e-3

    def test_legendre_round_trip(self):
        rng = np.random.default_rng(13)
        cm = DecoderCodeMap(rng.uniform(0.2, 0.8, size=(3, 4)))
        d = rng.uniform(1e-7, 1 - 1e-7, size=(200, 4))
        theta = cm._grad_fn(d)
        back = cm._dual_grad(theta)
        assert np.allclose(back, d, atol=1e-10)

    def test_label_helpers(self):
        cm = DecoderCodeMap(np.array([[0.9, 0.1], [0.1, 0.9]]))
        x = [0.85, 0.2]
        assert decoder_label(cm, x) == affine_reformulation_label(cm, x) == legendre_dual_label(cm, x)

    def test_categorical_generator(self):
        # two positions over a 3-token vocabulary; prototypes are stacked
        # per-position simplices
        protos = np.array(
            [
                [0.8, 0.1, 0.1, 0.2, 0.6, 0.2],
                [0.1, 0.8, 0.1, 0.6, 0.2, 0.2],
            ]
        )
        cm = DecoderCodeMap(protos, generator="categorical", positions=2)
        x = np.array([[0.7, 0.2, 0.1, 0.3, 0.5, 0.2]])
        expected = [
            sum(
                x[0, i] * math.log(x[0, i] / protos[k, i])
                for i in range(6)
            )
            for k in range(2)
        ]
        assert np.allclose(cm.divergences(x)[0], expected, atol=1e-9)
        assert cm.predict(x)[0] == 1
        rng = np.random.default_rng(14)
        raw = rng.uniform(0.05, 1.0, size=(2000, 2, 3))
        X = (raw / raw.sum(axis=2, keepdims=True)).reshape(2000, 6)
        keep = cm.margins(X) > 1e-9
        assert np.array_equal(cm.predict(X[keep]), cm.predict_affine(X[keep]))
        assert np.array_equal(cm.predict(X[keep]), cm.predict_dual(X[keep]))

    def test_prototype_separation_and_serialization(self):
        cm = DecoderCodeMap(np.array([[0.9, 0.1], [0.1, 0.9]]))
        assert cm.min_prototype_separation() > 1.0
        back = DecoderCodeMap.from_dict(cm.to_dict())
        rng = np.random.default_rng(15)
        X = rng.uniform(0.05, 0.95, size=(300, 2))
        assert np.array_equal(back.predict(X), cm.predict(X))

    def test_margin_percentile(self):
        rng = np.random.default_rng(16)
        cm = DecoderCodeMap(rng.uniform(0.2, 0.8, size=(3, 4)))
        X = rng.uniform(0.1, 0.9, size=(500, 4))
        pct = bregman_margin_percentile(cm, X, percentile=5.0)
        assert pct >= 0.0


class TestGmmCodebook:
    def test_sklearn_surface(self):
        ds = gen_blobs(200, [[-3.0, 0.0], [3.0, 0.0]], sigma=0.4, seed=17)
        est = GmmCodebook(n_codes=2, random_state=0)
        cloned = clone(est)
        assert cloned.get_params()["n_codes"] == 2
        est.fit(ds.features)
        labels = est.predict(ds.features)
        assert labels.shape == (200,)
        assert set(np.unique(labels)) <= {1, 2}
        # blobs are well separated: labels must align with ground truth up
        # to relabeling
        flips = min(
            np.mean(labels != ds.labels),
            np.mean(labels != (3 - ds.labels)),
        )
        assert flips < 0.02


class _LinearDecoder:
    """d(z) = 0.5 + A (z - mu), with an exact-Jacobian hook."""

    def __init__(self, A, mu):
        self.A = A
        self.mu = mu

    def __call__(self, z):
        return 0.5 + self.A @ (np.asarray(z) - self.mu)

    def jacobian(self, z):
        return self.A


class TestFisherMismatch:
    def test_proportional_metric_gives_zero(self):
        # at d = 0.5 the metric is G = 4 A'A; A'A = Sigma^{-1}/2 makes
        # G = 2 Sigma^{-1}, exact proportionality with best scale 0.5
        mu = np.array([0.2, -0.4])
        sigma = np.diag([0.5, 2.0])
        prec = np.linalg.inv(sigma)
        A = np.linalg.cholesky(prec / 2.0).T  # 4 A'A = 2 prec
        summary = make_summary([mu], [sigma], [1.0])
        fm = fisher_mismatch(summary, _LinearDecoder(A, mu))
        assert fm.kappa[0] == pytest.approx(0.0, abs=1e-8)
        assert fm.a_star[0] == pytest.approx(0.5, abs=1e-8)
        assert fm.weighted_kappa_sum == pytest.approx(0.0, abs=1e-8)

    def test_kappa_inv_matches_eigen_oracle(self):
        mu = np.zeros(2)
        sigma = np.diag([2.0, 0.5])
        A = np.array([[0.3, 0.05], [-0.1, 0.2], [0.05, 0.1]])
        summary = make_summary([mu], [sigma], [1.0])
        fm = fisher_mismatch(summary, _LinearDecoder(A, mu))
        d = np.full(3, 0.5)
        G = A.T @ (A / (d * (1 - d))[:, None])
        lam = np.linalg.eigvals(sigma @ np.linalg.inv(G))
        oracle = float(np.sum(np.log(np.real(lam)) ** 2))
        assert fm.kappa_inv[0] == pytest.approx(oracle, rel=1e-6)

    def test_finite_difference_matches_exact_jacobian(self):
        mu = np.array([0.1, 0.3])
        sigma = np.eye(2)
        A = np.array([[0.2, -0.1], [0.05, 0.15], [0.1, 0.1]])
        summary = make_summary([mu], [sigma], [1.0])
        with_hook = fisher_mismatch(summary, _LinearDecoder(A, mu))
        plain = fisher_mismatch(summary, lambda z: 0.5 + A @ (np.asarray(z) - mu))
        assert with_hook.kappa[0] == pytest.approx(plain.kappa[0], rel=1e-6)

    def test_singular_metric_flagged(self):
        summary = make_summary([[0.0, 0.0]], [np.eye(2)], [1.0])
        fm = fisher_mismatch(summary, lambda z: np.full(3, 0.5))
        assert fm.singular[0]
        assert math.isnan(fm.kappa_inv[0])
        assert fm.kappa[0] == pytest.approx(np.linalg.norm(np.eye(2), "fro"))

    def test_diagnostic_scalars_populated(self):
        mu = np.zeros(2)
        A = np.array([[0.3, 0.0], [0.0, 0.2]])
        summary = make_summary([mu], [np.eye(2)], [1.0])
        fm = fisher_mismatch(summary, _LinearDecoder(A, mu))
        assert fm.mean_jacobian_norm == pytest.approx(0.3, rel=1e-6)
        assert fm.weighted_kappa_sum >= 0.0

import json
import math

import numpy as np
import pytest

from codechannel.gridaudit import (
    LatentGrid,
    audit_exact,
    build_grid,
    data_bounds,
    event_probability_bound,
    free_energy_stack,
    grid_posteriors,
    joint_table_from_grid,
    mean_code_agreement,
)
from codechannel.infokl import d_bin


class StubModel:
    """Grid-audit model stub with prescribed unnormalized log densities."""

    def __init__(self, log_lik_rows, log_q_rows):
        self._ll = np.atleast_2d(np.asarray(log_lik_rows, dtype=float))
        self._lq = np.atleast_2d(np.asarray(log_q_rows, dtype=float))

    def log_likelihood_matrix(self, X, Z):
        return self._ll[: np.atleast_2d(X).shape[0]]

    def log_q_matrix(self, X, Z):
        return self._lq[: np.atleast_2d(X).shape[0]]


class StubMap:
    def __init__(self, labels):
        self.labels = np.asarray(labels)

    def predict(self, Z):
        return self.labels[: np.atleast_2d(Z).shape[0]]


def two_point_grid():
    return LatentGrid(
        points=np.array([[0.0], [1.0]]),
        weights=np.array([0.5, 0.5]),
        log_weights=np.log([0.5, 0.5]),
        bounds=((0.0, 1.0),),
        resolution=(2,),
        weighting="uniform",
    )


def identity_decoder(Z):
    return np.atleast_2d(Z)


class TestBuildGrid:
    def test_uniform_3x3(self):
        grid = build_grid([(-1, 1), (-1, 1)], 3, weighting="uniform")
        assert grid.size == 9
        assert np.allclose(grid.weights, 1.0 / 9.0)
        assert grid.points.shape == (9, 2)

    def test_prior_weighting_reflection_symmetric(self):
        grid = build_grid([(-2, 2), (-2, 2)], 5, weighting="prior")
        w = grid.weights.reshape(5, 5)
        assert np.allclose(w, w[::-1, ::-1])
        assert grid.weights.sum() == pytest.approx(1.0, abs=1e-12)

    def test_data_driven_bounds(self):
        latents = np.array([[-1.0, 2.0], [3.0, -2.0]])
        bounds = data_bounds(latents, margin=0.5)
        assert bounds == [(-1.5, 3.5), (-2.5, 2.5)]

    def test_rejects_bad_inputs(self):
        with pytest.raises(ValueError):
            build_grid([], 3)
        with pytest.raises(ValueError):
            build_grid([(0, 1)], 1)
        with pytest.raises(ValueError):
            build_grid([(1, 0)], 3)
        with pytest.raises(ValueError):
            build_grid([(0, 1)], 3, weighting="quadrature")


class TestGridPosteriors:
    def test_two_point_closed_form(self):
        # q = (0.7, 0.3) and p = (0.5, 0.5) after normalization
        grid = two_point_grid()
        model = StubModel([[1.0, 1.0]], [[math.log(0.7), math.log(0.3)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        assert np.allclose(post.p[0], [0.5, 0.5])
        assert np.allclose(post.q[0], [0.7, 0.3])
        expected = 0.7 * math.log(1.4) + 0.3 * math.log(0.6)
        assert post.delta[0] == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.08228, abs=5e-6)

    def test_single_point_grid(self):
        grid = LatentGrid(
            points=np.array([[0.0]]),
            weights=np.array([1.0]),
            log_weights=np.array([0.0]),
            bounds=((0.0, 0.0),),
            resolution=(1,),
            weighting="uniform",
        )
        model = StubModel([[2.0]], [[-3.0]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        assert post.q[0, 0] == 1.0 and post.p[0, 0] == 1.0
        assert post.delta[0] == 0.0

    def test_absolute_continuity_sentinel(self):
        grid = two_point_grid()
        model = StubModel([[0.0, -800.0]], [[math.log(0.5), math.log(0.5)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        assert post.ac_violation[0]
        assert post.delta[0] == math.inf

    def test_delta_nonnegative_many_rows(self):
        rng = np.random.default_rng(0)
        grid = build_grid([(-1, 1)], 17, weighting="uniform")
        ll = rng.normal(size=(40, 17))
        lq = rng.normal(size=(40, 17))
        post = grid_posteriors(StubModel(ll, lq), np.zeros((40, 1)), grid)
        assert np.all(post.delta >= 0.0)
        assert np.allclose(post.q.sum(axis=1), 1.0, atol=1e-10)
        assert np.allclose(post.p.sum(axis=1), 1.0, atol=1e-10)


class TestAuditExact:
    def test_identical_maps_zero_event(self):
        grid = two_point_grid()
        model = StubModel([[1.0, 0.0]], [[math.log(0.6), math.log(0.4)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        labels = StubMap([1, 2])
        report = audit_exact(post, labels, labels, identity_decoder, grid)
        assert report.eta_q_bar == 0.0 and report.eta_p_bar == 0.0
        assert report.d_bin == 0.0
        assert report.agreement_q == 1.0
        assert report.validity and report.coarsening_valid

    def test_two_point_binary_sufficiency(self):
        # one agreeing and one disagreeing grid point: the indicator is
        # sufficient, so the whole gap is the binary term
        grid = two_point_grid()
        model = StubModel([[1.0, 1.0]], [[math.log(0.7), math.log(0.3)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        report = audit_exact(post, StubMap([1, 1]), StubMap([1, 2]), identity_decoder, grid)
        assert report.eta_q_bar == pytest.approx(0.3, abs=1e-12)
        assert report.eta_p_bar == pytest.approx(0.5, abs=1e-12)
        assert report.d_bin == pytest.approx(d_bin(0.3, 0.5), abs=1e-12)
        assert report.d_bin == pytest.approx(report.delta_bar, abs=1e-12)
        assert report.rho == pytest.approx(0.0, abs=1e-12)
        assert report.jensen == pytest.approx(0.0, abs=1e-12)
        assert report.closure_residual <= 1e-12

    def test_ac_violation_fails_audit(self):
        grid = two_point_grid()
        model = StubModel([[0.0, -800.0]], [[math.log(0.5), math.log(0.5)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        report = audit_exact(post, StubMap([1, 1]), StubMap([1, 2]), identity_decoder, grid)
        assert report.ac_violation
        assert not report.validity

    def test_report_io(self, tmp_path):
        grid = two_point_grid()
        model = StubModel([[1.0, 1.0]], [[math.log(0.7), math.log(0.3)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        report = audit_exact(post, StubMap([1, 1]), StubMap([1, 2]), identity_decoder, grid)
        json_path = tmp_path / "report.json"
        report.to_json(json_path)
        loaded = json.loads(json_path.read_text())
        assert loaded["validity"] is True
        assert "per_example" in loaded
        csv_path = tmp_path / "per_example.csv"
        report.write_per_example_csv(csv_path)
        header = csv_path.read_text().splitlines()[0]
        assert header == "index,delta,eta_q,eta_p,d_bin,rho"


class TestAuditOnTrainedModel:
    def test_full_invariants(self, toy_bundle):
        report = toy_bundle["report"]
        posteriors = toy_bundle["posteriors"]
        # certificate and per-example DPI
        assert report.validity
        assert report.d_bin <= report.delta_bar + 1e-6
        assert report.per_example_dpi
        # identity closure through the independent conditional route
        assert report.closure_residual <= 1e-8
        assert abs(report.rho - report.rho_by_difference) <= 1e-8
        # non-negativity
        assert report.jensen >= -1e-10
        assert report.rho >= -1e-10
        # coarsening hierarchy
        assert report.d_bin <= report.code_pair_kl + 1e-10
        assert report.code_pair_kl <= report.kl_grid_marginals + 1e-10
        assert report.kl_grid_marginals <= report.delta_bar + 1e-10

    def test_per_example_identity(self, toy_bundle):
        per = toy_bundle["report"].per_example
        residual = np.abs(per["delta"] - (per["d_bin"] + per["rho"]))
        assert residual.max() <= 1e-10

    def test_fubini_against_channel_table(self, toy_bundle):
        grid = toy_bundle["grid"]
        model = toy_bundle["model"]
        enc_map, dec_map = toy_bundle["enc_map"], toy_bundle["dec_map"]
        posteriors = toy_bundle["posteriors"]
        report = toy_bundle["report"]
        labels_enc = enc_map.predict(grid.points)
        labels_dec = dec_map.predict(model.decode_probs(grid.points))
        table = joint_table_from_grid(
            posteriors.q.mean(axis=0), labels_enc, labels_dec, toy_bundle["summary"].K
        )
        assert abs(table.agreement() - report.agreement_q) <= 1e-12

    def test_generic_events_bounded(self, toy_bundle):
        rng = np.random.default_rng(20)
        posteriors = toy_bundle["posteriors"]
        M = posteriors.q.shape[1]
        for _ in range(100):
            mask = rng.random(M) < rng.uniform(0.05, 0.95)
            ev_kl, delta_bar = event_probability_bound(posteriors, mask)
            assert ev_kl <= delta_bar + 1e-9

    def test_bound_inversions_present(self, toy_bundle):
        report = toy_bundle["report"]
        assert report.p_star is not None
        assert d_bin(report.p_star.p_star, report.eta_p_bar) == pytest.approx(
            report.delta_bar, abs=1e-7
        )
        assert report.pinsker_bound >= report.eta_q_bar - 1e-9
        assert report.bh_bound >= report.eta_q_bar - 1e-9

    def test_mean_code_agreement_bounds(self, toy_bundle):
        a_mu = mean_code_agreement(
            toy_bundle["model"],
            toy_bundle["X"],
            toy_bundle["enc_map"],
            toy_bundle["dec_map"],
            toy_bundle["model"].decode_probs,
        )
        assert 0.0 <= a_mu <= 1.0

    def test_mean_code_agreement_identical_maps(self, toy_bundle):
        # same map on both sides with a pass-through decoder
        enc = toy_bundle["enc_map"]
        model = toy_bundle["model"]
        a = mean_code_agreement(model, toy_bundle["X"][:32], enc, enc, lambda Z: np.atleast_2d(Z))
        assert a == 1.0

    def test_free_energy_stack(self, toy_bundle):
        report = toy_bundle["report"]
        stack = free_energy_stack(report, reconstruction_term=1.25)
        assert stack["closure_residual"] <= 1e-8
        assert stack["total"] == pytest.approx(
            1.25 + report.d_bin + report.jensen + report.rho
        )

    def test_free_energy_stack_zero_gap(self):
        grid = two_point_grid()
        model = StubModel([[1.0, 0.0]], [[math.log(0.6), math.log(0.4)]])
        post = grid_posteriors(model, np.zeros((1, 1)), grid)
        # q == p: make q match p exactly
        p = post.p[0]
        model2 = StubModel([[1.0, 0.0]], [np.log(p)])
        post2 = grid_posteriors(model2, np.zeros((1, 1)), grid)
        labels = StubMap([1, 2])
        report = audit_exact(post2, labels, labels, identity_decoder, grid)
        stack = free_energy_stack(report, reconstruction_term=2.0)
        assert stack["d_bin"] == 0.0 and stack["jensen"] == 0.0
        assert abs(stack["rho"]) <= 1e-12

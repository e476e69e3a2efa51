"""Projection pairs, layer plans, seeded perturbations and relayout."""

import math

import numpy as np
import pytest

from subzero.errors import ShapeError
from subzero.numcore import GaussianStream, gaussian_matrix
from subzero.perturbation import (LayerPlan, LayerShape, PerturbSpec,
                                  ProjectionPair, alignment_scales,
                                  build_pairs, generate_proj_pair,
                                  iter_perturbation_layers,
                                  low_rank_perturbation,
                                  norm_alignment_factor, pairs_from_plan,
                                  perturb_params_inplace, plan_layers,
                                  reshape_near_square, reshaped_view,
                                  subspace_dimension,
                                  uniform_alignment_factor)


def two_layer_params(seed=0):
    s = GaussianStream(seed)
    return [gaussian_matrix(s, 4, 3), s.normals(5)]


class TestProjectionPair:
    def test_draw_count_is_m_plus_n_times_r(self):
        s = GaussianStream(0)
        generate_proj_pair(s, 6, 4, 2)
        assert s.index == (6 + 4) * 2

    def test_factors_orthonormal(self):
        pair = generate_proj_pair(GaussianStream(1), 7, 5, 3)
        assert np.max(np.abs(pair.u.T @ pair.u - np.eye(3))) < 1e-12
        assert np.max(np.abs(pair.v.T @ pair.v - np.eye(3))) < 1e-12

    def test_rank_and_shape_properties(self):
        pair = generate_proj_pair(GaussianStream(2), 6, 4, 2)
        assert pair.rank == 2
        assert pair.shape == LayerShape(6, 4)

    def test_deterministic_in_seed(self):
        a = generate_proj_pair(GaussianStream(9), 5, 4, 2)
        b = generate_proj_pair(GaussianStream(9), 5, 4, 2)
        assert np.array_equal(a.u, b.u) and np.array_equal(a.v, b.v)

    def test_rank_bounds_enforced(self):
        with pytest.raises(ShapeError):
            generate_proj_pair(GaussianStream(0), 4, 3, 4)
        with pytest.raises(ShapeError):
            generate_proj_pair(GaussianStream(0), 4, 3, 0)

    def test_mismatched_factor_ranks_rejected(self):
        with pytest.raises(ShapeError):
            ProjectionPair(u=np.zeros((4, 2)), v=np.zeros((3, 1)))


class TestLowRankPerturbation:
    def test_matches_einsum_oracle(self):
        pair = generate_proj_pair(GaussianStream(3), 5, 4, 2)
        z = gaussian_matrix(GaussianStream(4), 2, 2)
        got = low_rank_perturbation(pair, z)
        oracle = np.einsum("ir,rs,js->ij", pair.u, z, pair.v)
        assert np.max(np.abs(got - oracle)) < 1e-13

    def test_frobenius_norm_equals_core_norm(self):
        # orthonormal factors preserve the Frobenius norm of the core
        pair = generate_proj_pair(GaussianStream(5), 6, 5, 3)
        z = gaussian_matrix(GaussianStream(6), 3, 3)
        assert np.linalg.norm(low_rank_perturbation(pair, z)) == pytest.approx(
            np.linalg.norm(z), rel=1e-12)

    def test_wrong_core_shape_raises(self):
        pair = generate_proj_pair(GaussianStream(7), 5, 4, 2)
        with pytest.raises(ShapeError):
            low_rank_perturbation(pair, np.zeros((3, 3)))


def brute_force_near_square(m, n):
    total = m * n
    best = (total, 1)
    for b in range(1, int(math.isqrt(total)) + 1):
        if total % b == 0:
            a = total // b
            if a / b < best[0] / best[1]:
                best = (a, b)
    return best


class TestReshapeNearSquare:
    @pytest.mark.parametrize("m,n,expected", [
        (2048, 8, (128, 128)),
        (3, 2, (3, 2)),
        (12, 3, (6, 6)),
        (9, 4, (6, 6)),
        (7, 1, (7, 1)),       # prime count cannot improve
        (6, 6, (6, 6)),
        (100, 1, (10, 10)),
        (5, 3, (5, 3)),
    ])
    def test_cases(self, m, n, expected):
        geom = reshape_near_square(m, n)
        assert (geom.rows, geom.cols) == expected

    def test_matches_brute_force_oracle(self):
        for m, n in [(17, 4), (30, 14), (128, 3), (44, 44), (13, 13)]:
            geom = reshape_near_square(m, n)
            assert (geom.rows, geom.cols) == brute_force_near_square(m, n)

    def test_result_divides_product(self):
        geom = reshape_near_square(360, 7)
        assert geom.rows * geom.cols == 360 * 7
        assert geom.rows >= geom.cols

    def test_rejects_nonpositive(self):
        with pytest.raises(ShapeError):
            reshape_near_square(0, 5)


class TestReshapedView:
    def test_shares_memory(self):
        w = np.zeros((2048, 8))
        view = reshaped_view(w, LayerShape(128, 128))
        assert np.shares_memory(w, view)
        view[0, 0] = 7.0
        assert w[0, 0] == 7.0

    def test_row_major_correspondence(self):
        w = np.arange(12.0).reshape(3, 4)
        view = reshaped_view(w, LayerShape(6, 2))
        assert np.array_equal(view.ravel(), w.ravel())

    def test_size_mismatch_raises(self):
        with pytest.raises(ShapeError):
            reshaped_view(np.zeros((3, 4)), LayerShape(5, 2))

    def test_non_contiguous_raises(self):
        w = np.zeros((6, 6))[:, ::2]
        with pytest.raises(ShapeError):
            reshaped_view(w, LayerShape(9, 2))


class TestPlanLayers:
    def test_vector_layers_get_full_fallback(self):
        plans = plan_layers(two_layer_params(), rank=2)
        assert plans[0] == LayerPlan(shape=LayerShape(4, 3), rank=2)
        assert plans[1] == LayerPlan(shape=None, rank=5)
        assert plans[1].draw_count == 25  # rank**2 convention also covers vectors

    def test_never_clamps_rank(self):
        plans = plan_layers([np.zeros((5, 2))], rank=4, reshape="never")
        assert plans[0] == LayerPlan(shape=LayerShape(5, 2), rank=2)

    def test_auto_reshapes_only_when_rank_does_not_fit(self):
        plans = plan_layers([np.zeros((2048, 8)), np.zeros((6, 6))], rank=32)
        assert plans[0].shape == LayerShape(128, 128)
        assert plans[0].rank == 32
        assert plans[1].shape == LayerShape(6, 6)  # fits natively, untouched
        fits = plan_layers([np.zeros((2048, 8))], rank=4)
        assert fits[0].shape == LayerShape(2048, 8)

    def test_always_reshapes_everything(self):
        plans = plan_layers([np.zeros((12, 3))], rank=2, reshape="always")
        assert plans[0].shape == LayerShape(6, 6)

    def test_bad_inputs(self):
        with pytest.raises(ShapeError):
            plan_layers([np.zeros((2, 2))], rank=0)
        with pytest.raises(ValueError):
            plan_layers([np.zeros((2, 2))], rank=1, reshape="sometimes")
        with pytest.raises(ShapeError):
            plan_layers([np.zeros((2, 2, 2))], rank=1)


class TestBuildPairs:
    def test_one_pair_per_matrix_layer(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        assert pairs[0] is not None and pairs[0].rank == 2
        assert pairs[1] is None

    def test_pairs_follow_plan_geometry(self):
        pairs = build_pairs(GaussianStream(0), [np.zeros((2048, 8))], 32)
        assert pairs[0].shape == LayerShape(128, 128)
        assert pairs[0].rank == 32

    def test_stream_order_is_layer_order(self):
        params = [np.zeros((4, 3)), np.zeros((3, 2))]
        s = GaussianStream(5)
        pairs = pairs_from_plan(s, plan_layers(params, 1))
        expected_first = generate_proj_pair(GaussianStream(5), 4, 3, 1)
        assert np.array_equal(pairs[0].u, expected_first.u)
        assert s.index == (4 + 3) * 1 + (3 + 2) * 1


class TestSubspaceDimension:
    def test_counts_cores_and_vectors(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        assert subspace_dimension(params, pairs) == 2 * 2 + 5

    def test_full_fallback_equals_total_dimension(self):
        params = two_layer_params()
        assert subspace_dimension(params, [None, None]) == 12 + 5


class TestIterPerturbationLayers:
    def test_replay_is_bit_identical(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        first = list(iter_perturbation_layers(params, pairs, seed=11))
        second = list(iter_perturbation_layers(params, pairs, seed=11))
        for a, b in zip(first, second):
            assert np.array_equal(a, b)

    def test_matches_manual_construction(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        deltas = list(iter_perturbation_layers(params, pairs, seed=13))
        s = GaussianStream(13)
        z = gaussian_matrix(s, 2, 2)
        manual0 = pairs[0].u @ z @ pairs[0].v.T
        manual1 = s.normals(5)
        assert np.max(np.abs(deltas[0] - manual0)) < 1e-15
        assert np.array_equal(deltas[1], manual1)

    def test_native_shapes(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        deltas = list(iter_perturbation_layers(params, pairs, seed=1))
        assert deltas[0].shape == (4, 3)
        assert deltas[1].shape == (5,)

    def test_reshaped_pair_yields_native_shape(self):
        params = [np.zeros((2048, 8))]
        pairs = build_pairs(GaussianStream(2), params, 32)
        (delta,) = iter_perturbation_layers(params, pairs, seed=3)
        assert delta.shape == (2048, 8)
        # row-major relayout: flattening commutes with the geometry change
        s = GaussianStream(3)
        z = gaussian_matrix(s, 32, 32)
        square = pairs[0].u @ (z @ pairs[0].v.T)
        assert np.array_equal(delta.ravel(), square.ravel())

    def test_low_rank_in_reshaped_geometry(self):
        params = [np.zeros((2048, 8))]
        pairs = build_pairs(GaussianStream(2), params, 32)
        (delta,) = iter_perturbation_layers(params, pairs, seed=3)
        sv = np.linalg.svd(delta.reshape(128, 128), compute_uv=False)
        assert sv[32] < 1e-12 * sv[0]

    def test_geometry_size_mismatch_raises(self):
        pair = generate_proj_pair(GaussianStream(0), 4, 3, 2)
        with pytest.raises(ShapeError):
            list(iter_perturbation_layers([np.zeros((5, 2))], [pair], seed=0))

    def test_layer_count_mismatch_raises(self):
        with pytest.raises(ShapeError):
            list(iter_perturbation_layers(two_layer_params(), [None], seed=0))

    def test_z_scales_multiply_exactly(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        plain = list(iter_perturbation_layers(params, pairs, seed=4))
        scaled = list(iter_perturbation_layers(params, pairs, seed=4,
                                               z_scales=[3.0, 1.0]))
        assert np.max(np.abs(scaled[0] - 3.0 * plain[0])) < 1e-15
        assert np.array_equal(scaled[1], plain[1])

    def test_z_scales_length_checked(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        with pytest.raises(ShapeError):
            list(iter_perturbation_layers(params, pairs, seed=0, z_scales=[1.0]))


class TestPerturbRestore:
    def test_three_pass_sequence_restores(self):
        params = two_layer_params(3)
        before = [w.copy() for w in params]
        pairs = build_pairs(GaussianStream(1), params, 2)
        for direction in (+1, -2, +1):
            spec = PerturbSpec(epsilon=1e-3, seed=21, direction=direction)
            perturb_params_inplace(params, pairs, spec)
        for w, b in zip(params, before):
            assert np.max(np.abs(w - b)) <= 1e-12

    def test_plus_pass_lands_where_expected(self):
        params = two_layer_params(3)
        before = [w.copy() for w in params]
        pairs = build_pairs(GaussianStream(1), params, 2)
        deltas = list(iter_perturbation_layers(params, pairs, seed=8))
        perturb_params_inplace(params, pairs,
                               PerturbSpec(epsilon=0.5, seed=8, direction=1))
        for w, b, d in zip(params, before, deltas):
            assert np.max(np.abs(w - (b + 0.5 * d))) < 1e-15

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            PerturbSpec(epsilon=0.0, seed=1, direction=1)
        with pytest.raises(ValueError):
            PerturbSpec(epsilon=1e-3, seed=1, direction=0)
        with pytest.raises(ValueError):
            PerturbSpec(epsilon=1e-3, seed=-1, direction=1)


class TestAlignment:
    def test_factor_formula(self):
        assert norm_alignment_factor(8, 2, 2) == pytest.approx(2.0)
        assert norm_alignment_factor(6, 6, 2) == pytest.approx(3.0)
        with pytest.raises(ShapeError):
            norm_alignment_factor(4, 3, 5)

    def test_scale_z_matches_factor_per_layer(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        scales = alignment_scales(params, pairs, "scale_z")
        assert scales[0] == pytest.approx(math.sqrt(12) / 2)
        assert scales[1] == 1.0

    def test_none_and_hyper_modes_return_no_scales(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        assert alignment_scales(params, pairs, "none") is None
        assert alignment_scales(params, pairs, "scale_hyper") is None

    def test_unknown_mode_raises(self):
        params = two_layer_params()
        pairs = build_pairs(GaussianStream(0), params, 2)
        with pytest.raises(ValueError):
            alignment_scales(params, pairs, "rescale")

    def test_aligned_norm_matches_full_gaussian_in_expectation(self):
        # E||mu * U Z V^T||_F^2 = mu^2 r^2 = m n = E||full draw||_F^2
        params = [np.zeros((6, 4))]
        pairs = build_pairs(GaussianStream(3), params, 2)
        mu = norm_alignment_factor(6, 4, 2)
        acc = 0.0
        n = 4000
        for k in range(n):
            (delta,) = iter_perturbation_layers(params, pairs, seed=k,
                                                z_scales=[mu])
            acc += float(np.sum(delta * delta))
        assert acc / n == pytest.approx(24.0, rel=0.1)

    def test_uniform_factor_requires_shared_geometry(self):
        params = [np.zeros((6, 6)), np.zeros((6, 6)), np.zeros(3)]
        pairs = build_pairs(GaussianStream(0), params, 2)
        assert uniform_alignment_factor(pairs) == pytest.approx(3.0)
        mixed = [np.zeros((6, 6)), np.zeros((8, 2))]
        mixed_pairs = build_pairs(GaussianStream(0), mixed, 2, reshape="never")
        with pytest.raises(ShapeError):
            uniform_alignment_factor(mixed_pairs)

    def test_uniform_factor_all_vectors_is_one(self):
        assert uniform_alignment_factor([None, None]) == 1.0

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotr import numerics as nx
from spotr.attention import AttnConfig, CwpaParams, cwpa
from spotr.bench import count_spa
from spotr.numerics import Tensor
from spotr.spa import (
    SpaLayer,
    aggregate,
    gsa_forward,
    semantic_kernel,
    sp_positions,
    sp_state,
    spa_ablation_fps,
    spa_forward,
    spatial_kernel,
)

from conftest import grad_check, hull_residual


def two_cluster_probe(gamma=16.0, n=20, sharp=10.0):
    """Adjacent clusters A (around the origin) and B (0.1 along x) with
    orthogonal features; the SP latent points at A's feature."""
    rng = np.random.default_rng(0)
    xa = rng.normal(0.0, 0.01, size=(n, 3))
    xb = rng.normal(0.0, 0.01, size=(n, 3)) + [0.1, 0.0, 0.0]
    fa, fb = np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0, 0.0])
    X = np.concatenate([xa, xb])
    F = np.concatenate([np.tile(fa, (n, 1)), np.tile(fb, (n, 1))])
    layers = {}
    for kernel in ("full", "spatial"):
        layer = SpaLayer(4, 4, np.random.default_rng(1), n_sp=1, gamma=gamma, kernel=kernel)
        layer.latents.data[:] = sharp * fa
        layers[kernel] = layer
    return X, F, fa, fb, layers


def cosine(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


class TestSpPositions:
    def test_symmetric_logits(self):
        X = np.array([[0.0, 0, 0], [1.0, 0, 0]])
        F = np.array([[1.0, 0.0], [1.0, 0.0]])
        Z = np.array([[0.0, 1.0]])
        np.testing.assert_allclose(sp_positions(F, X, Z).data, [[0.5, 0, 0]], atol=1e-15)

    def test_saturated_logit(self, rng):
        X = rng.normal(size=(6, 3))
        F = np.zeros((6, 2))
        F[4] = [1000.0, 0.0]
        Z = np.array([[1.0, 0.0]])
        np.testing.assert_allclose(sp_positions(F, X, Z).data[0], X[4], atol=1e-9)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31), st.integers(1, 64), st.integers(1, 8), st.floats(0.1, 30.0))
    def test_inside_convex_hull(self, seed, n, s, spread):
        rng = np.random.default_rng(seed)
        X, F = rng.normal(size=(n, 3)), rng.normal(size=(n, 5))
        delta = sp_positions(F, X, spread * rng.normal(size=(s, 5))).data
        assert max(hull_residual(X, d) for d in delta) <= 1e-9

    def test_empty_cloud(self):
        with pytest.raises(ValueError):
            sp_positions(np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((1, 2)))


class TestSpatialKernel:
    def test_coincident(self):
        assert spatial_kernel([1.0, 2, 3], [1.0, 2, 3], 5.0).item() == 1.0

    def test_unit_distance(self):
        assert abs(spatial_kernel([0.0, 0, 0], [0.0, 1, 0], 1.0).item() - np.exp(-1)) < 1e-15

    @given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.05, 2.0))
    def test_monotone_in_gamma(self, g1, g2, d):
        if g1 == g2:
            return
        lo, hi = sorted([g1, g2])
        a = spatial_kernel([0.0, 0, 0], [d, 0, 0], lo).item()
        b = spatial_kernel([0.0, 0, 0], [d, 0, 0], hi).item()
        assert b < a

    def test_batched_shape(self, rng):
        assert spatial_kernel(rng.normal(size=(2, 4, 3)), rng.normal(size=(2, 7, 3)), 1.0).shape == (2, 4, 7)


class TestSemanticKernel:
    def test_single_point(self, rng):
        assert semantic_kernel(rng.normal(size=(3, 4)), rng.normal(size=(1, 4))).data.tolist() == [[1.0]] * 3

    def test_zero_latent_is_uniform(self, rng):
        h = semantic_kernel(np.zeros((2, 4)), rng.normal(size=(5, 4))).data
        np.testing.assert_allclose(h, 0.2, atol=1e-15)

    @settings(max_examples=100)
    @given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 8), st.floats(0.01, 50.0))
    def test_rows_sum_to_one(self, seed, n, s, scale):
        rng = np.random.default_rng(seed)
        h = semantic_kernel(scale * rng.normal(size=(s, 6)), rng.normal(size=(n, 6))).data
        assert h.shape == (s, n)
        assert np.all(np.abs(h.sum(axis=-1) - 1.0) <= 1e-12)


class TestAggregate:
    def test_constant_features_flat_kernel(self, rng):
        v = rng.normal(size=4)
        F = np.tile(v, (6, 1))
        X = rng.normal(size=(6, 3))
        Z = rng.normal(size=(2, 4))
        h = semantic_kernel(Z, F)
        g = spatial_kernel(sp_positions(F, X, Z), X, 1e-12)
        np.testing.assert_allclose(aggregate(F, g, h).data, np.tile(v, (2, 1)), atol=1e-10)

    def test_sharp_kernel_picks_point(self, rng):
        X, F = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        h = semantic_kernel(rng.normal(size=(1, 4)), F)
        g = spatial_kernel(X[2:3], X, 1e6)
        np.testing.assert_allclose(aggregate(F, g, h).data[0], h.data[0, 2] * F[2], atol=1e-12)

    def test_double_loop_oracle(self, rng):
        X, F, Z = rng.normal(size=(9, 3)), rng.normal(size=(9, 5)), rng.normal(size=(3, 5))
        gamma = 2.5
        psi = aggregate(F, spatial_kernel(sp_positions(F, X, Z), X, gamma), semantic_kernel(Z, F)).data
        expect = np.zeros((3, 5))
        for s in range(3):
            logits = F @ Z[s]
            h = np.exp(logits - logits.max())
            h /= h.sum()
            d = (h[:, None] * X).sum(0)
            for i in range(9):
                expect[s] += np.exp(-gamma * np.sum((d - X[i]) ** 2)) * h[i] * F[i]
        np.testing.assert_allclose(psi, expect, atol=1e-12)

    def test_renormalize(self, rng):
        F = rng.normal(size=(4, 3))
        g, h = Tensor(rng.uniform(size=(2, 4))), Tensor(rng.uniform(size=(2, 4)))
        w = g.data * h.data
        np.testing.assert_allclose(aggregate(F, g, h, True).data, (w / w.sum(1, keepdims=True)) @ F, atol=1e-12)


class TestSpaForward:
    def test_single_sp_point(self, rng):
        layer = SpaLayer(4, 3, rng, n_sp=1)
        X, F = rng.normal(size=(7, 3)), rng.normal(size=(7, 4))
        state = sp_state(X, F, layer)
        _, a = cwpa(X, F, state.delta, state.psi, layer.cwpa, AttnConfig(), return_weights=True)
        assert np.array_equal(a.data, np.ones_like(a.data))

    def test_permutation_equivariant(self, rng):
        layer = SpaLayer(4, 3, rng, n_sp=4)
        X, F = rng.normal(size=(12, 3)), rng.normal(size=(12, 4))
        perm = rng.permutation(12)
        a = spa_forward(X, F, layer, AttnConfig()).data
        b = spa_forward(X[perm], F[perm], layer, AttnConfig()).data
        np.testing.assert_allclose(b, a[perm], atol=1e-12)

    def test_flops_linear_in_n(self, rng):
        layer = SpaLayer(8, 8, rng, n_sp=4)
        counts = []
        for n in (32, 64, 128):
            X, F = rng.normal(size=(n, 3)), rng.normal(size=(n, 8))
            with nx.no_grad(), nx.count_ops() as c:
                spa_forward(X, F, layer, AttnConfig())
            counts.append(c.flops)
            assert c.flops == count_spa(n, 4, 8).flops
        assert counts[1] == 2 * counts[0] and counts[2] == 2 * counts[1]

    def test_batched_matches_unbatched(self, rng):
        layer = SpaLayer(4, 3, rng, n_sp=3)
        X, F = rng.normal(size=(2, 10, 3)), rng.normal(size=(2, 10, 4))
        q = np.array([[0, 3, 5], [9, 1, 1]])
        out = spa_forward(X, F, layer, AttnConfig(), query_index=q).data
        for b in range(2):
            np.testing.assert_allclose(out[b], spa_forward(X[b], F[b], layer, AttnConfig()).data[q[b]], atol=1e-12)

    def test_gradients_including_positions(self, rng):
        layer = SpaLayer(3, 3, rng, n_sp=2, gamma=2.0, hidden=4)
        X = Tensor(rng.uniform(-1, 1, size=(6, 3)), requires_grad=True)
        F = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        w = rng.normal(size=(6, 3))
        worst, checked, kinks = grad_check(lambda: nx.sum(nx.mul(spa_forward(X, F, layer, AttnConfig()), w)),
                                           layer.parameters() + [X, F])
        assert worst < 1e-4 and kinks <= checked // 20

    def test_layer_validation(self, rng):
        with pytest.raises(ValueError):
            SpaLayer(4, 4, rng, n_sp=0)
        with pytest.raises(ValueError):
            SpaLayer(4, 4, rng, kernel="gaussian")


class TestVariants:
    def test_fps_with_all_points_is_global(self, rng):
        layer = SpaLayer(4, 3, rng, n_sp=8, kernel="fps", gamma=1e-9)
        X, F = rng.normal(size=(8, 3)), rng.normal(size=(8, 4))
        state = sp_state(X, F, layer)
        assert sorted(map(tuple, state.delta.data)) == sorted(map(tuple, X))

    def test_fps_is_deterministic_and_differs(self, rng):
        layer = SpaLayer(4, 3, rng, n_sp=3)
        X, F = rng.normal(size=(16, 3)), rng.normal(size=(16, 4))
        a = spa_ablation_fps(X, F, layer, AttnConfig()).data
        b = spa_ablation_fps(X, F, layer, AttnConfig()).data
        assert np.array_equal(a, b)
        assert not np.allclose(a, spa_forward(X, F, layer, AttnConfig()).data)
        assert layer.kernel == "full"

    def test_spatial_only_uses_uniform_h(self, rng):
        layer = SpaLayer(4, 3, rng, n_sp=2, kernel="spatial")
        X, F = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
        state = sp_state(X, F, layer)
        np.testing.assert_allclose(state.h.data, 0.2)
        np.testing.assert_allclose(state.delta.data, sp_positions(F, X, layer.latents).data)

    def test_gsa_chunking(self, rng):
        p = CwpaParams(4, 3, rng)
        X, F = rng.normal(size=(11, 3)), rng.normal(size=(11, 4))
        np.testing.assert_allclose(gsa_forward(X, F, p, AttnConfig(), chunk=4).data,
                                   gsa_forward(X, F, p, AttnConfig()).data, atol=1e-12)


class TestDisentanglement:
    def test_product_kernel_isolates_cluster(self):
        X, F, fa, fb, layers = two_cluster_probe()
        psi = sp_state(X, F, layers["full"]).psi.data[0]
        assert cosine(psi, fa) >= 0.99

    def test_spatial_kernel_blends(self):
        X, F, fa, fb, layers = two_cluster_probe()
        psi = sp_state(X, F, layers["spatial"]).psi.data[0]
        assert cosine(psi, fa) < 0.9 and cosine(psi, fb) < 0.9

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmmi.diffkernel import (
    GradBuffer,
    MlpParams,
    divergence_exact,
    divergence_hutchinson,
    fm_loss_and_grads,
    hutchinson_samples,
    init_mlp,
    mlp_forward,
)
from fmmi.errors import DimensionError, ValidationError


def naive_forward(params, x):
    """Per-element loop evaluation, independent of the vectorised path."""
    out = []
    for row in x:
        h = [float(v) for v in row]
        for k, (w, b) in enumerate(params.layers):
            z = []
            for i in range(w.shape[0]):
                acc = float(b[i])
                for j in range(w.shape[1]):
                    acc += float(w[i, j]) * h[j]
                z.append(acc)
            h = z if k == len(params.layers) - 1 else [math.tanh(v) for v in z]
        out.append(h)
    return np.array(out)


def fd_gradient(params, x, y, step=1e-5):
    flat = params.flat()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        up, dn = flat.copy(), flat.copy()
        up[i] += step
        dn[i] -= step
        lu, _ = fm_loss_and_grads(params.with_flat(up), x, y)
        ld, _ = fm_loss_and_grads(params.with_flat(dn), x, y)
        grad[i] = (lu - ld) / (2 * step)
    return grad


def fd_divergence(params, x, d, step=1e-5):
    div = np.zeros(x.shape[0])
    for i in range(d):
        up, dn = x.copy(), x.copy()
        up[:, i] += step
        dn[:, i] -= step
        div += (mlp_forward(params, up)[:, i] - mlp_forward(params, dn)[:, i]) / (2 * step)
    return div


def grads_close(analytic, numeric, rtol=1e-5, atol_floor=1e-8):
    # relative error with a floor for entries that are essentially zero
    scale = np.maximum(np.abs(numeric), np.abs(analytic))
    err = np.abs(analytic - numeric)
    return np.all(err <= rtol * np.maximum(scale, atol_floor / rtol))


class TestForward:
    def test_zero_network(self):
        p = MlpParams([(np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 3)), np.zeros(2))])
        out = mlp_forward(p, np.random.default_rng(0).normal(size=(5, 2)))
        assert np.all(out == 0.0)

    def test_identity_layer(self):
        p = MlpParams([(np.eye(2), np.zeros(2))])
        np.testing.assert_array_equal(mlp_forward(p, [[1.0, 2.0]]), [[1.0, 2.0]])

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(1)
        p = init_mlp(4, 3, 7, 2, rng)
        x = rng.normal(size=(6, 4))
        np.testing.assert_allclose(mlp_forward(p, x), naive_forward(p, x), rtol=1e-12, atol=0)

    def test_shape_mismatch(self):
        p = init_mlp(3, 2, 4, 1, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            mlp_forward(p, np.zeros((2, 4)))

    def test_non_finite_input(self):
        p = init_mlp(2, 2, 4, 1, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            mlp_forward(p, [[np.nan, 0.0]])

    def test_layer_chain_checked(self):
        with pytest.raises(DimensionError):
            MlpParams([(np.zeros((3, 2)), np.zeros(3)), (np.zeros((2, 4)), np.zeros(2))])


class TestLossAndGrads:
    def test_zero_residual(self):
        rng = np.random.default_rng(2)
        p = init_mlp(3, 2, 5, 1, rng)
        x = rng.normal(size=(8, 3))
        loss, g = fm_loss_and_grads(p, x, mlp_forward(p, x))
        assert loss == 0.0
        assert np.all(g.flat() == 0.0)

    def test_linear_least_squares_gradient(self):
        rng = np.random.default_rng(3)
        w = rng.normal(size=(2, 3))
        b = rng.normal(size=2)
        p = MlpParams([(w, b)])
        x = rng.normal(size=(10, 3))
        t = rng.normal(size=(10, 2))
        _, g = fm_loss_and_grads(p, x, t)
        resid = x @ w.T + b - t
        np.testing.assert_allclose(g.layers[0][0], (2 / 10) * resid.T @ x, rtol=1e-13)
        np.testing.assert_allclose(g.layers[0][1], (2 / 10) * resid.sum(axis=0), rtol=1e-13)

    @pytest.mark.parametrize("depth", [0, 1, 2])
    def test_finite_differences(self, depth):
        rng = np.random.default_rng(10 + depth)
        p = init_mlp(3, 2, 5, depth, rng)
        x = rng.normal(size=(7, 3))
        y = rng.normal(size=(7, 2))
        _, g = fm_loss_and_grads(p, x, y)
        assert grads_close(g.flat(), fd_gradient(p, x, y))

    def test_empty_batch(self):
        p = init_mlp(2, 1, 3, 1, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            fm_loss_and_grads(p, np.zeros((0, 2)), np.zeros((0, 1)))

    def test_target_shape(self):
        p = init_mlp(2, 1, 3, 1, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            fm_loss_and_grads(p, np.zeros((3, 2)), np.zeros((3, 2)))

    def test_grad_buffer_mirrors_params(self):
        p = init_mlp(4, 3, 6, 2, np.random.default_rng(0))
        _, g = fm_loss_and_grads(p, np.ones((2, 4)), np.zeros((2, 3)))
        assert isinstance(g, GradBuffer)
        assert [(gw.shape, gb.shape) for gw, gb in g.layers] == \
            [(w.shape, b.shape) for w, b in p.layers]


class TestDivergence:
    def test_affine_field(self):
        rng = np.random.default_rng(4)
        a = rng.normal(size=(3, 3))
        w = np.hstack([a, rng.normal(size=(3, 1))])  # trailing time column
        p = MlpParams([(w, rng.normal(size=3))])
        div = divergence_exact(p, rng.normal(size=(5, 4)), 3)
        np.testing.assert_allclose(div, np.trace(a), rtol=1e-14)

    def test_constant_field(self):
        rng = np.random.default_rng(5)
        p = init_mlp(3, 2, 6, 1, rng)
        p.layers[-1] = (np.zeros_like(p.layers[-1][0]), np.array([1.5, -2.0]))
        assert np.all(divergence_exact(p, rng.normal(size=(4, 3)), 2) == 0.0)

    @pytest.mark.parametrize("depth", [1, 2, 3])
    def test_finite_differences(self, depth):
        rng = np.random.default_rng(20 + depth)
        p = init_mlp(4, 3, 8, depth, rng)
        x = rng.normal(size=(9, 4))
        np.testing.assert_allclose(divergence_exact(p, x, 3), fd_divergence(p, x, 3), atol=1e-5)

    def test_linearity(self):
        # two networks summed at the output = one network with stacked hidden units
        rng = np.random.default_rng(6)
        p1 = init_mlp(3, 2, 4, 1, rng)
        p2 = init_mlp(3, 2, 5, 1, rng)
        (w1a, b1a), (w1b, b1b) = p1.layers
        (w2a, b2a), (w2b, b2b) = p2.layers
        both = MlpParams([(np.vstack([w1a, w2a]), np.concatenate([b1a, b2a])),
                          (np.hstack([w1b, w2b]), b1b + b2b)])
        x = rng.normal(size=(6, 3))
        np.testing.assert_allclose(
            divergence_exact(both, x, 2),
            divergence_exact(p1, x, 2) + divergence_exact(p2, x, 2),
            rtol=1e-13, atol=1e-14,
        )

    def test_spatial_mismatch(self):
        p = init_mlp(3, 2, 4, 1, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            divergence_exact(p, np.zeros((1, 3)), 3)

    def test_chunking_consistent(self):
        rng = np.random.default_rng(7)
        p = init_mlp(3, 2, 4, 2, rng)
        x = rng.normal(size=(5000, 3))
        full = divergence_exact(p, x, 2)
        np.testing.assert_array_equal(full[4000:], divergence_exact(p, x[4000:], 2))


class TestHutchinson:
    def test_zero_field(self):
        p = MlpParams([(np.zeros((4, 3)), np.zeros(4)), (np.zeros((2, 4)), np.zeros(2))])
        s = hutchinson_samples(p, np.ones((3, 3)), 2, 5, np.random.default_rng(0))
        assert np.all(s == 0.0)

    @pytest.mark.parametrize("depth", [0, 1, 2])
    def test_basis_probes_recover_trace(self, depth):
        rng = np.random.default_rng(30 + depth)
        p = init_mlp(5, 4, 6, depth, rng)
        x = rng.normal(size=(11, 5))
        np.testing.assert_allclose(
            divergence_hutchinson(p, x, 4, 1, probes="basis"),
            divergence_exact(p, x, 4),
            rtol=1e-12, atol=1e-14,
        )

    def test_affine_field_concentration(self):
        rng = np.random.default_rng(8)
        a = rng.normal(size=(3, 3))
        p = MlpParams([(np.hstack([a, np.zeros((3, 1))]), np.zeros(3))])
        s = hutchinson_samples(p, np.zeros((1, 4)), 3, 10_000, rng)[:, 0]
        se = s.std(ddof=1) / np.sqrt(s.size)
        assert abs(s.mean() - np.trace(a)) <= 3 * se

    def test_rademacher_entries(self):
        # for a diagonal Jacobian every Rademacher probe gives the trace exactly
        p = MlpParams([(np.hstack([np.diag([1.0, 2.0, -0.5]), np.zeros((3, 1))]), np.zeros(3))])
        s = hutchinson_samples(p, np.zeros((4, 4)), 3, 7, np.random.default_rng(0))
        np.testing.assert_allclose(s, 2.5)

    def test_unbiased_over_seeds(self):
        rng = np.random.default_rng(9)
        p = init_mlp(4, 3, 8, 1, rng)
        x = rng.normal(size=(6, 4))
        exact = divergence_exact(p, x, 3)
        ests = np.array([divergence_hutchinson(p, x, 3, 4, np.random.default_rng(s))
                         for s in range(400)])
        diff = ests - exact
        se = diff.std(axis=0, ddof=1) / np.sqrt(diff.shape[0])
        assert np.all(np.abs(diff.mean(axis=0)) <= 3.5 * se)

    def test_deterministic(self):
        p = init_mlp(3, 2, 5, 1, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 3))
        a = divergence_hutchinson(p, x, 2, 3, np.random.default_rng(42))
        b = divergence_hutchinson(p, x, 2, 3, np.random.default_rng(42))
        assert a.tobytes() == b.tobytes()

    def test_needs_probes(self):
        p = init_mlp(3, 2, 5, 1, np.random.default_rng(0))
        with pytest.raises(ValidationError):
            divergence_hutchinson(p, np.zeros((1, 3)), 2, 0, np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), width=st.integers(1, 6), depth=st.integers(1, 2),
       rows=st.integers(1, 5))
def test_property_gradients_match_finite_differences(seed, width, depth, rows):
    rng = np.random.default_rng(seed)
    p = init_mlp(3, 2, width, depth, rng)
    x = rng.normal(size=(rows, 3))
    y = rng.normal(size=(rows, 2))
    _, g = fm_loss_and_grads(p, x, y)
    assert grads_close(g.flat(), fd_gradient(p, x, y))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_property_forward_deterministic(seed):
    rng = np.random.default_rng(seed)
    p = init_mlp(3, 2, 4, 1, rng)
    x = rng.normal(size=(3, 3))
    assert mlp_forward(p, x).tobytes() == mlp_forward(p.copy(), x.copy()).tobytes()

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radoninv.core import (GeometryError, ImageGeometry, Sinogram, SinogramGeometry,
                           fov_flat_indices)
from radoninv.inversion import (BLOCK, AdamState, InversionLayer, NonFiniteGradientError,
                                SchedulerConfig, adam_step, layer_backward, layer_forward,
                                learning_rate, triangle_wave)
from radoninv.maskgen import SinogramMask, projection_masks, tile_patches
from radoninv.objective import mae_grad, mae_loss

SMALL_I = ImageGeometry.square(8)
SMALL_S = SinogramGeometry(6, 8)


def random_layer(patch_size=4, seed=0, dtype=np.float64, igeom=SMALL_I, sgeom=SMALL_S):
    tiling = tile_patches(igeom, patch_size)
    masks = projection_masks(tiling, sgeom, 1)
    layer = InversionLayer.initialized(tiling, masks, seed, dtype=dtype)
    return layer


def random_sino(rng, sgeom=SMALL_S):
    return Sinogram(sgeom, rng.random(sgeom.shape))


def test_zero_weights_give_zero_image(rng):
    tiling = tile_patches(SMALL_I, 4)
    layer = InversionLayer(tiling, projection_masks(tiling, SMALL_S))
    assert not layer_forward(layer, random_sino(rng)).values.any()


def test_full_mask_matches_dense_product(rng):
    tiling = tile_patches(SMALL_I, 8)
    mask = SinogramMask.full(tiling.patches[0].patch_id, SMALL_S)
    pix = fov_flat_indices(SMALL_I)
    dense = rng.standard_normal((pix.size, SMALL_S.size))
    layer = InversionLayer(tiling, [mask], [dense], dtype=np.float64)
    s = random_sino(rng)
    expected = np.zeros(SMALL_I.num_pixels)
    for i, p in enumerate(pix):
        expected[p] = sum(dense[i, j] * s.values.ravel()[j] for j in range(SMALL_S.size))
    np.testing.assert_allclose(layer_forward(layer, s).values.ravel(), expected,
                               rtol=0, atol=1e-12)
    # bit-for-bit against a dense layer evaluated with the same blocked product
    block = np.zeros((BLOCK, SMALL_S.size))
    block[0] = s.values.ravel()
    direct = np.zeros(SMALL_I.num_pixels)
    direct[pix] = (block[:, np.arange(SMALL_S.size)] @ dense.T)[0]
    assert np.array_equal(layer.forward(s.values)[0].ravel(), direct)


def test_forward_is_additive(rng):
    layer = random_layer()
    s1, s2 = random_sino(rng), random_sino(rng)
    both = layer_forward(layer, Sinogram(SMALL_S, s1.values + s2.values)).values
    parts = layer_forward(layer, s1).values + layer_forward(layer, s2).values
    assert np.max(np.abs(both - parts)) <= 1e-10 * np.max(np.abs(parts))


def test_pixels_outside_fov_stay_zero(rng):
    layer = random_layer()
    out = layer_forward(layer, random_sino(rng)).values
    assert not out[~SMALL_I.fov_mask()].any()


def test_geometry_mismatch_raises(rng):
    layer = random_layer()
    with pytest.raises(GeometryError):
        layer_forward(layer, Sinogram(SinogramGeometry(5, 8), np.zeros((5, 8))))
    with pytest.raises(GeometryError):
        layer_backward(layer, random_sino(rng), np.zeros((3, 3)))


def test_zero_upstream_gives_zero_gradient(rng):
    layer = random_layer()
    grads = layer_backward(layer, random_sino(rng), np.zeros(SMALL_I.shape))
    assert all(not g.any() for g in grads)


def _finite_difference_check(layer, s, objective, grads, rng, count=50, h=1e-4):
    coords = []
    for _ in range(count):
        k = int(rng.integers(len(layer.weights)))
        idx = tuple(int(rng.integers(n)) for n in layer.weights[k].shape)
        coords.append((k, idx))
    for k, idx in coords:
        w = layer.weights[k]
        keep = w[idx]
        w[idx] = keep + h
        up = objective()
        w[idx] = keep - h
        down = objective()
        w[idx] = keep
        numeric = (up - down) / (2 * h)
        analytic = grads[k][idx]
        assert abs(analytic - numeric) / (abs(analytic) + 1e-8) < 1e-4


def test_gradient_matches_finite_difference(rng):
    layer = random_layer(seed=1)
    s = random_sino(rng)
    probe = rng.standard_normal(SMALL_I.shape) * SMALL_I.fov_mask()

    def objective():
        return float((layer_forward(layer, s).values * probe).sum())

    _finite_difference_check(layer, s, objective, layer_backward(layer, s, probe), rng)


def test_mae_gradient_through_layer(rng):
    layer = random_layer(seed=2)
    s = random_sino(rng)
    target = rng.random(SMALL_I.shape) * SMALL_I.fov_mask() + 5.0  # keeps signs away from 0

    def objective():
        return mae_loss(layer_forward(layer, s).values, target)

    up = mae_grad(layer_forward(layer, s).values, target)
    _finite_difference_check(layer, s, objective, layer_backward(layer, s, up), rng)


def test_batched_forward_is_bit_exact():
    igeom, sgeom = ImageGeometry.square(32), SinogramGeometry(24, 32)
    layer = random_layer(8, seed=3, dtype=np.float32, igeom=igeom, sgeom=sgeom)
    stack = np.random.default_rng(4).random((37, *sgeom.shape)).astype(np.float32)
    batched = layer.forward(stack)
    for i in (0, 15, 16, 36):
        assert np.array_equal(batched[i], layer.forward(stack[i])[0])


def test_flop_count():
    layer = random_layer()
    expected = 2 * sum(len(b) * len(p) for b, p in zip(layer.bins, layer.pixels))
    assert layer.flops() == expected
    dense = 2 * SMALL_S.size * len(fov_flat_indices(SMALL_I))
    assert any(len(b) < SMALL_S.size for b in layer.bins)
    assert layer.flops() < dense


def test_weight_shape_is_validated():
    tiling = tile_patches(SMALL_I, 8)
    mask = SinogramMask.full(tiling.patches[0].patch_id, SMALL_S)
    with pytest.raises(GeometryError):
        InversionLayer(tiling, [mask], [np.zeros((3, 3))])


# -- Adam ---------------------------------------------------------------------

def scalar_adam(w, grads, lr, b1=0.5, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def test_adam_zero_gradient_keeps_weights():
    w = [np.array([[1.0, -2.0]])]
    state = AdamState.zeros_like(w)
    adam_step(state, w, [np.zeros((1, 2))], 1e-3)
    assert state.t == 1
    np.testing.assert_array_equal(w[0], [[1.0, -2.0]])


def test_adam_first_step_matches_scalar_oracle():
    w = [np.array([[0.3]])]
    state = AdamState.zeros_like(w)
    adam_step(state, w, [np.array([[1.0]])], 1e-3)
    assert abs(w[0][0, 0] - scalar_adam(0.3, [1.0], 1e-3)) < 1e-15
    assert abs((0.3 - w[0][0, 0]) - 1e-3 / (1 + 1e-8)) < 1e-15


def test_adam_second_step_not_larger():
    w = [np.array([[0.0]])]
    state = AdamState.zeros_like(w)
    adam_step(state, w, [np.array([[1.0]])], 1e-3)
    first = -w[0][0, 0]
    adam_step(state, w, [np.array([[1.0]])], 1e-3)
    second = -w[0][0, 0] - first
    assert second <= first
    assert abs(w[0][0, 0] - scalar_adam(0.0, [1.0, 1.0], 1e-3)) < 1e-15


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_adam_matches_oracle_over_several_steps(grads):
    w = [np.array([[0.7]])]
    state = AdamState.zeros_like(w)
    for g in grads:
        adam_step(state, w, [np.array([[g]])], 2e-3)
    assert abs(w[0][0, 0] - scalar_adam(0.7, grads, 2e-3)) < 1e-12


def test_adam_names_the_bad_patch():
    w = [np.zeros((1, 1)), np.zeros((1, 1))]
    state = AdamState.zeros_like(w)
    with pytest.raises(NonFiniteGradientError) as err:
        adam_step(state, w, [np.zeros((1, 1)), np.array([[np.nan]])], 1e-3)
    assert err.value.patch_id == 1
    assert state.t == 0


# -- schedule -----------------------------------------------------------------

def test_schedule_examples():
    cfg = SchedulerConfig()
    assert learning_rate(0, cfg) == 0.5e-5
    assert learning_rate(1000, cfg) == pytest.approx(0.5e-5, abs=1e-20)
    direct = (9.0e-5 - 0.5e-5) * 0.99995 ** 500 + 0.5e-5
    assert learning_rate(500, cfg) == pytest.approx(direct, rel=1e-14)
    assert abs(direct - 8.79e-5) < 5e-8


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 200_000))
def test_schedule_bounds_and_period(k):
    cfg = SchedulerConfig()
    eta = learning_rate(k, cfg)
    assert cfg.eta_min <= eta <= cfg.eta_max
    assert triangle_wave(k) == pytest.approx(triangle_wave(k + 1000), abs=1e-9)
    assert triangle_wave(1000 * (k % 50) + 500) == 1.0
    assert learning_rate(1000 * (k % 200), cfg) == pytest.approx(cfg.eta_min, abs=1e-20)


def test_schedule_errors():
    with pytest.raises(ValueError):
        learning_rate(-1)
    with pytest.raises(ValueError):
        SchedulerConfig(eta_min=2e-5, eta_max=1e-5)

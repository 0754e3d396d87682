from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radoninv.core import ImageGeometry, Sinogram, SinogramGeometry
from radoninv.phantom import (InvalidSpecError, PhantomSpec, apply_poisson, ellipse_mask,
                              generate_phantom, thin_counts)
from radoninv.projector import forward_project
from conftest import disk_image


def test_empty_spec_gives_zero_image(desk_igeom):
    spec = PhantomSpec(num_ellipses=(0, 0), background_intensity=None)
    assert not generate_phantom(spec, desk_igeom, 3).values.any()


def test_centered_ellipse_matches_membership_oracle():
    geom = ImageGeometry.square(32)
    spec = PhantomSpec(num_ellipses=(1, 1), intensity=(1, 1), axes=(9, 9),
                       center_jitter=(0, 0), rotation=(0, 0), background_intensity=None)
    img = generate_phantom(spec, geom, 0).values
    for r in range(32):
        for c in range(32):
            x, y = c - 15.5, 15.5 - r
            assert img[r, c] == (1.0 if (x / 9) ** 2 + (y / 9) ** 2 <= 1 else 0.0)


def test_axis_aligned_ellipse_respects_orientation():
    geom = ImageGeometry.square(32)
    mask = ellipse_mask(geom, 0, 0, 10, 3, 0.0)
    rows, cols = np.nonzero(mask)
    assert np.ptp(cols) > np.ptp(rows)
    turned = ellipse_mask(geom, 0, 0, 10, 3, math.pi / 2)
    rows, cols = np.nonzero(turned)
    assert np.ptp(rows) > np.ptp(cols)


def test_same_seed_bit_identical(desk_igeom):
    a = generate_phantom(PhantomSpec(), desk_igeom, 11).values
    b = generate_phantom(PhantomSpec(), desk_igeom, 11).values
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != generate_phantom(PhantomSpec(), desk_igeom, 12).values.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 63 - 1))
def test_phantoms_nonnegative_and_zero_outside_fov(seed):
    geom = ImageGeometry.square(48)
    img = generate_phantom(PhantomSpec(center_jitter=(0, 30)), geom, seed).values
    assert img.min() >= 0
    assert not img[~geom.fov_mask()].any()


def test_ellipses_stay_inside_fov_without_background():
    geom = ImageGeometry.square(40)
    spec = PhantomSpec(num_ellipses=(1, 1), axes=(5, 8), center_jitter=(0, 50),
                       background_intensity=None)
    x, y = geom.pixel_centers()
    for seed in range(50):
        img = generate_phantom(spec, geom, seed).values
        # half a pixel of clearance from the FOV edge means nothing was clipped
        assert img.any()
        assert np.hypot(x, y)[img > 0].max() <= geom.fov_radius - 0.5


def test_unfittable_spec_is_rejected():
    spec = PhantomSpec(num_ellipses=(1, 1), axes=(30, 40), center_jitter=(5, 5))
    with pytest.raises(InvalidSpecError):
        generate_phantom(spec, ImageGeometry.square(32), 0)
    with pytest.raises(InvalidSpecError):
        PhantomSpec(intensity=(2, 1))


def test_spec_from_lines():
    spec = PhantomSpec.from_lines(["num_ellipses = 1, 3", "# comment", "background_intensity = none",
                                   "axes = 4"])
    assert spec.num_ellipses == (1, 3) and spec.background_intensity is None
    assert spec.axes == (4.0, 4.0)
    with pytest.raises(InvalidSpecError):
        PhantomSpec.from_lines(["colour = 1, 2"])


SG = SinogramGeometry(10, 8)


def test_poisson_single_bin_support():
    values = np.zeros(SG.shape)
    values[3, 4] = 2.5
    out = apply_poisson(Sinogram(SG, values), 1000, 1).values
    assert np.count_nonzero(out) <= 1 and out[3, 4] > 0
    assert abs(out.sum() - 1000) < 5 * math.sqrt(1000)


def test_poisson_total_over_seeds(desk_igeom, desk_sgeom):
    sino = forward_project(disk_image_grid(desk_igeom), desk_sgeom)
    totals = np.array([apply_poisson(sino, 200000, s).total for s in range(100)])
    assert np.all(np.abs(totals - 200000) < 5 * math.sqrt(200000))


def disk_image_grid(geom):
    from radoninv.core import ImageGrid
    return ImageGrid(geom, disk_image(geom, 20))


def test_poisson_bin_expectation():
    rng = np.random.default_rng(0)
    values = rng.uniform(0.5, 2, SG.shape)
    sino = Sinogram(SG, values)
    draws = np.stack([apply_poisson(sino, 500, s).values for s in range(1000)])
    mean = values * 500 / values.sum()
    sigma = np.sqrt(mean)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 5 * sigma / math.sqrt(1000))


def test_poisson_errors():
    with pytest.raises(ValueError):
        apply_poisson(Sinogram(SG, np.zeros(SG.shape)), 10, 0)
    with pytest.raises(ValueError):
        apply_poisson(Sinogram(SG, np.ones(SG.shape)), 0, 0)


def test_thinning_identity_and_binomial_band():
    counts = np.full(SG.shape, 1000.0)
    sino = Sinogram(SG, counts)
    assert np.array_equal(thin_counts(sino, 1.0, 5).values, counts)
    kept = thin_counts(sino, 0.5, 5).values
    assert np.all(np.abs(kept - 500) < 5 * math.sqrt(1000 * 0.25))


def test_complementary_thinnings_restore_totals_in_expectation():
    rng = np.random.default_rng(4)
    counts = rng.poisson(40, SG.shape).astype(float)
    sino = Sinogram(SG, counts)
    sums = []
    for s in range(200):
        half = thin_counts(sino, 0.5, s).values
        rest = counts - half
        sums.append(half.sum() + thin_counts(Sinogram(SG, rest), 1.0, s).values.sum())
        assert np.all(rest >= 0)
    assert np.allclose(sums, counts.sum())
    halves = [thin_counts(sino, 0.5, s).total for s in range(200)]
    sd = math.sqrt(counts.sum() * 0.25)
    assert abs(np.mean(halves) - counts.sum() / 2) < 5 * sd / math.sqrt(200)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32), st.floats(0.05, 1.0))
def test_thinning_nonnegative_integers_within_support(seed, fraction):
    counts = np.random.default_rng(seed).poisson(3, SG.shape).astype(float)
    out = thin_counts(Sinogram(SG, counts), fraction, seed).values
    assert np.all(out >= 0) and np.all(out == np.rint(out))
    assert np.all(out <= counts)


def test_thinning_rejects_bad_input():
    with pytest.raises(ValueError):
        thin_counts(Sinogram(SG, np.ones(SG.shape)), 0.0, 0)
    with pytest.raises(ValueError):
        thin_counts(Sinogram(SG, np.full(SG.shape, 0.5)), 0.5, 0)

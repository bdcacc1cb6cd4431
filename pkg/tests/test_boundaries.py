import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from edgeseg.boundaries import (
    BoundaryBand,
    LabelMap,
    boundary_loss_weights,
    compute_beta,
    dilate_diamond,
    extract_class_boundaries,
    make_boundary_target,
    truncated_edt,
)


def brute_boundaries(v, ignore=255):
    h, w = v.shape
    out = np.zeros((h, w), bool)
    for y in range(h):
        for x in range(w):
            if v[y, x] == ignore:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and v[yy, xx] != ignore and v[yy, xx] != v[y, x]:
                    out[y, x] = True
    return out


def brute_dilate(mask, r):
    h, w = mask.shape
    ys, xs = np.nonzero(mask)
    out = np.zeros_like(mask)
    for y in range(h):
        for x in range(w):
            if ys.size and (np.abs(ys - y) + np.abs(xs - x)).min() <= r:
                out[y, x] = True
    return out


def brute_edt(mask, trunc):
    bg = np.argwhere(~mask)
    out = np.zeros(mask.shape)
    for y, x in np.argwhere(mask):
        d = np.sqrt(((bg - (y, x)) ** 2).sum(axis=1)).min() if len(bg) else np.inf
        out[y, x] = min(d, trunc)
    return out


def random_labels(rng, hw, k=5, block=4, ignore_frac=0.0):
    coarse = rng.integers(0, k, (hw[0] // block + 1, hw[1] // block + 1))
    v = np.kron(coarse, np.ones((block, block), int))[: hw[0], : hw[1]]
    if ignore_frac:
        v[rng.random(hw) < ignore_frac] = 255
    return v


@pytest.mark.parametrize("seed", range(8))
def test_boundary_scan_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    v = random_labels(rng, (17, 23), block=rng.integers(1, 5), ignore_frac=0.05)
    band = extract_class_boundaries(LabelMap(v, 5))
    np.testing.assert_array_equal(band.mask, brute_boundaries(v))


def test_ignore_pixels_never_create_transitions():
    v = np.zeros((6, 6), int)
    v[:, 3:] = 255
    assert not extract_class_boundaries(LabelMap(v, 2)).mask.any()


@pytest.mark.parametrize("r", [0, 1, 2, 3, 5])
def test_diamond_dilation_is_l1_ball(r):
    rng = np.random.default_rng(r)
    mask = rng.random((20, 20)) < 0.03
    np.testing.assert_array_equal(dilate_diamond(BoundaryBand(mask), r).mask, brute_dilate(mask, r))


def test_dilation_of_single_pixel_counts():
    mask = np.zeros((21, 21), bool)
    mask[10, 10] = True
    for r in range(5):
        # |L1 ball| = 2r^2 + 2r + 1
        assert dilate_diamond(BoundaryBand(mask), r).mask.sum() == 2 * r * r + 2 * r + 1


@pytest.mark.parametrize("hw", [(1, 1), (5, 9), (16, 16), (32, 32), (7, 32)])
@pytest.mark.parametrize("trunc", [1.0, 2.5, 4.0, 7.0])
def test_truncated_edt_matches_brute_force(hw, trunc):
    rng = np.random.default_rng(hash((hw, trunc)) % 2**32)
    for density in (0.3, 0.7, 0.95):
        mask = rng.random(hw) < density
        if mask.all():
            continue
        np.testing.assert_array_equal(truncated_edt(BoundaryBand(mask), trunc), brute_edt(mask, trunc))


def test_truncated_edt_full_band_warns():
    with pytest.warns(RuntimeWarning):
        out = truncated_edt(BoundaryBand(np.ones((4, 4), bool)), 3.0)
    assert np.all(out == 3.0)


def test_two_region_worked_example():
    v = np.zeros((9, 12), int)
    v[:, 6:] = 1
    tgt = make_boundary_target(LabelMap(v, 2), radius=2, truncation=3)
    band = brute_dilate(brute_boundaries(v), 2)
    dist = brute_edt(band, 3)
    expected = dist / dist.max()
    np.testing.assert_array_equal(tgt.values, expected.astype(np.float32))
    row = tgt.values[4]
    assert row[3] == np.float32(1 / 3) and row[8] == np.float32(1 / 3)
    np.testing.assert_allclose(row, [0, 0, 0, 1 / 3, 2 / 3, 1, 1, 2 / 3, 1 / 3, 0, 0, 0], rtol=1e-7)


def test_constant_labels_are_boundary_free():
    tgt = make_boundary_target(LabelMap(np.full((8, 8), 2), 5))
    assert tgt.boundary_free and tgt.beta == 0.0
    assert not tgt.values.any()
    np.testing.assert_array_equal(tgt.loss_weights(), 1.0)


def test_beta_modes_and_weights():
    mask = np.zeros((10, 10), bool)
    mask[:, :3] = True
    band = BoundaryBand(mask)
    assert compute_beta(band, "background_total") == pytest.approx(0.7)
    assert compute_beta(band, "background_boundary") == pytest.approx(70 / 30)
    with pytest.raises(ValueError):
        compute_beta(BoundaryBand(np.zeros((3, 3), bool)))
    with pytest.raises(ValueError):
        compute_beta(band, "bogus")
    values = mask.astype(np.float32)
    w_total = boundary_loss_weights(values, 0.7, "background_total")
    w_bnd = boundary_loss_weights(values, 70 / 30, "background_boundary")
    # both readings weight band against background by #background : #band
    for w in (w_total, w_bnd):
        assert w[mask][0] / w[~mask][0] == pytest.approx(70 / 30)


def test_full_band_target_is_finite():
    v = np.indices((4, 4)).sum(axis=0) % 2  # checkerboard: everything is boundary
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tgt = make_boundary_target(LabelMap(v, 2), radius=1)
    assert np.all(np.isfinite(tgt.values)) and tgt.values.max() == 1


def test_label_map_validation():
    with pytest.raises(ValueError):
        LabelMap(np.zeros((2, 2, 2)), 3)
    with pytest.raises(ValueError):
        LabelMap(np.full((2, 2), 7), 3)
    LabelMap(np.full((2, 2), 255), 3)  # ignore is fine


@pytest.mark.parametrize("seed", range(50))
def test_target_invariants_on_random_maps(seed):
    rng = np.random.default_rng(1000 + seed)
    v = random_labels(rng, (64, 64), block=int(rng.integers(5, 12)), ignore_frac=0.01 * (seed % 3))
    radius = int(rng.integers(1, 4))
    tgt = make_boundary_target(LabelMap(v, 5), radius)
    band = dilate_diamond(extract_class_boundaries(LabelMap(v, 5)), radius).mask
    assert not tgt.boundary_free
    np.testing.assert_array_equal(tgt.values > 0, band)  # support
    assert tgt.values.min() >= 0 and tgt.values.max() <= 1  # range
    assert tgt.values.max() == 1  # max
    assert tgt.beta == pytest.approx((~band).sum() / band.size)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 20), st.integers(2, 20), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_target_is_within_unit_interval_property(h, w, radius, seed):
    v = np.random.default_rng(seed).integers(0, 3, (h, w))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        tgt = make_boundary_target(LabelMap(v, 3), radius)
    assert tgt.values.shape == (h, w)
    assert np.all((tgt.values >= 0) & (tgt.values <= 1))
    if not tgt.boundary_free:
        assert tgt.values.max() == 1

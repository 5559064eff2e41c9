import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis.extra import numpy as hnp

from sitsforecast.errors import ConfigurationError, DimensionError, DomainError
from sitsforecast.metrics import (
    ChangeMask,
    DetectorConfig,
    TcsConfig,
    acs,
    centroid,
    detect_changes,
    majority_filter,
    otsu_threshold,
    psnr,
    sps,
    ssim,
    tcs,
    tcs_components,
)
from oracles import brute_area, brute_centroid, scalar_psnr, scalar_ssim


def block_mask(h, w, r0, r1, c0, c1):
    bits = np.zeros((h, w), dtype=bool)
    bits[r0:r1, c0:c1] = True
    return ChangeMask(bits)


# -- masks ---------------------------------------------------------------------

def test_mask_rejects_bad_values_and_shapes():
    with pytest.raises(DomainError):
        ChangeMask(np.array([[0, 2]]))
    with pytest.raises(DimensionError):
        ChangeMask(np.zeros(4))
    with pytest.raises(DimensionError):
        ChangeMask(np.zeros((0, 3)))
    assert ChangeMask(np.array([[0, 1]])).area() == 1


# -- centroid ------------------------------------------------------------------

def test_centroid_all_ones_is_centre():
    assert centroid(ChangeMask(np.ones((7, 5), dtype=bool))) == (0.5, 0.5)


def test_centroid_corner_pixel_uses_pixel_centres():
    assert centroid(block_mask(10, 10, 0, 1, 0, 1)) == pytest.approx((0.05, 0.05), abs=1e-15)


def test_centroid_empty_is_none():
    assert centroid(ChangeMask(np.zeros((4, 4)))) is None


def test_centroid_x_is_column_axis():
    cx, cy = centroid(block_mask(10, 20, 0, 1, 19, 20))
    assert cx == pytest.approx(19.5 / 20) and cy == pytest.approx(0.5 / 10)


# -- sps / acs / tcs -------------------------------------------------------------

def test_sps_identical_masks_is_exactly_one():
    m = block_mask(8, 8, 2, 5, 1, 3)
    assert sps(m, m) == 1.0


def test_sps_two_blocks_in_20x20():
    # 2x2 blocks with centroids (0.25, 0.25) and (0.35, 0.25)
    a = block_mask(20, 20, 4, 6, 4, 6)
    b = block_mask(20, 20, 4, 6, 6, 8)
    assert centroid(a) == pytest.approx((0.25, 0.25))
    assert centroid(b) == pytest.approx((0.35, 0.25))
    assert sps(a, b) == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_empty_mask_policy():
    empty = ChangeMask(np.zeros((6, 6)))
    full = block_mask(6, 6, 0, 2, 0, 2)
    assert sps(empty, empty) == 1.0
    assert tcs(empty, empty) == 1.0
    assert sps(full, empty) == 0.0
    assert tcs(full, empty) == 0.0
    assert acs(full, empty) == pytest.approx(math.exp(-1.0), abs=1e-8)
    strict = TcsConfig(empty_policy="strict")
    assert sps(empty, empty, strict) == 0.0


def test_acs_equal_areas_and_closed_form():
    a = block_mask(20, 20, 0, 10, 0, 10)
    b = block_mask(20, 20, 5, 15, 5, 15)
    assert acs(a, b) == pytest.approx(1.0, abs=1e-12)
    c = block_mask(20, 20, 0, 10, 0, 15)
    assert acs(a, c) == pytest.approx(math.exp(-50 / (150 + 1e-8)), abs=1e-15)


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        tcs(ChangeMask(np.ones((3, 3))), ChangeMask(np.ones((3, 4))))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TcsConfig(sigma=0.0)
    with pytest.raises(ConfigurationError):
        TcsConfig(empty_policy="maybe")
    with pytest.raises(ConfigurationError):
        DetectorConfig(method="p2v")
    with pytest.raises(ConfigurationError):
        DetectorConfig(method="abs_diff_fixed", tau=1.0)


def test_components_consistent():
    a = block_mask(16, 16, 2, 6, 2, 6)
    b = block_mask(16, 16, 3, 9, 4, 8)
    d = tcs_components(a, b)
    assert d["tcs"] == pytest.approx(d["sps"] * d["acs"], abs=1e-15)
    assert d["tcs"] == tcs(a, b)


masks32 = hnp.arrays(bool, (12, 12))


@settings(max_examples=200, deadline=None)
@given(masks32, masks32)
def test_scores_symmetric_and_bounded(a, b):
    ma, mb = ChangeMask(a), ChangeMask(b)
    assert sps(ma, mb) == sps(mb, ma)
    assert acs(ma, mb) == acs(mb, ma)
    assert 0.0 <= tcs(ma, mb) <= 1.0


@settings(max_examples=100, deadline=None)
@given(masks32)
def test_tcs_one_for_identical_nonempty(a):
    if a.any():
        assert tcs(ChangeMask(a), ChangeMask(a)) == 1.0


def test_sps_strictly_decreasing_in_distance():
    ref = block_mask(32, 32, 10, 12, 0, 2)
    scores = [sps(ref, block_mask(32, 32, 10, 12, k, k + 2)) for k in range(0, 30)]
    assert all(x > y for x, y in zip(scores, scores[1:]))


def test_acs_strictly_decreasing_in_area_gap():
    ref = block_mask(32, 32, 0, 20, 0, 20)
    scores = [acs(ref, block_mask(32, 32, 0, 20, 0, w)) for w in range(20, 0, -1)]
    assert all(x > y for x, y in zip(scores, scores[1:]))


def test_vectorised_centroid_and_area_match_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        bits = rng.random((32, 32)) < rng.uniform(0.0, 0.2)
        m = ChangeMask(bits)
        assert m.area() == brute_area(bits)
        assert centroid(m) == brute_centroid(bits)


# -- detection -----------------------------------------------------------------

def test_detect_identical_images_gives_empty_mask():
    img = np.random.default_rng(0).random((8, 8, 3))
    assert detect_changes(img, img).is_empty()
    assert detect_changes(img, img, DetectorConfig("abs_diff_fixed", 0.5)).is_empty()


def test_detect_single_pixel_fixed_threshold():
    a = np.zeros((6, 6, 3))
    b = a.copy()
    b[2, 3] = 0.9
    m = detect_changes(a, b, DetectorConfig("abs_diff_fixed", 0.5))
    expected = np.zeros((6, 6), dtype=bool)
    expected[2, 3] = True
    assert np.array_equal(m.bits, expected)


def test_detect_checkerboard_inversion_all_ones():
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    a = np.repeat(board[..., None], 3, axis=2)
    m = detect_changes(a, 1.0 - a, DetectorConfig("abs_diff_fixed", 0.5))
    assert m.area() == 64


def test_detect_otsu_finds_square():
    a = np.full((16, 16, 3), 0.3)
    b = a.copy()
    b[4:8, 5:9] = 0.9
    b += np.random.default_rng(1).uniform(-0.01, 0.01, b.shape)
    m = detect_changes(a, np.clip(b, 0, 1))
    assert m.area() == 16 and m.bits[4:8, 5:9].all()


def test_detect_shape_mismatch_and_external():
    with pytest.raises(DimensionError):
        detect_changes(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ConfigurationError):
        detect_changes(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), DetectorConfig("external_mask_file"))


def test_otsu_separates_two_levels():
    v = np.array([0.1] * 50 + [0.8] * 10)
    th = otsu_threshold(v)
    assert 0.1 < th <= 0.8
    assert otsu_threshold(np.full(5, 0.3)) == 0.3


def test_majority_filter_removes_isolated_pixel_keeps_block():
    bits = np.zeros((9, 9), dtype=bool)
    bits[0, 8] = True
    bits[3:7, 2:6] = True
    out = majority_filter(bits)
    assert not out[0, 8]
    assert out[4:6, 3:5].all()


# -- psnr / ssim -----------------------------------------------------------------

def test_psnr_closed_forms():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == math.inf
    assert psnr(a, np.ones_like(a)) == 0.0
    assert psnr(a, np.full_like(a, 0.1)) == pytest.approx(20.0, abs=1e-12)
    with pytest.raises(DimensionError):
        psnr(a, np.zeros((4, 4)))


def test_ssim_closed_forms():
    rng = np.random.default_rng(3)
    a = rng.random((16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-9)
    c1 = 0.01 ** 2
    assert ssim(np.zeros((12, 12)), np.ones((12, 12))) == pytest.approx(c1 / (1 + c1), abs=1e-12)
    assert ssim(a, np.clip(a + 0.5, 0, 1)) < 1.0
    with pytest.raises(DomainError):
        ssim(np.zeros((10, 10)), np.zeros((10, 10)))


def test_psnr_ssim_match_scalar_reimplementations():
    rng = np.random.default_rng(5)
    for k in range(100):
        shape = (12 + k % 5, 11 + k % 7, 3) if k % 2 else (12 + k % 5, 11 + k % 7)
        a = rng.random(shape)
        b = np.clip(a + rng.normal(0, 0.1, shape), 0, 1)
        assert psnr(a, b) == pytest.approx(scalar_psnr(a, b), abs=1e-9)
        assert ssim(a, b) == pytest.approx(scalar_ssim(a, b), abs=1e-9)

"""Detector/descriptor head tests with brute-force interpolation oracles."""
import math

import numpy as np
import pytest

from uft import heads, rng
from uft.errors import DataError


def test_softmax_rows_sum_to_one_and_shift_invariant():
    x = rng.gaussian_field(0, (4, 5, 65)) * 3.0
    p = heads.softmax(x)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    p2 = heads.softmax(x + 100.0)
    np.testing.assert_allclose(p, p2, atol=1e-12)
    np.testing.assert_allclose(np.log(p), heads.log_softmax(x), atol=1e-12)


def test_probability_map_single_cell_pinned():
    # one cell, channel 0 at ln 2, rest zero: p0 = 2 / (2 + 64) = 2/66
    logits = np.zeros((1, 1, 65))
    logits[0, 0, 0] = math.log(2.0)
    pmap = heads.detector_probability_map(logits)
    assert pmap.shape == (8, 8)
    assert abs(pmap[0, 0] - 2.0 / 66.0) < 1e-15
    np.testing.assert_allclose(pmap.ravel()[1:], 1.0 / 66.0, atol=1e-15)


def test_probability_map_channel_to_pixel_layout():
    # channel k of cell (i,j) must land at pixel (8i + k//8, 8j + k%8)
    hc, wc = 2, 3
    for k in (0, 7, 8, 21, 63):
        logits = np.zeros((hc, wc, 65))
        logits[1, 2, k] = 50.0  # spike dominates the softmax
        pmap = heads.detector_probability_map(logits)
        assert pmap.shape == (16, 24)
        iy, ix = np.unravel_index(np.argmax(pmap), pmap.shape)
        assert (iy, ix) == (8 + k // 8, 16 + k % 8)


def test_probability_map_dustbin_dropped():
    logits = np.zeros((1, 1, 65))
    logits[0, 0, 64] = 100.0
    pmap = heads.detector_probability_map(logits)
    assert pmap.max() < 1e-12  # all mass on the dustbin, none in the image


def test_probability_map_bounds_and_cell_sums():
    logits = rng.gaussian_field(2, (3, 4, 65)) * 2.0
    probs = heads.detector_probabilities(logits)
    pmap = heads.detector_probability_map(logits)
    for i in range(3):
        for j in range(4):
            block = pmap[8 * i : 8 * i + 8, 8 * j : 8 * j + 8]
            assert abs(block.sum() + probs[i, j, 64] - 1.0) < 1e-12


def test_logits_validation():
    with pytest.raises(DataError):
        heads.detector_probability_map(np.zeros((4, 4, 64)))
    bad = np.zeros((1, 1, 65))
    bad[0, 0, 3] = np.inf
    with pytest.raises(DataError):
        heads.detector_probability_map(bad)


def catmull_rom(d: float) -> float:
    """Keys kernel with a = -0.5, evaluated at distance d."""
    a = -0.5
    d = abs(d)
    if d <= 1.0:
        return (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
    if d < 2.0:
        return a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
    return 0.0


def upsample_reference(coarse: np.ndarray, factor: int) -> np.ndarray:
    """Direct per-output-pixel bicubic evaluation (edge-clamped taps)."""
    hc, wc, c = coarse.shape
    out = np.zeros((hc * factor, wc * factor, c))
    for oy in range(hc * factor):
        sy = (oy + 0.5) / factor - 0.5
        by = math.floor(sy)
        for ox in range(wc * factor):
            sx = (ox + 0.5) / factor - 0.5
            bx = math.floor(sx)
            acc = np.zeros(c)
            for ty in range(-1, 3):
                wy = catmull_rom(sy - (by + ty))
                iy = min(max(by + ty, 0), hc - 1)
                for tx in range(-1, 3):
                    wx = catmull_rom(sx - (bx + tx))
                    ix = min(max(bx + tx, 0), wc - 1)
                    acc += wy * wx * coarse[iy, ix]
            out[oy, ox] = acc
    return out


def test_bicubic_against_direct_evaluation():
    coarse = rng.gaussian_field(9, (3, 4, 2))
    got = heads.upsample_bicubic(coarse, factor=8)
    want = upsample_reference(coarse, 8)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_bicubic_reproduces_constant_and_linear_fields():
    const = np.full((3, 3, 1), 0.7)
    np.testing.assert_allclose(heads.upsample_bicubic(const, 8), 0.7, atol=1e-12)
    # linear ramp away from the clamped borders is reproduced exactly
    ramp = np.arange(6, dtype=float).reshape(1, 6, 1) * np.ones((4, 1, 1))
    up = heads.upsample_bicubic(ramp, 4)
    xs = (np.arange(24) + 0.5) / 4.0 - 0.5
    interior = (xs >= 1.0) & (xs <= 4.0)
    np.testing.assert_allclose(up[8, interior, 0], xs[interior], atol=1e-12)


def test_bicubic_factor_one_identity():
    coarse = rng.gaussian_field(4, (5, 5, 3))
    np.testing.assert_allclose(heads.upsample_bicubic(coarse, 1), coarse, atol=1e-12)


def test_dense_descriptors_unit_norm():
    coarse = rng.gaussian_field(1, (2, 3, 16))
    field = heads.dense_descriptors(coarse)
    assert field.dense.shape == (16, 24, 16)
    np.testing.assert_allclose(
        np.linalg.norm(field.dense, axis=-1), 1.0, atol=1e-12
    )
    assert field.zero_norm_count == 0


def test_dense_descriptors_zero_norm_substitution():
    coarse = np.zeros((1, 1, 8))
    field = heads.dense_descriptors(coarse)
    assert field.zero_norm_count == 64
    np.testing.assert_array_equal(field.dense[:, :, 0], 1.0)
    np.testing.assert_array_equal(field.dense[:, :, 1:], 0.0)
    with pytest.raises(DataError):
        heads.dense_descriptors(np.full((1, 1, 8), np.nan))


def test_binarize_sign_and_mask():
    x = np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0])
    signs, mask = heads.binarize_ste(x)
    np.testing.assert_array_equal(signs, [-1, -1, -1, 1, 1, 1, 1])
    np.testing.assert_array_equal(mask, [0, 1, 1, 1, 1, 1, 0])  # |x| <= 1 inclusive


def test_pack_unpack_round_trip():
    vals = rng.gaussian_field(3, (10, 256))
    packed = heads.pack_descriptor_bits(vals)
    assert packed.shape == (10, 32)
    bits = heads.unpack_descriptor_bits(packed)
    np.testing.assert_array_equal(bits, (vals >= 0).astype(np.uint8))
    signs, _ = heads.binarize_ste(vals)
    np.testing.assert_array_equal(heads.bits_to_signs(bits), signs)


def test_pack_bit_order_lsb_first():
    # component 0 maps to bit 0 of byte 0
    v = np.full(8, -1.0)
    v[0] = 1.0
    assert heads.pack_descriptor_bits(v)[0] == 1
    v2 = np.full(8, -1.0)
    v2[7] = 1.0
    assert heads.pack_descriptor_bits(v2)[0] == 128
    with pytest.raises(DataError):
        heads.pack_descriptor_bits(np.zeros(13))
    with pytest.raises(DataError):
        heads.unpack_descriptor_bits(np.zeros((2, 2), dtype=np.uint8), dim=64)


def nms_reference(ys, xs, scores, radius):
    """Pairwise greedy suppression, score-descending, row-major ties."""
    order = sorted(range(len(ys)), key=lambda i: (-scores[i], ys[i], xs[i]))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if max(abs(int(ys[i]) - int(ys[j])), abs(int(xs[i]) - int(xs[j]))) <= radius:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def test_nms_against_pairwise_oracle():
    for seed in range(15):
        h = w = 40
        pmap = np.abs(rng.gaussian_field(seed, (h, w))) * 0.05
        ys, xs = np.nonzero(pmap >= 0.02)
        scores = pmap[ys, xs]
        for radius in (0, 1, 3):
            got = heads.greedy_nms(ys, xs, scores, radius, (h, w))
            want = nms_reference(ys, xs, scores, radius)
            assert sorted(got) == sorted(want)


def test_detect_keypoints_ordering_and_threshold():
    pmap = np.zeros((16, 16))
    pmap[2, 3] = 0.9
    pmap[10, 1] = 0.5
    pmap[10, 12] = 0.5
    pmap[4, 4] = 0.005  # below threshold
    kps = heads.detect_keypoints(pmap, threshold=0.01, nms_radius=2)
    assert [(k.y, k.x) for k in kps] == [(2, 3), (10, 1), (10, 12)]
    assert kps[0].score == 0.9
    scores = [k.score for k in kps]
    assert scores == sorted(scores, reverse=True)


def test_detect_keypoints_suppression_radius():
    pmap = np.zeros((16, 16))
    pmap[5, 5] = 0.8
    pmap[5, 9] = 0.7
    assert len(heads.detect_keypoints(pmap, nms_radius=4)) == 1
    assert len(heads.detect_keypoints(pmap, nms_radius=3)) == 2


def test_detect_keypoints_validation_and_empty():
    assert heads.detect_keypoints(np.zeros((8, 8))) == []
    with pytest.raises(DataError):
        heads.detect_keypoints(np.zeros((8, 8)), threshold=0.0)
    with pytest.raises(DataError):
        heads.detect_keypoints(np.zeros((8, 8)), threshold=1.0)
    with pytest.raises(DataError):
        heads.detect_keypoints(np.zeros((8, 8)), nms_radius=-1)
    with pytest.raises(DataError):
        heads.detect_keypoints(np.zeros((8, 8, 2)))

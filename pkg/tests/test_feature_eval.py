"""Repeatability, structural similarity, and turbidity sweep tests."""
import math

import numpy as np
import pytest

from uft import feature_eval, rng, water
from uft.errors import DataError
from uft.heads import Keypoint


def kp(x, y, score=1.0):
    return Keypoint(x=x, y=y, score=score)


# --- overlap rate ------------------------------------------------------------

def overlap_reference(ref, det):
    """Grid-membership oracle: build the 3x3 set around each detection."""
    covered = set()
    for d in det:
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                covered.add((d.x + dx, d.y + dy))
    return sum(1 for r in ref if (r.x, r.y) in covered)


def test_overlap_rate_simple_cases():
    ref = [kp(10, 10), kp(20, 20), kp(30, 30)]
    got = feature_eval.overlap_rate(ref, ref)
    assert (got.p_ref, got.p_overlap, got.rate) == (3, 3, 1.0)
    # one detection off by a diagonal step still counts
    got = feature_eval.overlap_rate(ref, [kp(11, 11)])
    assert (got.p_overlap, got.rate) == (1, 1.0 / 3.0)
    # off by 2 in one axis does not
    got = feature_eval.overlap_rate(ref, [kp(12, 10)])
    assert got.p_overlap == 0
    got = feature_eval.overlap_rate(ref, [])
    assert got.rate == 0.0


def test_overlap_rate_single_credit_per_reference():
    ref = [kp(10, 10)]
    det = [kp(9, 9), kp(10, 10), kp(11, 11)]
    got = feature_eval.overlap_rate(ref, det)
    assert got.p_overlap == 1 and got.rate == 1.0


def test_overlap_rate_against_grid_oracle():
    st = rng.Stream(0, 0)
    for _ in range(20):
        ref = [kp(st.randint(40), st.randint(40)) for _ in range(15)]
        det = [kp(st.randint(40), st.randint(40)) for _ in range(15)]
        got = feature_eval.overlap_rate(ref, det)
        assert got.p_overlap == overlap_reference(ref, det)
    with pytest.raises(DataError):
        feature_eval.overlap_rate([], det)


# --- structural similarity ---------------------------------------------------

def ssim_reference(a, b):
    """Direct per-window loop with the same Gaussian weights."""
    taps = feature_eval._gaussian_taps(11, 1.5)
    w2 = np.outer(taps, taps)
    h, wd = a.shape
    vals = []
    c1, c2 = 0.01**2, 0.03**2
    for i in range(h - 10):
        for j in range(wd - 10):
            wa = a[i : i + 11, j : j + 11]
            wb = b[i : i + 11, j : j + 11]
            mu_a = (w2 * wa).sum()
            mu_b = (w2 * wb).sum()
            var_a = (w2 * wa * wa).sum() - mu_a**2
            var_b = (w2 * wb * wb).sum() - mu_b**2
            cov = (w2 * wa * wb).sum() - mu_a * mu_b
            num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
            den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def test_ssim_identical_images():
    img = rng.gaussian_field(1, (24, 24)) * 0.2 + 0.5
    assert abs(feature_eval.ssim(img, img) - 1.0) < 1e-12
    assert feature_eval.degradation_index(img, img) == 0.0


def test_ssim_against_window_loop():
    a = np.clip(rng.gaussian_field(2, (20, 22)) * 0.2 + 0.5, 0, 1)
    b = np.clip(a + rng.gaussian_field(3, (20, 22)) * 0.1, 0, 1)
    got = feature_eval.ssim(a, b)
    want = ssim_reference(a, b)
    assert abs(got - want) < 1e-10


def test_ssim_validation():
    with pytest.raises(DataError):
        feature_eval.ssim(np.zeros((8, 20)), np.zeros((8, 20)))  # below window size
    with pytest.raises(DataError):
        feature_eval.ssim(np.zeros((20, 20)), np.zeros((20, 21)))
    with pytest.raises(DataError):
        feature_eval.ssim(np.zeros((20, 20, 3)), np.zeros((20, 20, 3)))


def test_degradation_index_monotone_in_noise():
    base = np.clip(rng.gaussian_field(4, (32, 32)) * 0.2 + 0.5, 0, 1)
    values = []
    for sigma in (0.0, 0.05, 0.15, 0.4):
        noisy = np.clip(base + sigma * rng.gaussian_field(9, (32, 32)), 0, 1)
        values.append(feature_eval.degradation_index(base, noisy))
    assert values[0] == 0.0
    assert all(x < y for x, y in zip(values, values[1:]))
    assert all(0.0 <= v <= 100.0 for v in values)


# --- corner detection --------------------------------------------------------

def square_grid(size=64, lo=0.2, hi=0.8):
    """Nine isolated bright squares: 36 unambiguous L-corners."""
    img = np.full((size, size), lo)
    for oy in (6, 26, 46):
        for ox in (6, 26, 46):
            img[oy : oy + 10, ox : ox + 10] = hi
    return img


def square_grid_corners():
    return [
        (x, y)
        for oy in (6, 26, 46)
        for ox in (6, 26, 46)
        for x in (ox, ox + 9)
        for y in (oy, oy + 9)
    ]


def test_harris_finds_square_corners():
    img = square_grid()
    detect = feature_eval.harris_detector(min_response=1e-4, nms_radius=4, border=4)
    kps = detect(img)
    assert len(kps) == 36
    corners = square_grid_corners()
    for p in kps:
        assert min(max(abs(p.x - cx), abs(p.y - cy)) for cx, cy in corners) <= 1


def test_harris_flat_image_no_detections():
    detect = feature_eval.harris_detector()
    assert detect(np.full((32, 32), 0.5)) == []


def test_harris_response_edge_vs_corner():
    # an isolated bright square: strong positive response at corners,
    # negative along edges
    img = np.full((32, 32), 0.2)
    img[8:24, 8:24] = 0.9
    resp = feature_eval.harris_response(img)
    assert resp[8, 8] > 1e-4
    assert resp[16, 8] < 0.0  # mid-edge
    with pytest.raises(DataError):
        feature_eval.harris_response(np.zeros((4, 4, 3)))


def test_harris_contrast_sensitivity():
    # the absolute floor kills detections when contrast collapses
    img = square_grid()
    washed = 0.5 + (img - 0.5) * 0.02
    detect = feature_eval.harris_detector(min_response=1e-4)
    assert len(detect(img)) > 0
    assert detect(washed) == []


# --- turbidity sweep ---------------------------------------------------------

def sweep_fixture():
    img = square_grid()
    color = np.repeat(img[:, :, None], 3, axis=2)
    depth = np.full((64, 64), 1.5)
    frame = water.RgbdFrame(color=color, depth=depth)
    params = water.SpectralWaterParams(beta=[0.35] * 3, kd=[0.18] * 3, b=[0.12] * 3)
    scene = water.ScenePhysics(water_depth=4.0, max_scene_depth=3.0, noise_sigma=0.01)
    return frame, params, scene


def test_turbidity_sweep_shape():
    frame, params, scene = sweep_fixture()
    detect = feature_eval.harris_detector()
    rows = feature_eval.turbidity_sweep(frame, detect, params, scene, steps=6, seed=0)
    assert len(rows) == 6
    scales = sorted(r.beta_scale for r in rows)
    np.testing.assert_allclose(scales, np.linspace(0.0, 3.0, 6), atol=1e-12)
    by_scale = {r.beta_scale: r for r in rows}
    clear = by_scale[0.0]
    worst = by_scale[3.0]
    assert clear.rate == 1.0
    assert worst.rate <= 0.5 * clear.rate
    # rows come back sorted by the degradation proxy
    degr = [r.degradation for r in rows]
    assert degr == sorted(degr)
    # heavier water never degrades less
    in_scale_order = sorted(rows, key=lambda r: r.beta_scale)
    d = [r.degradation for r in in_scale_order]
    assert all(x <= y + 1e-9 for x, y in zip(d, d[1:]))


def test_turbidity_sweep_scale_zero_is_clear_limit():
    frame, params, scene = sweep_fixture()
    noiseless = water.ScenePhysics(
        water_depth=scene.water_depth,
        max_scene_depth=scene.max_scene_depth,
        noise_sigma=0.0,
    )
    detect = feature_eval.harris_detector()
    rows = feature_eval.turbidity_sweep(frame, detect, params, noiseless, steps=3, seed=1)
    clear = min(rows, key=lambda r: r.beta_scale)
    assert clear.beta_scale == 0.0
    assert clear.degradation == 0.0  # identical image, no water, no noise
    assert clear.rate == 1.0


def test_turbidity_sweep_deterministic():
    frame, params, scene = sweep_fixture()
    detect = feature_eval.harris_detector()
    r1 = feature_eval.turbidity_sweep(frame, detect, params, scene, steps=4, seed=7)
    r2 = feature_eval.turbidity_sweep(frame, detect, params, scene, steps=4, seed=7)
    assert r1 == r2


def test_turbidity_sweep_validation():
    frame, params, scene = sweep_fixture()
    detect = feature_eval.harris_detector()
    with pytest.raises(DataError):
        feature_eval.turbidity_sweep(frame, detect, params, scene, steps=1)
    with pytest.raises(DataError):
        feature_eval.turbidity_sweep(frame, detect, params, scene, steps=3, beta_scale_max=0.0)
    flat = water.RgbdFrame(color=np.full((64, 64, 3), 0.5), depth=np.full((64, 64), 1.0))
    with pytest.raises(DataError):
        feature_eval.turbidity_sweep(flat, detect, params, scene, steps=3)


def test_sweep_rows_csv():
    rows = [
        feature_eval.SweepRow(beta_scale=0.0, degradation=0.0, p_ref=10, p_overlap=10, rate=1.0),
        feature_eval.SweepRow(beta_scale=1.0, degradation=42.5, p_ref=10, p_overlap=3, rate=0.3),
    ]
    text = feature_eval.sweep_rows_csv(rows)
    lines = text.strip().split("\n")
    assert lines[0] == "degradation,P_R,P_c,R"
    assert lines[1].split(",")[1:3] == ["10", "10"]
    assert float(lines[2].split(",")[0]) == 42.5

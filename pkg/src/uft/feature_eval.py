"""Keypoint repeatability under turbidity and a structural degradation proxy.

The overlap detection rate R = P_c / P_R counts a reference keypoint as
re-detected when any detection on the degraded image falls inside the
3x3 pixel grid centered on it (Chebyshev distance <= 1); each reference
point earns at most one credit, so R stays in [0, 1].

Structural degradation is reported as 100 * (1 - SSIM), a stand-in for a
dedicated degradation index: monotone in degradation, 0 for identical
images, capped at 100.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from . import rng, water
from .errors import DataError
from .heads import Keypoint, greedy_nms

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class OverlapReport:
    """Reference count, overlap count, their ratio, optional degradation proxy."""

    p_ref: int
    p_overlap: int
    rate: float
    degradation: Optional[float] = None


def overlap_rate(
    reference_kps: Sequence[Keypoint], detected_kps: Sequence[Keypoint]
) -> OverlapReport:
    """Fraction of reference keypoints re-detected within a 3x3 pixel grid."""
    p_ref = len(reference_kps)
    if p_ref == 0:
        raise DataError("overlap rate undefined: no reference keypoints")
    if not detected_kps:
        return OverlapReport(p_ref=p_ref, p_overlap=0, rate=0.0)
    det = np.array([[kp.x, kp.y] for kp in detected_kps], dtype=np.int64)
    hits = 0
    for kp in reference_kps:
        cheb = np.maximum(np.abs(det[:, 0] - kp.x), np.abs(det[:, 1] - kp.y))
        if np.any(cheb <= 1):
            hits += 1
    return OverlapReport(p_ref=p_ref, p_overlap=hits, rate=hits / p_ref)


def _gaussian_taps(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _windowed(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Separable weighted-window filter, cropped to fully valid windows."""
    half = len(taps) // 2
    out = correlate1d(img, taps, axis=0, mode="constant")
    out = correlate1d(out, taps, axis=1, mode="constant")
    return out[half:-half or None, half:-half or None]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity with an 11-tap Gaussian window, range 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"image dimensions differ: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise DataError(f"similarity expects grayscale images, got shape {a.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise DataError(
            f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape}"
        )
    taps = _gaussian_taps(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _windowed(a, taps)
    mu_b = _windowed(b, taps)
    ex_aa = _windowed(a * a, taps)
    ex_bb = _windowed(b * b, taps)
    ex_ab = _windowed(a * b, taps)
    var_a = ex_aa - mu_a**2
    var_b = ex_bb - mu_b**2
    cov = ex_ab - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def degradation_index(clear: np.ndarray, turbid: np.ndarray) -> float:
    """Structural degradation proxy 100 * (1 - SSIM), clipped to [0, 100]."""
    return float(np.clip(100.0 * (1.0 - ssim(clear, turbid)), 0.0, 100.0))


def harris_response(gray: np.ndarray, sigma: float = 1.0, k: float = 0.04) -> np.ndarray:
    """Harris corner response det(M) - k tr(M)^2 with a Gaussian window."""
    gray = np.asarray(gray, dtype=np.float64)
    if gray.ndim != 2:
        raise DataError(f"corner response expects a grayscale image, got {gray.shape}")
    gy, gx = np.gradient(gray)
    size = max(3, int(round(sigma * 6)) | 1)
    taps = _gaussian_taps(size, sigma)

    def smooth(v: np.ndarray) -> np.ndarray:
        v = correlate1d(v, taps, axis=0, mode="nearest")
        return correlate1d(v, taps, axis=1, mode="nearest")

    axx = smooth(gx * gx)
    ayy = smooth(gy * gy)
    axy = smooth(gx * gy)
    return axx * ayy - axy**2 - k * (axx + ayy) ** 2


def harris_detector(
    min_response: float = 1e-4, nms_radius: int = 4, border: int = 4
) -> Callable[[np.ndarray], list[Keypoint]]:
    """Corner detector with an absolute response floor.

    The floor is deliberately not contrast-normalized: as turbidity washes
    out image gradients, responses sink below it and detections vanish,
    which is the behaviour the sweep measures. Returns a callable taking a
    grayscale image.
    """

    def detect(gray: np.ndarray) -> list[Keypoint]:
        resp = harris_response(gray)
        if border > 0:
            resp = resp.copy()
            resp[:border] = -np.inf
            resp[-border:] = -np.inf
            resp[:, :border] = -np.inf
            resp[:, -border:] = -np.inf
        ys, xs = np.nonzero(resp >= min_response)
        if ys.size == 0:
            return []
        scores = resp[ys, xs]
        kept = greedy_nms(ys, xs, scores, nms_radius, resp.shape)
        return [
            Keypoint(x=int(xs[i]), y=int(ys[i]), score=float(scores[i])) for i in kept
        ]

    return detect


@dataclass(frozen=True)
class SweepRow:
    """One turbidity step: attenuation scaling, degradation proxy, overlap counts."""

    beta_scale: float
    degradation: float
    p_ref: int
    p_overlap: int
    rate: float


def turbidity_sweep(
    frame: water.RgbdFrame,
    detector: Callable[[np.ndarray], list[Keypoint]],
    params: water.SpectralWaterParams,
    scene: water.ScenePhysics,
    steps: int,
    beta_scale_max: float = 3.0,
    seed: int = 0,
) -> list[SweepRow]:
    """Overlap rate versus degradation across a turbidity ramp.

    All three optical coefficients are scaled together by factors spaced
    evenly from 0 to beta_scale_max. Scale 0 is the clear-water limit
    (attenuation and backscatter vanish), evaluated analytically as
    I = clamp(J + noise). Reference keypoints come from the clear image.
    Rows are sorted by degradation.
    """
    if steps < 2:
        raise DataError(f"sweep needs at least 2 steps, got {steps}")
    if beta_scale_max <= 0.0:
        raise DataError(f"beta_scale_max must be > 0, got {beta_scale_max}")
    clear_gray = water.grayscale(frame.color)
    reference = detector(clear_gray)
    if not reference:
        raise DataError("reference detector found no keypoints on the clear image")
    rows = []
    for step, scale in enumerate(np.linspace(0.0, beta_scale_max, steps)):
        step_seed = rng.derive_seed(seed, step)
        if scale == 0.0:
            image = frame.color
            if scene.noise_sigma > 0.0:
                noise = scene.noise_sigma * rng.gaussian_field(step_seed, frame.depth.shape)
                image = image + noise[:, :, None]
            image = np.clip(image, 0.0, 1.0)
        else:
            image = water.synthesize_underwater(
                frame, params.scaled(float(scale)), scene, step_seed
            )
        gray = water.grayscale(image)
        report = overlap_rate(reference, detector(gray))
        rows.append(
            SweepRow(
                beta_scale=float(scale),
                degradation=degradation_index(clear_gray, gray),
                p_ref=report.p_ref,
                p_overlap=report.p_overlap,
                rate=report.rate,
            )
        )
    rows.sort(key=lambda r: (r.degradation, r.beta_scale))
    return rows


def sweep_rows_csv(rows: Sequence[SweepRow]) -> str:
    """CSV text for a sweep: degradation, P_R, P_c, R."""
    lines = ["degradation,P_R,P_c,R"]
    for r in rows:
        lines.append(f"{r.degradation!r},{r.p_ref},{r.p_overlap},{r.rate!r}")
    return "\n".join(lines) + "\n"

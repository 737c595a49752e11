"""Detector and descriptor head post-processing.

The detector head emits a 65-channel cell tensor (8x8 spatial bins plus a
"no interest point" dustbin); softmax over channels, dropping the dustbin
and unfolding the 64 bins, yields a full-resolution probability image.
The descriptor head emits a coarse 256-vector per cell that is bicubically
upsampled 8x and L2-normalized per pixel. Binarization is sign() with a
straight-through backward mask.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DataError

CELL = 8
DETECTOR_CHANNELS = CELL * CELL + 1  # 64 spatial bins + dustbin
DUSTBIN = DETECTOR_CHANNELS - 1
NORM_EPS = 1e-12


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax along one axis."""
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _check_logits(logits: np.ndarray) -> np.ndarray:
    arr = np.asarray(logits, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != DETECTOR_CHANNELS:
        raise DataError(
            f"detector logits must be Hc x Wc x {DETECTOR_CHANNELS}, got {arr.shape}"
        )
    if not np.all(np.isfinite(arr)):
        raise DataError("detector logits contain non-finite values")
    return arr


def detector_probabilities(logits: np.ndarray) -> np.ndarray:
    """Per-cell channel softmax, dustbin retained; shape Hc x Wc x 65."""
    return softmax(_check_logits(logits), axis=-1)


def detector_probability_map(logits: np.ndarray) -> np.ndarray:
    """Full-resolution detection probability image.

    Per cell the 65-way softmax is taken, the dustbin channel dropped, and
    channel k of the remaining 64 placed at pixel offset (k // 8, k % 8)
    inside the cell's 8x8 block.
    """
    probs = detector_probabilities(logits)
    hc, wc = probs.shape[:2]
    spatial = probs[:, :, :DUSTBIN].reshape(hc, wc, CELL, CELL)
    return spatial.transpose(0, 2, 1, 3).reshape(hc * CELL, wc * CELL)


def _cubic_weights(t: float) -> np.ndarray:
    """Catmull-Rom (a = -0.5) weights for taps at offsets -1, 0, 1, 2."""
    a = -0.5
    w = np.empty(4)
    for i, d in enumerate((1.0 + t, t, 1.0 - t, 2.0 - t)):
        d = abs(d)
        if d <= 1.0:
            w[i] = (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0
        elif d < 2.0:
            w[i] = a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a
        else:
            w[i] = 0.0
    return w


def _upsample_axis(data: np.ndarray, factor: int) -> np.ndarray:
    """Bicubic upsampling along axis 0, edge-clamped, half-pixel grid.

    Output row y samples source coordinate (y + 0.5) / factor - 0.5, so
    each residue y % factor has one fixed 4-tap weight set.
    """
    n = data.shape[0]
    idx = np.arange(n)
    out = np.zeros((n * factor,) + data.shape[1:], dtype=np.float64)
    for r in range(factor):
        s = (r + 0.5) / factor - 0.5
        base = int(np.floor(s))
        w = _cubic_weights(s - base)
        for tap in range(4):
            rows = np.clip(idx + base - 1 + tap, 0, n - 1)
            out[r::factor] += w[tap] * data[rows]
    return out


def upsample_bicubic(coarse: np.ndarray, factor: int = CELL) -> np.ndarray:
    """Separable bicubic (Catmull-Rom) upsampling of an Hc x Wc x C tensor."""
    arr = np.asarray(coarse, dtype=np.float64)
    if arr.ndim != 3:
        raise DataError(f"coarse descriptor tensor must be Hc x Wc x C, got {arr.shape}")
    if factor < 1:
        raise DataError(f"upsampling factor must be >= 1, got {factor}")
    up = _upsample_axis(arr, factor)
    up = _upsample_axis(up.transpose(1, 0, 2), factor).transpose(1, 0, 2)
    return up


def l2_normalize(v: np.ndarray, axis: int = -1, eps: float = NORM_EPS) -> np.ndarray:
    norm = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.maximum(norm, eps)


@dataclass(frozen=True)
class DescriptorField:
    """Coarse head output and its dense normalized form."""

    coarse: np.ndarray
    dense: np.ndarray
    zero_norm_count: int = 0


def dense_descriptors(coarse: np.ndarray) -> DescriptorField:
    """Bicubic 8x upsample then per-pixel L2 normalization.

    Zero-norm pixels (possible when the interpolated vector cancels) are
    replaced by the first basis vector and counted instead of failing.
    """
    arr = np.asarray(coarse, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("coarse descriptors contain non-finite values")
    up = upsample_bicubic(arr, CELL)
    norms = np.linalg.norm(up, axis=-1)
    degenerate = norms < NORM_EPS
    count = int(np.count_nonzero(degenerate))
    if count:
        up = up.copy()
        up[degenerate] = 0.0
        up[degenerate, 0] = 1.0
        norms = np.where(degenerate, 1.0, norms)
    dense = up / norms[:, :, None]
    return DescriptorField(coarse=arr, dense=dense, zero_norm_count=count)


def binarize_ste(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """sign(x) with sign(0) = +1, and the straight-through backward mask.

    The mask is 1 where |x| <= 1 (inclusive), 0 outside; it gates every
    gradient flowing back through the binarization.
    """
    x = np.asarray(x, dtype=np.float64)
    signs = np.where(x >= 0.0, 1.0, -1.0)
    mask = (np.abs(x) <= 1.0).astype(np.float64)
    return signs, mask


def pack_descriptor_bits(values: np.ndarray) -> np.ndarray:
    """Pack sign bits of (..., D) descriptor values, LSB-first per byte.

    Bit k is 1 iff component k >= 0; D must be a multiple of 8. A 256-d
    descriptor packs to 32 bytes.
    """
    values = np.asarray(values)
    d = values.shape[-1]
    if d % 8 != 0:
        raise DataError(f"descriptor dimension must be a multiple of 8, got {d}")
    bits = (values >= 0).astype(np.uint8)
    return np.packbits(bits, axis=-1, bitorder="little")


def unpack_descriptor_bits(packed: np.ndarray, dim: Optional[int] = None) -> np.ndarray:
    """Inverse of pack_descriptor_bits; returns {0,1} bits along the last axis."""
    packed = np.asarray(packed, dtype=np.uint8)
    bits = np.unpackbits(packed, axis=-1, bitorder="little")
    if dim is not None:
        if dim > bits.shape[-1]:
            raise DataError(f"cannot unpack {dim} bits from {packed.shape[-1]} bytes")
        bits = bits[..., :dim]
    return bits


def bits_to_signs(bits: np.ndarray) -> np.ndarray:
    """{0,1} bits to the +-1 values they encode (1 -> +1, 0 -> -1)."""
    return np.where(np.asarray(bits) != 0, 1.0, -1.0)


@dataclass(frozen=True, order=True)
class Keypoint:
    """A detection: pixel position and its probability score."""

    x: int
    y: int
    score: float


def greedy_nms(
    ys: np.ndarray, xs: np.ndarray, scores: np.ndarray, radius: int, shape: tuple[int, int]
) -> list[int]:
    """Greedy score-descending suppression; returns kept candidate indices.

    Candidates are visited by descending score (ties by row-major pixel
    order); one within Chebyshev distance `radius` of an already kept
    point is dropped. Equivalent to pairwise checking, but tracked with a
    painted suppression mask so each visit is O(1).
    """
    order = np.lexsort((xs, ys, -scores))
    suppressed = np.zeros(shape, dtype=bool)
    h, w = shape
    kept: list[int] = []
    for idx in order:
        y, x = int(ys[idx]), int(xs[idx])
        if suppressed[y, x]:
            continue
        kept.append(int(idx))
        y0, y1 = max(0, y - radius), min(h, y + radius + 1)
        x0, x1 = max(0, x - radius), min(w, x + radius + 1)
        suppressed[y0:y1, x0:x1] = True
    return kept


def detect_keypoints(
    pmap: np.ndarray, threshold: float = 0.01, nms_radius: int = 4
) -> list[Keypoint]:
    """Thresholded detections after greedy non-maximum suppression.

    Pixels with probability >= threshold are filtered by greedy_nms; the
    kept list comes back sorted by descending score, ties in row-major
    pixel order.
    """
    pmap = np.asarray(pmap, dtype=np.float64)
    if pmap.ndim != 2:
        raise DataError(f"probability map must be 2-D, got shape {pmap.shape}")
    if not (0.0 < threshold < 1.0):
        raise DataError(f"detection threshold must lie in (0, 1), got {threshold}")
    if nms_radius < 0:
        raise DataError(f"nms radius must be >= 0, got {nms_radius}")
    ys, xs = np.nonzero(pmap >= threshold)
    if ys.size == 0:
        return []
    scores = pmap[ys, xs]
    kept = greedy_nms(ys, xs, scores, nms_radius, pmap.shape)
    return [
        Keypoint(x=int(xs[i]), y=int(ys[i]), score=float(scores[i])) for i in kept
    ]

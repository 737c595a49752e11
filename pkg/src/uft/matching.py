"""Viewpoint simulation, correspondence construction and descriptor matching.

A random homography (center-anchored rotation, scale, perspective, then
translation) simulates a viewpoint change. Keypoints of the original image
are projected into the transformed image; a detection within match_radius
of the projection becomes the match, and projections of other matches
farther than the threshold T supply the non-matching candidates used by
the hinge loss.

Descriptor distances are Hamming distances on packed bits. The matching
loss is differentiated in the +-1 relaxation dist(a, b) = (D - a.b)/2,
with the straight-through mask gating gradients through sign().
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng
from .errors import DataError, EmptyCorrespondenceError, NumericalError, ParameterDomainError
from .heads import Keypoint, binarize_ste

_POPCOUNT8 = np.array([bin(v).count("1") for v in range(256)], dtype=np.uint16)


@dataclass(frozen=True)
class HomographyRanges:
    """Half-widths of the uniform sampling intervals for each component."""

    rotation: float = 0.2        # radians
    scale: float = 0.1           # relative, factor in [1-s, 1+s]
    perspective: float = 5e-4    # bottom-row coefficients
    translation: float = 8.0     # pixels

    def __post_init__(self):
        for name in ("rotation", "scale", "perspective", "translation"):
            v = getattr(self, name)
            if v < 0.0 or not math.isfinite(v):
                raise ParameterDomainError(f"{name} range must be >= 0, got {v}")
        if self.scale >= 1.0:
            raise ParameterDomainError(f"scale range must be < 1, got {self.scale}")


def _compose_homography(
    center: tuple[float, float],
    angle: float,
    scale: float,
    px: float,
    py: float,
    tx: float,
    ty: float,
) -> np.ndarray:
    cx, cy = center
    c, s = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    sc = np.diag([scale, scale, 1.0])
    pe = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    to_center = np.array([[1.0, 0.0, cx], [0.0, 1.0, cy], [0.0, 0.0, 1.0]])
    from_center = np.array([[1.0, 0.0, -cx], [0.0, 1.0, -cy], [0.0, 0.0, 1.0]])
    trans = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])
    return trans @ to_center @ rot @ sc @ pe @ from_center


def sample_homography(
    image_size: tuple[int, int], ranges: HomographyRanges, seed: int
) -> np.ndarray:
    """Random viewpoint-change homography, normalized so h[2,2] = 1.

    image_size is (height, width). Components are drawn uniformly in the
    order rotation, scale, perspective x, perspective y, translation x,
    translation y; a degenerate draw (|det| <= 1e-9) is redrawn up to 8
    times before failing.
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise DataError(f"image size must be positive, got {image_size}")
    center = ((w - 1) / 2.0, (h - 1) / 2.0)
    stream = rng.Stream(seed)
    for _ in range(9):
        angle = stream.uniform(-ranges.rotation, ranges.rotation)
        scale = 1.0 + stream.uniform(-ranges.scale, ranges.scale)
        px = stream.uniform(-ranges.perspective, ranges.perspective)
        py = stream.uniform(-ranges.perspective, ranges.perspective)
        tx = stream.uniform(-ranges.translation, ranges.translation)
        ty = stream.uniform(-ranges.translation, ranges.translation)
        m = _compose_homography(center, angle, scale, px, py, tx, ty)
        if abs(m[2, 2]) < 1e-12:
            continue
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) > 1e-9:
            return m
    raise NumericalError("could not sample an invertible homography in 9 draws")


def apply_homography(h: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Projective transform of (N, 2) xy points."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise DataError(f"homography must be 3x3, got {h.shape}")
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    hom = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    with np.errstate(divide="ignore", invalid="ignore"):
        return hom[:, :2] / hom[:, 2:3]


def warp_image_bilinear(
    img: np.ndarray, h: np.ndarray, fill: float = 0.5
) -> np.ndarray:
    """Image warped so content at x appears at H(x); bilinear sampling.

    Output pixel p is read from H^-1(p) in the source; samples falling
    outside the source get the fill value.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"warp expects a grayscale image, got shape {img.shape}")
    hh, ww = img.shape
    hinv = np.linalg.inv(np.asarray(h, dtype=np.float64))
    ys, xs = np.mgrid[0:hh, 0:ww]
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    src = apply_homography(hinv, pts)
    sx, sy = src[:, 0], src[:, 1]
    valid = np.isfinite(sx) & np.isfinite(sy)
    valid &= (sx >= 0) & (sx <= ww - 1) & (sy >= 0) & (sy <= hh - 1)
    x0 = np.clip(np.floor(sx), 0, ww - 1).astype(int)
    y0 = np.clip(np.floor(sy), 0, hh - 1).astype(int)
    x1 = np.minimum(x0 + 1, ww - 1)
    y1 = np.minimum(y0 + 1, hh - 1)
    fx = np.where(valid, sx - x0, 0.0)
    fy = np.where(valid, sy - y0, 0.0)
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    out = top * (1 - fy) + bot * fy
    out = np.where(valid, out, fill)
    return out.reshape(hh, ww)


@dataclass(frozen=True)
class MatchMargins:
    """Hinge margins in Hamming units: matches pulled under P, non-matches pushed past Q."""

    p: float = 20.0
    q: float = 150.0

    def __post_init__(self):
        if not (0.0 <= self.p < self.q <= 256.0):
            raise ParameterDomainError(
                f"margins must satisfy 0 <= P < Q <= 256, got P={self.p} Q={self.q}"
            )


@dataclass(frozen=True)
class Match:
    """One correspondence: original keypoint, its projection, the matched detection."""

    index_a: int
    index_b: int
    x: tuple[float, float]
    x_proj: tuple[float, float]
    x_b: tuple[float, float]
    nonmatch: tuple[int, ...] = ()


@dataclass(frozen=True)
class CorrespondenceSet:
    """Matches plus, per match, the indices of its non-matching candidates.

    nonmatch entries index into `matches`; candidate j of match i satisfies
    |x_proj_j - x_proj_i| > threshold by construction.
    """

    matches: tuple[Match, ...]
    threshold: float


def build_correspondences(
    kps_a: Sequence[Keypoint],
    h: np.ndarray,
    kps_b: Sequence[Keypoint],
    threshold: float = 8.0,
    match_radius: float = 2.0,
    image_size: Optional[tuple[int, int]] = None,
) -> CorrespondenceSet:
    """Project kps_a through h and pair with kps_b detections.

    A detection within match_radius (Euclidean) of a projection is a match
    candidate; assignment is one-to-one greedy by ascending distance, ties
    broken by row-major order of the detection then of the original point.
    Projections landing outside image_size (height, width), when given,
    are discarded first. Non-matching candidates of match i are the other
    matches whose projections lie farther than `threshold` from its own.
    """
    if threshold <= match_radius:
        raise ParameterDomainError(
            f"non-match threshold ({threshold}) must exceed match radius ({match_radius})"
        )
    if not kps_a or not kps_b:
        return CorrespondenceSet(matches=(), threshold=threshold)

    pts_a = np.array([[kp.x, kp.y] for kp in kps_a], dtype=np.float64)
    pts_b = np.array([[kp.x, kp.y] for kp in kps_b], dtype=np.float64)
    proj = apply_homography(np.asarray(h, dtype=np.float64), pts_a)

    ok = np.all(np.isfinite(proj), axis=1)
    if image_size is not None:
        hh, ww = image_size
        ok &= (proj[:, 0] >= 0) & (proj[:, 0] < ww) & (proj[:, 1] >= 0) & (proj[:, 1] < hh)

    pairs = []
    for i in np.nonzero(ok)[0]:
        d = np.hypot(pts_b[:, 0] - proj[i, 0], pts_b[:, 1] - proj[i, 1])
        for j in np.nonzero(d <= match_radius)[0]:
            pairs.append(
                (d[j], (pts_b[j, 1], pts_b[j, 0]), (pts_a[i, 1], pts_a[i, 0]), int(i), int(j))
            )
    pairs.sort()
    used_a: set[int] = set()
    used_b: set[int] = set()
    chosen: list[tuple[int, int]] = []
    for _, _, _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        chosen.append((i, j))

    matches = [
        Match(
            index_a=i,
            index_b=j,
            x=(float(pts_a[i, 0]), float(pts_a[i, 1])),
            x_proj=(float(proj[i, 0]), float(proj[i, 1])),
            x_b=(float(pts_b[j, 0]), float(pts_b[j, 1])),
        )
        for i, j in chosen
    ]
    if matches:
        pr = np.array([m.x_proj for m in matches])
        dist = np.hypot(
            pr[:, None, 0] - pr[None, :, 0], pr[:, None, 1] - pr[None, :, 1]
        )
        out = []
        for i, m in enumerate(matches):
            far = np.nonzero(dist[i] > threshold)[0]
            cands = tuple(int(j) for j in far if j != i)
            out.append(
                Match(
                    index_a=m.index_a,
                    index_b=m.index_b,
                    x=m.x,
                    x_proj=m.x_proj,
                    x_b=m.x_b,
                    nonmatch=cands,
                )
            )
        matches = out
    return CorrespondenceSet(matches=tuple(matches), threshold=threshold)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Number of differing bits between two packed descriptors."""
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise DataError(f"descriptor byte lengths differ: {a.shape} vs {b.shape}")
    return int(_POPCOUNT8[np.bitwise_xor(a, b)].sum())


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(Na, Nb) Hamming distances between two packed descriptor arrays."""
    a = np.atleast_2d(np.asarray(a, dtype=np.uint8))
    b = np.atleast_2d(np.asarray(b, dtype=np.uint8))
    if a.shape[1] != b.shape[1]:
        raise DataError(f"descriptor byte lengths differ: {a.shape[1]} vs {b.shape[1]}")
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return _POPCOUNT8[x].sum(axis=2).astype(np.int64)


@dataclass
class LdResult:
    """Matching loss value, per-descriptor-array gradients, and hinge diagnostics."""

    value: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    p_terms: np.ndarray
    n_terms: np.ndarray


def _ld_core(
    corr: CorrespondenceSet, margins: MatchMargins, va: np.ndarray, vb: np.ndarray
) -> LdResult:
    """Hinge loss and gradients on +-1 (or relaxed real) descriptor values.

    dist(a, b) = (D - a.b) / 2. Subgradients of max/min flow through the
    attained branch only; ties pick the first branch in evaluation order
    (the d_i side before the d_i^t side, then the lowest candidate index),
    and an inactive hinge at the boundary contributes zero.
    """
    matches = corr.matches
    n = len(matches)
    if n == 0:
        raise EmptyCorrespondenceError("matching loss needs at least one correspondence")
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[1]:
        raise DataError(
            f"descriptor arrays must be (N, D) with equal D, got {va.shape} and {vb.shape}"
        )
    dim = va.shape[1]
    ga = np.zeros_like(va)
    gb = np.zeros_like(vb)
    p_terms = np.zeros(n)
    n_terms = np.zeros(n)

    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    # cross[i, j] = dist(va of match i, vb of match j); its transpose entry
    # gives dist(vb of match i, va of match j)
    cross = (dim - va[ia] @ vb[ib].T) / 2.0

    for mi, m in enumerate(matches):
        p_i = max(0.0, cross[mi, mi] - margins.p)
        p_terms[mi] = p_i
        if p_i > 0.0:
            ga[m.index_a] += -(p_i / n) * vb[m.index_b]
            gb[m.index_b] += -(p_i / n) * va[m.index_a]

        if not m.nonmatch:
            continue
        cands = np.array(m.nonmatch)
        side_a = cross[mi, cands]
        side_b = cross[cands, mi]
        ka = int(np.argmin(side_a))
        kb = int(np.argmin(side_b))
        # d_i side wins ties, then the lowest candidate index (argmin is
        # first-occurrence and cands ascend)
        if side_a[ka] <= side_b[kb]:
            best, side, j = float(side_a[ka]), "a", int(cands[ka])
        else:
            best, side, j = float(side_b[kb]), "b", int(cands[kb])
        n_i = max(0.0, margins.q - best)
        n_terms[mi] = n_i
        if n_i > 0.0:
            if side == "a":
                other = matches[j].index_b
                ga[m.index_a] += (n_i / n) * vb[other]
                gb[other] += (n_i / n) * va[m.index_a]
            else:
                other = matches[j].index_a
                gb[m.index_b] += (n_i / n) * va[other]
                ga[other] += (n_i / n) * vb[m.index_b]

    value = float(np.mean(p_terms**2 + n_terms**2))
    return LdResult(value=value, grad_a=ga, grad_b=gb, p_terms=p_terms, n_terms=n_terms)


def ld_loss_grad(
    corr: CorrespondenceSet,
    margins: MatchMargins,
    desc_a: np.ndarray,
    desc_b: np.ndarray,
) -> LdResult:
    """Matching loss on binarized descriptors, gradients via the straight-through mask.

    desc_a / desc_b hold the pre-binarization descriptor of every keypoint
    (rows indexed by Match.index_a / index_b). Distances use the signs;
    the returned gradients are with respect to the pre-binarization values.
    """
    desc_a = np.asarray(desc_a, dtype=np.float64)
    desc_b = np.asarray(desc_b, dtype=np.float64)
    sa, ma = binarize_ste(desc_a)
    sb, mb = binarize_ste(desc_b)
    res = _ld_core(corr, margins, sa, sb)
    res.grad_a = res.grad_a * ma
    res.grad_b = res.grad_b * mb
    return res


def ld_loss_relaxed(
    corr: CorrespondenceSet,
    margins: MatchMargins,
    desc_a: np.ndarray,
    desc_b: np.ndarray,
) -> LdResult:
    """Continuous surrogate of the matching loss: descriptor values used directly.

    Smooth wherever no hinge or min sits exactly at a switching point, so
    finite differences of this function validate the analytic gradients.
    """
    return _ld_core(
        corr,
        margins,
        np.asarray(desc_a, dtype=np.float64),
        np.asarray(desc_b, dtype=np.float64),
    )


def nn_match(
    desc_a: np.ndarray,
    desc_b: np.ndarray,
    max_distance: Optional[int] = None,
    ratio: Optional[float] = None,
) -> list[tuple[int, int, int]]:
    """Mutual nearest neighbours under Hamming distance.

    Ties resolve to the lowest index on both sides. Optional filters: an
    absolute distance cap, and a ratio test (best < ratio * second-best
    within the row; a row with no second candidate passes).
    """
    a = np.atleast_2d(np.asarray(desc_a, dtype=np.uint8))
    b = np.atleast_2d(np.asarray(desc_b, dtype=np.uint8))
    if a.size == 0 or b.size == 0:
        return []
    dm = hamming_matrix(a, b)
    best_b = np.argmin(dm, axis=1)
    best_a = np.argmin(dm, axis=0)
    out = []
    for i in range(dm.shape[0]):
        j = int(best_b[i])
        if int(best_a[j]) != i:
            continue
        d = int(dm[i, j])
        if max_distance is not None and d > max_distance:
            continue
        if ratio is not None and dm.shape[1] > 1:
            row = np.delete(dm[i], j)
            if not d < ratio * int(row.min()):
                continue
        out.append((i, j, d))
    return out

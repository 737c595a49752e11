"""Trajectory alignment and absolute trajectory error.

Estimated and ground-truth position sequences are associated by timestamp
(linear resampling of the denser trajectory), aligned with the closed-form
least-squares similarity (scale, rotation, translation), and scored by the
RMSE of the aligned residuals. A grid search over a constant time offset,
re-aligning at every offset, compensates clock skew between systems.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, NumericalError


@dataclass(frozen=True)
class Trajectory:
    """Timestamped positions with optional unit-quaternion orientations."""

    times: np.ndarray
    positions: np.ndarray
    quaternions: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64).reshape(-1)
        p = np.asarray(self.positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise DataError(f"positions must be N x 3, got {p.shape}")
        if len(t) != len(p):
            raise DataError(f"{len(t)} timestamps vs {len(p)} positions")
        if len(t) == 0:
            raise DataError("trajectory is empty")
        if len(t) > 1 and not np.all(np.diff(t) > 0.0):
            raise DataError("timestamps must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(p))):
            raise DataError("trajectory contains non-finite values")
        q = self.quaternions
        if q is not None:
            q = np.asarray(q, dtype=np.float64)
            if q.shape != (len(t), 4):
                raise DataError(f"quaternions must be N x 4, got {q.shape}")
            norms = np.linalg.norm(q, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise DataError("quaternions must be unit-norm within 1e-6")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "quaternions", q)

    def __len__(self) -> int:
        return len(self.times)


@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise DataError(f"rotation must be 3x3, got {r.shape}")
        if self.scale <= 0.0:
            raise DataError(f"scale must be > 0, got {self.scale}")
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-9 or np.linalg.det(r) < 0.0:
            raise DataError("rotation must be orthonormal with determinant +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return self.scale * pts @ self.rotation.T + self.translation


def umeyama_align(est: np.ndarray, gt: np.ndarray) -> SimilarityTransform:
    """Least-squares similarity mapping est onto gt.

    Closed-form solution via the SVD of the cross-covariance, with the
    determinant-sign correction so the rotation is proper. Requires at
    least 3 non-collinear points.
    """
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DataError(
            f"alignment needs two equal N x 3 arrays, got {est.shape} and {gt.shape}"
        )
    n = len(est)
    if n < 3:
        raise DataError(f"alignment needs at least 3 points, got {n}")
    mu_e = est.mean(axis=0)
    mu_g = gt.mean(axis=0)
    de = est - mu_e
    dg = gt - mu_g
    var_e = float(np.sum(de**2)) / n
    if var_e <= 0.0:
        raise NumericalError("degenerate alignment: estimated points are all identical")
    cov = dg.T @ de / n
    u, d, vt = np.linalg.svd(cov)
    if d[1] <= 1e-12 * max(d[0], 1e-300):
        raise NumericalError("degenerate alignment: points are collinear")
    s = np.eye(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0.0:
        s[2, 2] = -1.0
    rot = u @ s @ vt
    scale = float(np.trace(np.diag(d) @ s)) / var_e
    if scale <= 0.0:
        raise NumericalError(f"degenerate alignment: non-positive scale {scale}")
    trans = mu_g - scale * rot @ mu_e
    return SimilarityTransform(scale=scale, rotation=rot, translation=trans)


def ate_rmse(est: np.ndarray, gt: np.ndarray, transform: SimilarityTransform) -> float:
    """Root-mean-square norm of gt - transform(est)."""
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise DataError(f"trajectory shapes differ: {est.shape} vs {gt.shape}")
    if len(est) == 0:
        raise DataError("error undefined for empty trajectories")
    residual = gt - transform.apply(est)
    return float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))


def resample_trajectory(traj: Trajectory, query_times: np.ndarray) -> np.ndarray:
    """Positions linearly interpolated at the query timestamps.

    Queries must lie within the recorded time range; a query landing
    exactly on a sample returns that sample's position bit-for-bit.
    """
    q = np.asarray(query_times, dtype=np.float64).reshape(-1)
    if len(traj) < 2:
        raise DataError("resampling needs at least 2 samples")
    t = traj.times
    if q.size and (q.min() < t[0] or q.max() > t[-1]):
        raise DataError(
            f"query range [{q.min()}, {q.max()}] outside trajectory range [{t[0]}, {t[-1]}]"
        )
    hi = np.clip(np.searchsorted(t, q, side="left"), 1, len(t) - 1)
    lo = hi - 1
    lam = (q - t[lo]) / (t[hi] - t[lo])
    out = (1.0 - lam)[:, None] * traj.positions[lo] + lam[:, None] * traj.positions[hi]
    exact = t[hi] == q
    out[exact] = traj.positions[hi[exact]]
    exact0 = t[lo] == q
    out[exact0] = traj.positions[lo[exact0]]
    return out


@dataclass(frozen=True)
class OffsetSearchResult:
    offset: float
    ate: float
    transform: SimilarityTransform
    matched_points: int


def time_offset_search(
    est: Trajectory,
    gt: Trajectory,
    offset_range: float,
    step: float,
    min_points: int = 3,
) -> OffsetSearchResult:
    """Grid search of a constant clock offset minimizing the aligned error.

    Offsets are integer multiples of `step` in [-offset_range, offset_range]
    (0 always included). For each offset the ground truth is resampled at
    est timestamps + offset, a fresh alignment computed, and the error
    evaluated on the samples whose shifted timestamp falls inside the
    ground-truth range. Ties resolve to the smallest offset.
    """
    if step <= 0.0:
        raise DataError(f"offset step must be > 0, got {step}")
    if offset_range < 0.0:
        raise DataError(f"offset range must be >= 0, got {offset_range}")
    n_steps = int(np.floor(offset_range / step + 1e-12))
    offsets = [k * step for k in range(-n_steps, n_steps + 1)]
    best: Optional[OffsetSearchResult] = None
    for offset in offsets:
        shifted = est.times + offset
        inside = (shifted >= gt.times[0]) & (shifted <= gt.times[-1])
        if np.count_nonzero(inside) < min_points:
            continue
        est_pts = est.positions[inside]
        gt_pts = resample_trajectory(gt, shifted[inside])
        try:
            transform = umeyama_align(est_pts, gt_pts)
        except NumericalError:
            continue
        ate = ate_rmse(est_pts, gt_pts, transform)
        if best is None or ate < best.ate:
            best = OffsetSearchResult(
                offset=float(offset),
                ate=ate,
                transform=transform,
                matched_points=int(np.count_nonzero(inside)),
            )
    if best is None:
        raise DataError("no offset in range gives enough overlapping samples to align")
    return best


def read_tum(path) -> Trajectory:
    """TUM-style trajectory text: 't x y z [qx qy qz qw]' lines, '#' comments."""
    times, positions, quats = [], [], []
    saw_quat = False
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as e:
        raise DataError(f"cannot read trajectory {path}: {e}") from e
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) not in (4, 8):
            raise DataError(
                f"{path}:{ln}: expected 4 or 8 numbers per line, got {len(fields)}"
            )
        try:
            nums = [float(v) for v in fields]
        except ValueError as e:
            raise DataError(f"{path}:{ln}: {e}") from e
        times.append(nums[0])
        positions.append(nums[1:4])
        if len(nums) == 8:
            quats.append(nums[4:8])
            saw_quat = True
        else:
            quats.append([0.0, 0.0, 0.0, 1.0])
    if not times:
        raise DataError(f"trajectory file {path} holds no samples")
    return Trajectory(
        times=np.array(times),
        positions=np.array(positions),
        quaternions=np.array(quats) if saw_quat else None,
    )


def tum_text(traj: Trajectory) -> str:
    """TUM-format text for a trajectory; identity quaternion when absent."""
    q = traj.quaternions
    lines = []
    for i in range(len(traj)):
        quat = q[i] if q is not None else (0.0, 0.0, 0.0, 1.0)
        vals = [traj.times[i], *traj.positions[i], *quat]
        lines.append(" ".join(repr(float(v)) for v in vals))
    return "\n".join(lines) + "\n"


def ate_report_json(result: OffsetSearchResult) -> str:
    """JSON report: offset, similarity parameters, and the error in meters."""
    doc = {
        "offset": result.offset,
        "scale": result.transform.scale,
        "rotation": result.transform.rotation.tolist(),
        "translation": result.transform.translation.tolist(),
        "ate": result.ate,
        "matched_points": result.matched_points,
    }
    return json.dumps(doc, indent=2) + "\n"

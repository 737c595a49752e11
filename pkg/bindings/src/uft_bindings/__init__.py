"""Array-interchange wrappers around the uft underwater feature toolkit.

External training loops hand in row-major contiguous float32 buffers
(anything numpy can view: ndarrays, memoryviews, objects with
``__array_interface__``) and receive numpy arrays back. No numerics live
here; every call validates the incoming view and forwards to the core
library, so results are identical to calling uft on the same bytes.

Packed binary descriptors are the one non-float payload: ``nn_match``
accepts uint8 records directly, or float32 descriptor values which it
packs by sign first.

All functions are pure; the module holds no state and is safe to call
from multiple host threads.
"""
from dataclasses import dataclass
from typing import Optional

import numpy as np

import uft
from uft import heads, losses, matching, water
from uft.errors import DataError

__version__ = "0.1.0"

__all__ = [
    "BoundTensorView",
    "binarize_ste",
    "ld_loss_grad",
    "lp_loss",
    "nn_match",
    "synthesize_underwater",
]


@dataclass(frozen=True)
class BoundTensorView:
    """Pointer-free description of a host array: shape, strides, element type."""

    shape: tuple[int, ...]
    strides: tuple[int, ...]
    typestr: str

    @classmethod
    def of(cls, arr: np.ndarray) -> "BoundTensorView":
        return cls(tuple(arr.shape), tuple(arr.strides), arr.dtype.str)


def _ingest(name: str, obj, dtype, rank: Optional[int] = None) -> np.ndarray:
    """View a host buffer without copying and enforce the input contract."""
    try:
        arr = np.asarray(obj)
    except Exception as exc:
        raise DataError(f"{name}: not a readable array: {exc}") from exc
    if arr.dtype != np.dtype(dtype):
        raise DataError(
            f"{name}: element type must be {np.dtype(dtype).name}, got {arr.dtype.name}"
        )
    if arr.size == 0:
        raise DataError(f"{name}: empty array (shape {arr.shape})")
    if rank is not None and arr.ndim != rank:
        raise DataError(f"{name}: expected a rank-{rank} array, got shape {arr.shape}")
    if not arr.flags["C_CONTIGUOUS"]:
        view = BoundTensorView.of(arr)
        raise DataError(
            f"{name}: requires row-major contiguous layout, "
            f"got strides {view.strides} for shape {view.shape}"
        )
    return arr


def synthesize_underwater(
    image,
    depth,
    beta,
    b,
    kd,
    *,
    water_depth: float = 5.0,
    surface_irradiance=(1.0, 1.0, 1.0),
    max_scene_depth: float = 3.0,
    noise_sigma: float = 0.01,
    seed: int = 0,
    zero_depth_is_hole: bool = False,
) -> np.ndarray:
    """Apply the attenuation/veiling model to a float32 RGBD frame.

    `image` is HxWx3 in [0, 1]; `depth` is HxW metres. beta/b/kd are RGB
    coefficient triplets. Returns the underwater image as float32.
    """
    img = _ingest("image", image, np.float32, rank=3)
    dep = _ingest("depth", depth, np.float32, rank=2)
    params = water.SpectralWaterParams(
        beta=np.asarray(beta, dtype=np.float64),
        b=np.asarray(b, dtype=np.float64),
        kd=np.asarray(kd, dtype=np.float64),
    )
    scene = water.ScenePhysics(
        water_depth=water_depth,
        surface_irradiance=tuple(float(v) for v in surface_irradiance),
        max_scene_depth=max_scene_depth,
        noise_sigma=noise_sigma,
    )
    frame = water.RgbdFrame(img.astype(np.float64), dep.astype(np.float64))
    out = water.synthesize_underwater(
        frame, params, scene, seed=seed, zero_depth_is_hole=zero_depth_is_hole
    )
    return out.astype(np.float32)


def lp_loss(
    teacher,
    student,
    *,
    pkt_weight: float = 1.0,
    cell_subsample: Optional[int] = None,
    seed: int = 0,
):
    """Detector distillation loss on float32 logit grids.

    Returns (value, gradient wrt student as float32, per-term breakdown).
    """
    t = _ingest("teacher", teacher, np.float32, rank=3)
    s = _ingest("student", student, np.float32, rank=3)
    res = losses.lp_loss(
        t.astype(np.float64),
        s.astype(np.float64),
        losses.LossWeights(pkt_weight=pkt_weight),
        cell_subsample=cell_subsample,
        seed=seed,
    )
    parts = {k: float(v) for k, v in res.parts.items()}
    return float(res.value), res.grad.astype(np.float32), parts


def ld_loss_grad(
    desc_a,
    desc_b,
    nonmatch,
    *,
    margin_p: float = 20.0,
    margin_q: float = 150.0,
):
    """Binary descriptor hinge loss on aligned float32 descriptor rows.

    Row i of `desc_a` and `desc_b` form correspondence i. `nonmatch` is an
    NxN boolean (or uint8) matrix; entry [i, j] marks row j as a
    non-matching candidate for row i. The diagonal is ignored. The host is
    responsible for only marking pairs that are spatially far apart.

    Returns (value, grad_a, grad_b) with float32 gradients.
    """
    da = _ingest("desc_a", desc_a, np.float32, rank=2)
    db = _ingest("desc_b", desc_b, np.float32, rank=2)
    if da.shape != db.shape:
        raise DataError(f"descriptor sets differ in shape: {da.shape} vs {db.shape}")
    mask = np.asarray(nonmatch)
    if mask.dtype not in (np.dtype(np.bool_), np.dtype(np.uint8)):
        raise DataError(f"nonmatch: element type must be bool or uint8, got {mask.dtype.name}")
    n = da.shape[0]
    if mask.shape != (n, n):
        raise DataError(f"nonmatch: expected shape {(n, n)}, got {mask.shape}")
    origin = (0.0, 0.0)
    ms = []
    for i in range(n):
        cand = tuple(int(j) for j in np.nonzero(mask[i])[0] if j != i)
        ms.append(matching.Match(i, i, origin, origin, origin, cand))
    corr = matching.CorrespondenceSet(tuple(ms), threshold=0.0)
    margins = matching.MatchMargins(p=margin_p, q=margin_q)
    res = matching.ld_loss_grad(corr, margins, da.astype(np.float64), db.astype(np.float64))
    return float(res.value), res.grad_a.astype(np.float32), res.grad_b.astype(np.float32)


def binarize_ste(raw):
    """Signs and straight-through mask of float32 descriptor values."""
    arr = _ingest("raw", raw, np.float32)
    signs, mask = heads.binarize_ste(arr.astype(np.float64))
    return signs.astype(np.float32), mask.astype(np.float32)


def nn_match(
    desc_a,
    desc_b,
    *,
    max_distance: Optional[int] = None,
    ratio: Optional[float] = None,
) -> np.ndarray:
    """Mutual nearest-neighbour matching; returns an Mx3 int32 array of
    (index_a, index_b, distance) rows.

    Inputs are either packed uint8 descriptor records or float32
    descriptor values, which are packed by sign before matching.
    """

    def as_packed(name, obj):
        arr = np.asarray(obj)
        if arr.dtype == np.dtype(np.uint8):
            return _ingest(name, arr, np.uint8, rank=2)
        return heads.pack_descriptor_bits(_ingest(name, arr, np.float32, rank=2))

    a = as_packed("desc_a", desc_a)
    b = as_packed("desc_b", desc_b)
    pairs = matching.nn_match(a, b, max_distance=max_distance, ratio=ratio)
    return np.asarray(pairs, dtype=np.int32).reshape(-1, 3)


if __version__ != uft.__version__:  # pragma: no cover
    raise ImportError(
        f"uft-train-bindings {__version__} requires uft {__version__}, "
        f"found {uft.__version__}"
    )

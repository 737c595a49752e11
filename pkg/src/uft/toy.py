"""Desk-scale distillation harness with a per-cell linear student.

The student maps each 8x8 grayscale cell (64 pixels) to 65 detector
logits and a D-dimensional raw descriptor; the descriptor is shared by
the whole cell (nearest-neighbour upsampling), L2-normalized, and
binarized through the straight-through estimator. This keeps every loss
and gradient path of the full objective L = L_p + alpha * L_d
hand-derivable while replacing the convolutional network the losses were
designed for.

A built-in teacher renders random shapes (rectangles, triangles, lines)
and labels each true corner's cell with a one-hot logit vector on the
corner's sub-pixel channel; every other cell is one-hot on the dustbin.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import rng, water
from .errors import DataError, ParameterDomainError
from .heads import (
    CELL,
    DETECTOR_CHANNELS,
    DUSTBIN,
    Keypoint,
    binarize_ste,
    detect_keypoints,
    detector_probability_map,
)
from .losses import LossWeights, lp_loss
from .matching import (
    CorrespondenceSet,
    HomographyRanges,
    MatchMargins,
    build_correspondences,
    ld_loss_grad,
    ld_loss_relaxed,
    sample_homography,
    warp_image_bilinear,
)

PIXELS_PER_CELL = CELL * CELL
NORM_FLOOR = 1e-12


@dataclass
class ToyStudent:
    """Per-cell linear model: 64 pixels -> 65 logits and a D-d raw descriptor."""

    w_det: np.ndarray
    b_det: np.ndarray
    w_desc: np.ndarray
    b_desc: np.ndarray

    def __post_init__(self):
        self.w_det = np.asarray(self.w_det, dtype=np.float64)
        self.b_det = np.asarray(self.b_det, dtype=np.float64)
        self.w_desc = np.asarray(self.w_desc, dtype=np.float64)
        self.b_desc = np.asarray(self.b_desc, dtype=np.float64)
        if self.w_det.shape != (DETECTOR_CHANNELS, PIXELS_PER_CELL):
            raise DataError(
                f"w_det must be {DETECTOR_CHANNELS}x{PIXELS_PER_CELL}, got {self.w_det.shape}"
            )
        if self.b_det.shape != (DETECTOR_CHANNELS,):
            raise DataError(f"b_det must have {DETECTOR_CHANNELS} entries")
        d = self.w_desc.shape[0]
        if self.w_desc.shape != (d, PIXELS_PER_CELL) or not 16 <= d <= 256:
            raise DataError(
                f"w_desc must be Dx{PIXELS_PER_CELL} with 16 <= D <= 256, got {self.w_desc.shape}"
            )
        if self.b_desc.shape != (d,):
            raise DataError(f"b_desc must have {d} entries, got {self.b_desc.shape}")
        for name in ("w_det", "b_det", "w_desc", "b_desc"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DataError(f"{name} contains non-finite values")

    @property
    def descriptor_dim(self) -> int:
        return self.w_desc.shape[0]

    @classmethod
    def zeros(cls, descriptor_dim: int = 256) -> "ToyStudent":
        return cls(
            w_det=np.zeros((DETECTOR_CHANNELS, PIXELS_PER_CELL)),
            b_det=np.zeros(DETECTOR_CHANNELS),
            w_desc=np.zeros((descriptor_dim, PIXELS_PER_CELL)),
            b_desc=np.zeros(descriptor_dim),
        )

    @classmethod
    def random(cls, seed: int, descriptor_dim: int = 256, scale: float = 0.1) -> "ToyStudent":
        stream = rng.Stream(seed)
        return cls(
            w_det=scale * stream.normal((DETECTOR_CHANNELS, PIXELS_PER_CELL)),
            b_det=scale * stream.normal((DETECTOR_CHANNELS,)),
            w_desc=scale * stream.normal((descriptor_dim, PIXELS_PER_CELL)),
            b_desc=scale * stream.normal((descriptor_dim,)),
        )

    def copy(self) -> "ToyStudent":
        return ToyStudent(
            w_det=self.w_det.copy(),
            b_det=self.b_det.copy(),
            w_desc=self.w_desc.copy(),
            b_desc=self.b_desc.copy(),
        )


def cell_pixels(img: np.ndarray) -> np.ndarray:
    """(H, W) image to (Hc, Wc, 64) row-major flattened 8x8 cells."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise DataError(f"expected a grayscale image, got shape {img.shape}")
    h, w = img.shape
    if h % CELL or w % CELL:
        raise DataError(f"image size must be divisible by {CELL}, got {img.shape}")
    hc, wc = h // CELL, w // CELL
    return img.reshape(hc, CELL, wc, CELL).transpose(0, 2, 1, 3).reshape(hc, wc, PIXELS_PER_CELL)


@dataclass
class ToyForward:
    """Everything the backward pass needs from one image."""

    cells: np.ndarray        # (Hc, Wc, 64) inputs
    logits: np.ndarray       # (Hc, Wc, 65)
    desc_raw: np.ndarray     # (Hc, Wc, D)
    desc_norm: np.ndarray    # (Hc, Wc, D), unit rows (eps floor)
    raw_norms: np.ndarray    # (Hc, Wc)
    signs: np.ndarray        # (Hc, Wc, D), +-1
    masks: np.ndarray        # (Hc, Wc, D), STE backward mask


def student_forward(img: np.ndarray, model: ToyStudent) -> ToyForward:
    """Linear per-cell forward pass with normalization and binarization."""
    cells = cell_pixels(img)
    logits = cells @ model.w_det.T + model.b_det
    desc_raw = cells @ model.w_desc.T + model.b_desc
    raw_norms = np.linalg.norm(desc_raw, axis=-1)
    desc_norm = desc_raw / np.maximum(raw_norms, NORM_FLOOR)[:, :, None]
    signs, masks = binarize_ste(desc_norm)
    return ToyForward(
        cells=cells,
        logits=logits,
        desc_raw=desc_raw,
        desc_norm=desc_norm,
        raw_norms=raw_norms,
        signs=signs,
        masks=masks,
    )


# ---------------------------------------------------------------------------
# synthetic shape scenes and the teacher oracle


@dataclass(frozen=True)
class Shape:
    """Filled primitive with the vertices that count as corners."""

    kind: str  # "rect", "tri" or "line"
    vertices: tuple[tuple[float, float], ...]
    shade: float
    width: float = 2.0  # line thickness, ignored for filled shapes


def random_shapes(
    seed: int, image_size: tuple[int, int], count_range: tuple[int, int] = (2, 4)
) -> list[Shape]:
    """Random rectangles, triangles and line segments inside the image."""
    h, w = image_size
    stream = rng.Stream(seed)
    n = stream.randint(count_range[0], count_range[1] + 1)
    shapes = []
    margin = 4.0
    for _ in range(n):
        kind = ("rect", "tri", "line")[stream.randint(0, 3)]
        shade = stream.uniform(0.0, 1.0)
        # keep shades away from the mid-gray background
        shade = 0.05 + 0.25 * shade if shade < 0.5 else 0.7 + 0.25 * (shade - 0.5)

        def pt() -> tuple[float, float]:
            return (
                stream.uniform(margin, w - 1 - margin),
                stream.uniform(margin, h - 1 - margin),
            )

        if kind == "rect":
            x0, y0 = pt()
            x1 = x0 + stream.uniform(8.0, max(9.0, (w - margin) - x0))
            y1 = y0 + stream.uniform(8.0, max(9.0, (h - margin) - y0))
            x1 = min(x1, w - 1 - margin)
            y1 = min(y1, h - 1 - margin)
            verts = ((x0, y0), (x1, y0), (x1, y1), (x0, y1))
        elif kind == "tri":
            verts = (pt(), pt(), pt())
        else:
            verts = (pt(), pt())
        shapes.append(Shape(kind=kind, vertices=verts, shade=shade))
    return shapes


def _coverage(shape: Shape, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Inside test of supersample points (pixel centers at integer coords)."""
    if shape.kind == "rect":
        (x0, y0), _, (x1, y1), _ = shape.vertices
        return (sx >= x0) & (sx <= x1) & (sy >= y0) & (sy <= y1)
    if shape.kind == "tri":
        (ax, ay), (bx, by), (cx, cy) = shape.vertices
        d1 = (sx - bx) * (ay - by) - (ax - bx) * (sy - by)
        d2 = (sx - cx) * (by - cy) - (bx - cx) * (sy - cy)
        d3 = (sx - ax) * (cy - ay) - (cx - ax) * (sy - ay)
        neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
        pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
        return ~(neg & pos)
    (x0, y0), (x1, y1) = shape.vertices
    vx, vy = x1 - x0, y1 - y0
    denom = max(vx * vx + vy * vy, 1e-12)
    t = np.clip(((sx - x0) * vx + (sy - y0) * vy) / denom, 0.0, 1.0)
    dist2 = (sx - (x0 + t * vx)) ** 2 + (sy - (y0 + t * vy)) ** 2
    return dist2 <= (shape.width / 2.0) ** 2


def render_scene(
    shapes: Sequence[Shape], image_size: tuple[int, int], seed: int, supersample: int = 4
) -> np.ndarray:
    """Anti-aliased grayscale rendering over a faint smooth background.

    The background is a bilinearly stretched coarse random grid around
    mid-gray, giving descriptors some texture without adding corners.
    """
    h, w = image_size
    ss = supersample
    offs = (np.arange(ss) + 0.5) / ss - 0.5
    sy = (np.arange(h)[:, None, None, None] + offs[None, None, :, None]).astype(np.float64)
    sx = (np.arange(w)[None, :, None, None] + offs[None, None, None, :]).astype(np.float64)
    sy = np.broadcast_to(sy, (h, w, ss, ss))
    sx = np.broadcast_to(sx, (h, w, ss, ss))

    grid = 0.42 + 0.12 * rng.Stream(seed).uniform(size=(5, 5))
    gy = np.linspace(0.0, 4.0, h)
    gx = np.linspace(0.0, 4.0, w)
    iy = np.minimum(gy.astype(int), 3)
    ix = np.minimum(gx.astype(int), 3)
    fy = gy - iy
    fx = gx - ix
    top = grid[iy][:, ix] * (1 - fx)[None, :] + grid[iy][:, ix + 1] * fx[None, :]
    bot = grid[iy + 1][:, ix] * (1 - fx)[None, :] + grid[iy + 1][:, ix + 1] * fx[None, :]
    img = top * (1 - fy)[:, None] + bot * fy[:, None]

    for shape in shapes:
        cov = _coverage(shape, sx, sy).mean(axis=(2, 3))
        img = img * (1.0 - cov) + shape.shade * cov
    return np.clip(img, 0.0, 1.0)


def corner_cells(
    shapes: Sequence[Shape], image_size: tuple[int, int]
) -> list[tuple[int, int, int]]:
    """(cell_y, cell_x, channel) for every in-bounds shape vertex.

    The vertex's pixel is its rounded coordinate; the channel is the
    pixel's position inside its 8x8 cell, row-major. Later shapes
    overwrite earlier labels when they share a cell.
    """
    h, w = image_size
    out = []
    for shape in shapes:
        for vx, vy in shape.vertices:
            px, py = int(round(vx)), int(round(vy))
            if not (0 <= px < w and 0 <= py < h):
                continue
            channel = (py % CELL) * CELL + (px % CELL)
            out.append((py // CELL, px // CELL, channel))
    return out


def synthetic_teacher(
    shapes: Sequence[Shape], image_size: tuple[int, int], seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Rendered grayscale image plus one-hot teacher logits.

    Corner cells get logit 10 on the corner's sub-pixel channel; all other
    cells get logit 10 on the dustbin.
    """
    h, w = image_size
    if h % CELL or w % CELL:
        raise DataError(f"image size must be divisible by {CELL}, got {image_size}")
    img = render_scene(shapes, image_size, seed)
    logits = np.zeros((h // CELL, w // CELL, DETECTOR_CHANNELS))
    logits[:, :, DUSTBIN] = 10.0
    for cy, cx, channel in corner_cells(shapes, image_size):
        logits[cy, cx, :] = 0.0
        logits[cy, cx, channel] = 10.0
    return img, logits


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    steps: int = 200
    seed: int = 0
    image_size: int = 64
    descriptor_dim: int = 256
    n_images: int = 10
    init_scale: float = 0.1
    detection_threshold: float = 0.01
    nms_radius: int = 4
    match_threshold: float = 8.0
    match_radius: float = 2.0
    cell_subsample: Optional[int] = None
    fixed_batch: bool = False
    weights: LossWeights = field(default_factory=LossWeights)
    margins: MatchMargins = field(default_factory=MatchMargins)
    ranges: HomographyRanges = field(default_factory=HomographyRanges)
    scene: water.ScenePhysics = field(default_factory=water.ScenePhysics)
    bounds: Optional[water.WaterTypeBounds] = None

    def __post_init__(self):
        if self.learning_rate < 0.0:
            raise ParameterDomainError(f"learning rate must be >= 0, got {self.learning_rate}")
        if self.steps < 1:
            raise ParameterDomainError(f"steps must be >= 1, got {self.steps}")
        if self.image_size % CELL:
            raise ParameterDomainError(
                f"image size must be divisible by {CELL}, got {self.image_size}"
            )
        if self.n_images < 1:
            raise ParameterDomainError("need at least one training image")

    def water_bounds(self) -> water.WaterTypeBounds:
        return self.bounds if self.bounds is not None else water.default_jerlov_bounds()


@dataclass
class SceneItem:
    """One dataset entry: in-air frame plus the teacher's labels."""

    gray_air: np.ndarray
    teacher_logits: np.ndarray
    frame: water.RgbdFrame
    shapes: list[Shape]


def _ramp_depth(image_size: tuple[int, int], max_depth: float) -> np.ndarray:
    h, w = image_size
    ramp = np.linspace(0.3, max(0.4, max_depth - 0.2), w)
    return np.tile(ramp, (h, 1))


def make_dataset(config: TrainConfig) -> list[SceneItem]:
    """Fixed synthetic-shape set; item i derives its seeds from the config seed."""
    size = (config.image_size, config.image_size)
    items = []
    for i in range(config.n_images):
        shapes = random_shapes(rng.derive_seed(config.seed, 1000 + i), size)
        gray, logits = synthetic_teacher(
            shapes, size, seed=rng.derive_seed(config.seed, 2000 + i)
        )
        frame = water.RgbdFrame(
            color=np.repeat(gray[:, :, None], 3, axis=2),
            depth=_ramp_depth(size, config.scene.max_scene_depth),
        )
        items.append(SceneItem(gray_air=gray, teacher_logits=logits, frame=frame, shapes=shapes))
    return items


@dataclass
class StepData:
    """Frozen inputs of one optimization step.

    Keypoints and correspondences are selected once here; the loss and its
    gradients are then smooth functions of the model parameters, which is
    what makes finite-difference checking of a whole step meaningful.
    """

    teacher_logits: np.ndarray
    gray_a: np.ndarray
    gray_b: np.ndarray
    kps_a: list[Keypoint]
    kps_b: list[Keypoint]
    corr: CorrespondenceSet


def prepare_step(
    model: ToyStudent, item: SceneItem, config: TrainConfig, step_seed: int
) -> StepData:
    """Synthesize the underwater pair and freeze this step's correspondences."""
    bounds = config.water_bounds()
    params = water.sample_water_params(bounds, rng.derive_seed(step_seed, 1))
    uw = water.synthesize_underwater(
        item.frame, params, config.scene, rng.derive_seed(step_seed, 2)
    )
    gray_a = water.grayscale(uw)
    size = gray_a.shape
    hom = sample_homography(size, config.ranges, rng.derive_seed(step_seed, 3))
    gray_b = warp_image_bilinear(gray_a, hom)

    fwd_a = student_forward(gray_a, model)
    fwd_b = student_forward(gray_b, model)
    kps_a = detect_keypoints(
        detector_probability_map(fwd_a.logits), config.detection_threshold, config.nms_radius
    )
    kps_b = detect_keypoints(
        detector_probability_map(fwd_b.logits), config.detection_threshold, config.nms_radius
    )
    corr = build_correspondences(
        kps_a,
        hom,
        kps_b,
        threshold=config.match_threshold,
        match_radius=config.match_radius,
        image_size=size,
    )
    return StepData(
        teacher_logits=item.teacher_logits,
        gray_a=gray_a,
        gray_b=gray_b,
        kps_a=kps_a,
        kps_b=kps_b,
        corr=corr,
    )


@dataclass
class StepBreakdown:
    l_kl: float
    l_pkt: float
    l_p: float
    l_d: float
    total: float
    n_matches: int
    used_ld: bool


def _keypoint_cells(kps: Sequence[Keypoint]) -> tuple[np.ndarray, np.ndarray]:
    cy = np.array([kp.y // CELL for kp in kps], dtype=int)
    cx = np.array([kp.x // CELL for kp in kps], dtype=int)
    return cy, cx


def _desc_grad_to_params(
    fwd: ToyForward, g_norm_rows: np.ndarray, cy: np.ndarray, cx: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull keypoint descriptor gradients back to w_desc / b_desc.

    Scatter-adds the per-keypoint gradients into their cells, applies the
    L2-normalization vjp, then the linear-layer vjp.
    """
    hc, wc, d = fwd.desc_norm.shape
    g_cells = np.zeros((hc, wc, d))
    np.add.at(g_cells, (cy, cx), g_norm_rows)
    y = fwd.desc_norm
    radial = np.sum(g_cells * y, axis=-1, keepdims=True)
    g_raw = (g_cells - radial * y) / np.maximum(fwd.raw_norms, NORM_FLOOR)[:, :, None]
    flat_g = g_raw.reshape(-1, d)
    flat_x = fwd.cells.reshape(-1, PIXELS_PER_CELL)
    return flat_g.T @ flat_x, flat_g.sum(axis=0)


def step_loss_and_grads(
    data: StepData, model: ToyStudent, config: TrainConfig, relaxed: bool = False
) -> tuple[StepBreakdown, dict[str, np.ndarray]]:
    """Full objective and analytic gradients at the current parameters.

    With relaxed=True the descriptor term uses the continuous surrogate
    (no binarization), making the whole map smooth for finite-difference
    validation; correspondences come frozen in `data` either way.
    """
    fwd_a = student_forward(data.gray_a, model)
    lp = lp_loss(
        data.teacher_logits,
        fwd_a.logits,
        config.weights,
        cell_subsample=config.cell_subsample,
        seed=rng.derive_seed(config.seed, 77),
    )
    m = lp.grad.shape[0] * lp.grad.shape[1]
    flat_g = lp.grad.reshape(m, DETECTOR_CHANNELS)
    flat_x = fwd_a.cells.reshape(m, PIXELS_PER_CELL)
    grads = {
        "w_det": flat_g.T @ flat_x,
        "b_det": flat_g.sum(axis=0),
        "w_desc": np.zeros_like(model.w_desc),
        "b_desc": np.zeros_like(model.b_desc),
    }

    ld_value = 0.0
    used_ld = bool(data.corr.matches)
    if used_ld:
        fwd_b = student_forward(data.gray_b, model)
        cya, cxa = _keypoint_cells(data.kps_a)
        cyb, cxb = _keypoint_cells(data.kps_b)
        desc_a = fwd_a.desc_norm[cya, cxa]
        desc_b = fwd_b.desc_norm[cyb, cxb]
        fn = ld_loss_relaxed if relaxed else ld_loss_grad
        res = fn(data.corr, config.margins, desc_a, desc_b)
        ld_value = res.value
        alpha = config.weights.alpha
        dwa, dba = _desc_grad_to_params(fwd_a, alpha * res.grad_a, cya, cxa)
        dwb, dbb = _desc_grad_to_params(fwd_b, alpha * res.grad_b, cyb, cxb)
        grads["w_desc"] = dwa + dwb
        grads["b_desc"] = dba + dbb

    breakdown = StepBreakdown(
        l_kl=lp.parts["kl"],
        l_pkt=lp.parts["pkt"],
        l_p=lp.value,
        l_d=ld_value,
        total=lp.value + config.weights.alpha * ld_value,
        n_matches=len(data.corr.matches),
        used_ld=used_ld,
    )
    return breakdown, grads


def train_step(
    model: ToyStudent, data: StepData, config: TrainConfig
) -> tuple[ToyStudent, StepBreakdown]:
    """One SGD update; returns the updated model and the pre-update losses."""
    breakdown, grads = step_loss_and_grads(data, model, config)
    lr = config.learning_rate
    new_model = ToyStudent(
        w_det=model.w_det - lr * grads["w_det"],
        b_det=model.b_det - lr * grads["b_det"],
        w_desc=model.w_desc - lr * grads["w_desc"],
        b_desc=model.b_desc - lr * grads["b_desc"],
    )
    return new_model, breakdown


@dataclass
class TrainResult:
    model: ToyStudent
    history: list[StepBreakdown]


def train(config: TrainConfig, dataset: Optional[list[SceneItem]] = None) -> TrainResult:
    """Run the full loop; bit-reproducible for a given config.

    Each step uses image step % n_images and a step seed derived from the
    config seed. With fixed_batch the step-0 prepared data is reused for
    every update (a deterministic fixed objective, useful for monotone
    descent checks).
    """
    if dataset is None:
        dataset = make_dataset(config)
    model = ToyStudent.random(
        rng.derive_seed(config.seed, 1), config.descriptor_dim, config.init_scale
    )
    history: list[StepBreakdown] = []
    fixed_data: Optional[StepData] = None
    for step in range(config.steps):
        if config.fixed_batch:
            if fixed_data is None:
                fixed_data = prepare_step(
                    model, dataset[0], config, rng.derive_seed(config.seed, 10_000)
                )
            data = fixed_data
        else:
            item = dataset[step % len(dataset)]
            data = prepare_step(model, item, config, rng.derive_seed(config.seed, 10_000 + step))
        model, breakdown = train_step(model, data, config)
        history.append(breakdown)
    return TrainResult(model=model, history=history)


def history_csv(history: Sequence[StepBreakdown]) -> str:
    lines = ["step,L_KL,L_PKT,L_d,L"]
    for i, h in enumerate(history):
        lines.append(f"{i},{h.l_kl!r},{h.l_pkt!r},{h.l_d!r},{h.total!r}")
    return "\n".join(lines) + "\n"

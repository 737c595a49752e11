"""Run configuration: one JSON document covering every module's knobs.

The reference document produced by default_config_dict() lists every key
with its default; unknown keys anywhere in a user file are rejected so
typos fail loudly. "comment" keys are allowed at any level for user
annotations.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Any, Optional

from . import water
from .errors import DataError, UsageError
from .losses import LossWeights
from .matching import HomographyRanges, MatchMargins
from .toy import TrainConfig


def default_config_dict() -> dict:
    return {
        "comment": "Reference configuration; every key shown holds its default.",
        "seed": 0,
        "water": {
            "bounds_path": None,
            "water_depth": 5.0,
            "surface_irradiance": [1.0, 1.0, 1.0],
            "max_scene_depth": 3.0,
            "noise_sigma": 0.01,
        },
        "detector": {
            "threshold": 0.01,
            "nms_radius": 4,
        },
        "losses": {
            "alpha": 1.0,
            "pkt_weight": 1.0,
            "cell_subsample": None,
        },
        "matching": {
            "nonmatch_threshold": 8.0,
            "match_radius": 2.0,
            "margin_p": 20.0,
            "margin_q": 150.0,
        },
        "homography": {
            "rotation": 0.2,
            "scale": 0.1,
            "perspective": 5e-4,
            "translation": 8.0,
        },
        "train": {
            "learning_rate": 0.01,
            "steps": 200,
            "image_size": 64,
            "descriptor_dim": 256,
            "n_images": 10,
            "init_scale": 0.1,
            "fixed_batch": False,
        },
        "sweep": {
            "steps": 8,
            "beta_scale_max": 3.0,
        },
    }


def _merge_strict(defaults: dict, user: Any, path: str = "") -> dict:
    if not isinstance(user, dict):
        raise DataError(f"config section '{path or '<root>'}' must be an object")
    merged = dict(defaults)
    for key, value in user.items():
        if key == "comment":
            continue
        if key not in defaults:
            raise DataError(f"unknown config key '{path + key}'")
        if isinstance(defaults[key], dict):
            merged[key] = _merge_strict(defaults[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


@dataclass(frozen=True)
class RunConfig:
    """Typed view of the merged configuration document."""

    doc: dict

    @property
    def seed(self) -> int:
        return int(self.doc["seed"])

    def scene(self) -> water.ScenePhysics:
        w = self.doc["water"]
        return water.ScenePhysics(
            water_depth=float(w["water_depth"]),
            surface_irradiance=w["surface_irradiance"],
            max_scene_depth=float(w["max_scene_depth"]),
            noise_sigma=float(w["noise_sigma"]),
        )

    def bounds(self) -> water.WaterTypeBounds:
        path = self.doc["water"]["bounds_path"]
        if path is None:
            return water.default_jerlov_bounds()
        return water.load_water_bounds(path)

    def weights(self) -> LossWeights:
        l = self.doc["losses"]
        return LossWeights(alpha=float(l["alpha"]), pkt_weight=float(l["pkt_weight"]))

    def cell_subsample(self) -> Optional[int]:
        v = self.doc["losses"]["cell_subsample"]
        return None if v is None else int(v)

    def margins(self) -> MatchMargins:
        m = self.doc["matching"]
        return MatchMargins(p=float(m["margin_p"]), q=float(m["margin_q"]))

    def ranges(self) -> HomographyRanges:
        h = self.doc["homography"]
        return HomographyRanges(
            rotation=float(h["rotation"]),
            scale=float(h["scale"]),
            perspective=float(h["perspective"]),
            translation=float(h["translation"]),
        )

    def detection_threshold(self) -> float:
        return float(self.doc["detector"]["threshold"])

    def nms_radius(self) -> int:
        return int(self.doc["detector"]["nms_radius"])

    def train_config(self, **overrides) -> TrainConfig:
        t = self.doc["train"]
        m = self.doc["matching"]
        kwargs = dict(
            learning_rate=float(t["learning_rate"]),
            steps=int(t["steps"]),
            seed=self.seed,
            image_size=int(t["image_size"]),
            descriptor_dim=int(t["descriptor_dim"]),
            n_images=int(t["n_images"]),
            init_scale=float(t["init_scale"]),
            fixed_batch=bool(t["fixed_batch"]),
            detection_threshold=self.detection_threshold(),
            nms_radius=self.nms_radius(),
            match_threshold=float(m["nonmatch_threshold"]),
            match_radius=float(m["match_radius"]),
            cell_subsample=self.cell_subsample(),
            weights=self.weights(),
            margins=self.margins(),
            ranges=self.ranges(),
            scene=self.scene(),
        )
        kwargs.update(overrides)
        return TrainConfig(**kwargs)

    def sweep_steps(self) -> int:
        return int(self.doc["sweep"]["steps"])

    def beta_scale_max(self) -> float:
        return float(self.doc["sweep"]["beta_scale_max"])


def config_from_dict(user: Optional[dict] = None) -> RunConfig:
    doc = _merge_strict(default_config_dict(), user or {})
    return RunConfig(doc=doc)


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return config_from_dict()
    try:
        with open(path) as fh:
            user = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"config {path} is not valid JSON: {e}") from e
    return config_from_dict(user)


def reference_json() -> str:
    return json.dumps(default_config_dict(), indent=2) + "\n"


def max_threads() -> int:
    """Parallelism cap from the UFT_THREADS environment variable.

    Execution is currently serial everywhere (the concurrency contracts
    demand bit-identical results either way); the cap exists so any future
    worker pool has one sanctioned knob.
    """
    raw = os.environ.get("UFT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError as e:
        raise UsageError(f"UFT_THREADS must be an integer, got {raw!r}") from e
    if n < 1:
        raise UsageError(f"UFT_THREADS must be >= 1, got {n}")
    return n

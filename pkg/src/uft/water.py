"""Physically-based underwater image synthesis.

Per channel c the synthetic pixel is

    I_c = J_c * exp(-beta_c z) + Binf_c * (1 - exp(-beta_c z)) + W

with background light Binf_c = b_c * E0_c * exp(-kd_c d) / beta_c, where
beta is the beam attenuation coefficient, b the beam scattering
coefficient, kd the diffuse downwelling attenuation coefficient, d the
water depth and z the per-pixel camera distance. W is per-pixel Gaussian
noise from the seeded counter-based generator.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import DataError, ParameterDomainError

# R, G, B channel wavelengths in nm
DEFAULT_WAVELENGTHS = (700.0, 525.0, 450.0)

# ITU-R BT.601 luma weights for grayscale conversion
BT601_WEIGHTS = (0.299, 0.587, 0.114)


def _as_channel_triplet(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64).reshape(-1)
    if arr.shape != (3,):
        raise ParameterDomainError(f"{name} must have one value per R/G/B channel, got {v!r}")
    if not np.all(np.isfinite(arr)):
        raise ParameterDomainError(f"{name} must be finite, got {arr}")
    return arr


@dataclass(frozen=True)
class SpectralWaterParams:
    """Per-channel optical coefficients, all in 1/m."""

    beta: np.ndarray
    kd: np.ndarray
    b: np.ndarray
    wavelengths: np.ndarray = DEFAULT_WAVELENGTHS

    def __post_init__(self):
        object.__setattr__(self, "beta", _as_channel_triplet(self.beta, "beta"))
        object.__setattr__(self, "kd", _as_channel_triplet(self.kd, "kd"))
        object.__setattr__(self, "b", _as_channel_triplet(self.b, "b"))
        object.__setattr__(self, "wavelengths", _as_channel_triplet(self.wavelengths, "wavelengths"))
        for name in ("beta", "kd", "b", "wavelengths"):
            v = getattr(self, name)
            if np.any(v <= 0.0):
                raise ParameterDomainError(f"{name} must be strictly positive, got {v}")
        if np.any(self.beta < self.b):
            raise ParameterDomainError(
                f"attenuation must include scattering (beta >= b), got beta={self.beta} b={self.b}"
            )

    def scaled(self, factor: float) -> "SpectralWaterParams":
        """All three coefficient vectors multiplied by a positive factor."""
        if factor <= 0.0:
            raise ParameterDomainError(f"scale factor must be > 0, got {factor}")
        return SpectralWaterParams(
            beta=self.beta * factor,
            kd=self.kd * factor,
            b=self.b * factor,
            wavelengths=self.wavelengths,
        )

    def to_dict(self) -> dict:
        return {
            "beta": self.beta.tolist(),
            "kd": self.kd.tolist(),
            "b": self.b.tolist(),
            "wavelengths": self.wavelengths.tolist(),
        }


@dataclass(frozen=True)
class ScenePhysics:
    """Scene-level constants of the formation model."""

    water_depth: float = 5.0
    surface_irradiance: np.ndarray = (1.0, 1.0, 1.0)
    max_scene_depth: float = 3.0
    noise_sigma: float = 0.01

    def __post_init__(self):
        object.__setattr__(
            self, "surface_irradiance", _as_channel_triplet(self.surface_irradiance, "surface_irradiance")
        )
        if self.water_depth < 0.0:
            raise ParameterDomainError(f"water depth must be >= 0, got {self.water_depth}")
        if self.max_scene_depth <= 0.0:
            raise ParameterDomainError(f"max scene depth must be > 0, got {self.max_scene_depth}")
        if self.noise_sigma < 0.0:
            raise ParameterDomainError(f"noise sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return {
            "water_depth": self.water_depth,
            "surface_irradiance": self.surface_irradiance.tolist(),
            "max_scene_depth": self.max_scene_depth,
            "noise_sigma": self.noise_sigma,
        }


@dataclass(frozen=True)
class RgbdFrame:
    """Paired color image (values in [0,1]) and metric depth map."""

    color: np.ndarray
    depth: np.ndarray

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        depth = np.asarray(self.depth, dtype=np.float64)
        if color.ndim != 3 or color.shape[2] != 3:
            raise DataError(f"color must be H x W x 3, got {color.shape}")
        if depth.shape != color.shape[:2]:
            raise DataError(
                f"color {color.shape[:2]} and depth {depth.shape} dimensions differ"
            )
        if color.min() < -1e-9 or color.max() > 1.0 + 1e-9:
            raise DataError("color values must lie in [0, 1]")
        finite = depth[np.isfinite(depth)]
        if finite.size and finite.min() < 0.0:
            raise DataError("depth values must be >= 0")
        object.__setattr__(self, "color", np.clip(color, 0.0, 1.0))
        object.__setattr__(self, "depth", depth)


@dataclass(frozen=True)
class WaterTypeBounds:
    """Componentwise sampling interval between two water types."""

    lower: SpectralWaterParams
    upper: SpectralWaterParams

    def __post_init__(self):
        for name in ("beta", "kd", "b"):
            lo, hi = getattr(self.lower, name), getattr(self.upper, name)
            if np.any(lo > hi):
                raise ParameterDomainError(f"lower {name} exceeds upper {name}: {lo} > {hi}")
        if not np.array_equal(self.lower.wavelengths, self.upper.wavelengths):
            raise ParameterDomainError("bounds must share channel wavelengths")


def background_light(params: SpectralWaterParams, scene: ScenePhysics) -> np.ndarray:
    """Asymptotic veiling color Binf_c = b_c E0_c exp(-kd_c d) / beta_c."""
    if np.any(params.beta == 0.0):
        raise ParameterDomainError("beta must be nonzero to evaluate background light")
    binf = params.b * scene.surface_irradiance * np.exp(-params.kd * scene.water_depth) / params.beta
    if not np.all(np.isfinite(binf)) or np.any(binf < 0.0):
        raise ParameterDomainError(f"background light not finite/non-negative: {binf}")
    return binf


def clamp_depth(depth: np.ndarray, max_scene_depth: float, zero_is_hole: bool = False) -> np.ndarray:
    """Depth map prepared for synthesis: holes pushed to max range, then clipped.

    Non-finite samples always count as holes (beyond sensor range); exact
    zeros count as holes only when `zero_is_hole` is set.
    """
    z = np.array(depth, dtype=np.float64, copy=True)
    z[~np.isfinite(z)] = max_scene_depth
    if zero_is_hole:
        z[z == 0.0] = max_scene_depth
    return np.clip(z, 0.0, max_scene_depth)


def synthesize_underwater(
    frame: RgbdFrame,
    params: SpectralWaterParams,
    scene: ScenePhysics,
    seed: int,
    zero_depth_is_hole: bool = False,
) -> np.ndarray:
    """Synthetic underwater image for one frame; deterministic given `seed`.

    Noise is one Gaussian draw per pixel (shared across channels), taken
    from the per-pixel lane of the counter-based generator; the result is
    clamped to [0, 1].
    """
    z = clamp_depth(frame.depth, scene.max_scene_depth, zero_depth_is_hole)
    binf = background_light(params, scene)
    transmission = np.exp(-params.beta[None, None, :] * z[:, :, None])
    image = frame.color * transmission + binf[None, None, :] * (1.0 - transmission)
    if scene.noise_sigma > 0.0:
        noise = scene.noise_sigma * rng.gaussian_field(seed, z.shape)
        image = image + noise[:, :, None]
    return np.clip(image, 0.0, 1.0)


def sample_water_params(bounds: WaterTypeBounds, seed: int) -> SpectralWaterParams:
    """Uniform independent draw of beta, kd and b from the bounds interval.

    Draw order is fixed (beta RGB, kd RGB, b RGB) so results are stable for
    a given seed. A drawn b is clamped to the drawn beta per channel: with
    overlapping intervals an independent pair can violate beta >= b, and
    both bound endpoints being valid keeps the clamped b inside its own
    interval.
    """
    stream = rng.Stream(seed)
    out = {}
    for name in ("beta", "kd", "b"):
        lo, hi = getattr(bounds.lower, name), getattr(bounds.upper, name)
        out[name] = np.array([stream.uniform(lo[c], hi[c]) for c in range(3)])
    out["b"] = np.minimum(out["b"], out["beta"])
    return SpectralWaterParams(wavelengths=bounds.lower.wavelengths, **out)


def grayscale(color: np.ndarray) -> np.ndarray:
    """BT.601 luma of an H x W x 3 image."""
    color = np.asarray(color, dtype=np.float64)
    if color.ndim != 3 or color.shape[2] != 3:
        raise DataError(f"grayscale expects H x W x 3, got {color.shape}")
    w = np.asarray(BT601_WEIGHTS)
    return color @ w


def water_params_from_dict(d: dict, wavelengths=DEFAULT_WAVELENGTHS) -> SpectralWaterParams:
    try:
        return SpectralWaterParams(
            beta=d["beta"], kd=d["kd"], b=d["b"], wavelengths=d.get("wavelengths", wavelengths)
        )
    except KeyError as e:
        raise DataError(f"water parameter set missing key {e}") from e


def bounds_from_dict(d: dict) -> WaterTypeBounds:
    try:
        lower, upper = d["lower"], d["upper"]
    except KeyError as e:
        raise DataError(f"bounds file missing key {e}") from e
    wavelengths = d.get("wavelengths", DEFAULT_WAVELENGTHS)
    return WaterTypeBounds(
        lower=water_params_from_dict(lower, wavelengths),
        upper=water_params_from_dict(upper, wavelengths),
    )


def load_water_bounds(path) -> WaterTypeBounds:
    """Parameter bounds from a JSON file with lower/upper x beta/kd/b keys."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise DataError(f"cannot read bounds file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"bounds file {path} is not valid JSON: {e}") from e
    return bounds_from_dict(doc)


def default_jerlov_bounds() -> WaterTypeBounds:
    """Packaged open-ocean type I (lower) to type III (upper) interval."""
    from importlib.resources import files

    text = files("uft.data").joinpath("jerlov_open_ocean.json").read_text()
    return bounds_from_dict(json.loads(text))

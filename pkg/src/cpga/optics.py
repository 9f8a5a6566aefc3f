"""Layer projection stacks and the diffraction / oxygen-diffusion forward model.

All lengths are in mm. Kernels are sampled on the stack's own pixel pitch.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from ._io import read_raw_volume, write_raw_volume
from .lattice import ConfigError, OccupancyGrid

log = logging.getLogger(__name__)

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


def fwhm_to_sigma(fwhm: float) -> float:
    return fwhm / FWHM_PER_SIGMA


@dataclass(frozen=True)
class OpticsParams:
    sigma_x: float = 0.06
    sigma_y: float = 0.08
    sigma_diffusion: float = 0.09
    diffusivity: float = 1.5e-4  # mm^2/s, carried as metadata
    layer_time: float = 3.0  # s
    alpha_diffusion: float = 1.0
    attenuation_mu: float = 0.0  # mm^-1
    i_max: float = 1.0
    slope_per_mm: float = 0.01

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y", "sigma_diffusion", "diffusivity", "layer_time"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.alpha_diffusion <= 2.0:
            raise ConfigError("alpha_diffusion must lie in [0, 2]")
        if self.attenuation_mu < 0 or self.slope_per_mm < 0 or self.i_max <= 0:
            raise ConfigError("attenuation, irradiance slope must be >= 0 and i_max > 0")

    @classmethod
    def from_fwhm(cls, fwhm_x: float, fwhm_y: float, **kw) -> "OpticsParams":
        return cls(sigma_x=fwhm_to_sigma(fwhm_x), sigma_y=fwhm_to_sigma(fwhm_y), **kw)

    @property
    def diffusion_length(self) -> float:
        """sqrt(D t) for one layer exposure."""
        return math.sqrt(self.diffusivity * self.layer_time)


PRESETS = {
    "paper-3.2": OpticsParams(),
    "paper-methods": OpticsParams(sigma_x=0.066, sigma_y=0.066, sigma_diffusion=0.15, diffusivity=1.51e-4),
    "fwhm": OpticsParams.from_fwhm(0.12, 0.20),
}


def preset(name: str) -> OpticsParams:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown optics preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass
class ProjectionStack:
    layers: np.ndarray  # (depth, height, width) in [0, 1]
    layer_height: float
    pixel_pitch: float

    def __post_init__(self):
        self.layers = np.clip(np.asarray(self.layers, dtype=np.float32), 0.0, 1.0)
        if self.layers.ndim != 3:
            raise ValueError("layers must be a (depth, height, width) array")

    @property
    def depth(self) -> int:
        return self.layers.shape[0]

    @property
    def height(self) -> int:
        return self.layers.shape[1]

    @property
    def width(self) -> int:
        return self.layers.shape[2]

    def with_layers(self, layers: np.ndarray) -> "ProjectionStack":
        return replace(self, layers=layers)

    def save(self, path: str | Path) -> None:
        write_raw_volume(path, self.layers.astype(np.float32), {
            "depth": self.depth, "height": self.height, "width": self.width,
            "layer_height": self.layer_height, "pixel_pitch": self.pixel_pitch,
        })

    @classmethod
    def load(cls, path: str | Path) -> "ProjectionStack":
        data, meta = read_raw_volume(path)
        return cls(data, meta["layer_height"], meta["pixel_pitch"])

    def save_png_slices(self, directory: str | Path, stem: str = "layer") -> list[Path]:
        from PIL import Image

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        out = []
        for i, layer in enumerate(self.layers):
            p = directory / f"{stem}_{i:04d}.png"
            Image.fromarray(np.round(layer * 255).astype(np.uint8)).save(p)
            out.append(p)
        return out


@dataclass
class Kernel2D:
    taps: np.ndarray  # (rows = y, cols = x)
    pitch: float


def _area_weights(n_in: int, n_out: int, length_in: float, length_out: float) -> np.ndarray:
    """(n_out, n_in) overlap-fraction matrix between two uniform 1-D cell grids."""
    e_in = np.linspace(0.0, length_in, n_in + 1)
    e_out = np.linspace(0.0, length_out, n_out + 1)
    lo = np.maximum(e_out[:-1, None], e_in[None, :-1])
    hi = np.minimum(e_out[1:, None], e_in[None, 1:])
    w = np.clip(hi - lo, 0.0, None)
    s = w.sum(axis=1, keepdims=True)
    return np.divide(w, s, out=np.zeros_like(w), where=s > 0)


def layer_count(object_height: float, layer_height: float) -> int:
    # tolerance so 10 / 0.1 gives 100, not 101
    return max(1, math.ceil(object_height / layer_height - 1e-9))


def slice_stack(occ: OccupancyGrid, layer_height: float, out_px: int = 32) -> ProjectionStack:
    """Area-averaged solid fraction of each print layer, resampled in-plane to ``out_px``.

    The occupancy grid is indexed (x, y, z) with z the build direction.
    """
    if layer_height <= 0:
        raise ConfigError("layer_height must be positive")
    solid = occ.solid.astype(np.float64)
    nx, ny, nz = solid.shape
    height = nz * occ.spacing
    if layer_height > height:
        warnings.warn(f"layer height {layer_height} mm exceeds object height {height} mm; single layer")
        n_layers, stack_height = 1, height
    else:
        n_layers = layer_count(height, layer_height)
        stack_height = n_layers * layer_height
    # the last layer may overhang the object; its weights renormalise over the covered part
    wz = _area_weights(nz, n_layers, height, stack_height)
    wx = _area_weights(nx, out_px, nx * occ.spacing, nx * occ.spacing)
    wy = _area_weights(ny, out_px, ny * occ.spacing, ny * occ.spacing)
    # layers[k, row(y), col(x)]
    layers = np.einsum("kz,yj,xi,ijz->kyx", wz, wy, wx, solid, optimize=True)
    return ProjectionStack(layers, layer_height=min(layer_height, height), pixel_pitch=nx * occ.spacing / out_px)


def resample_depth(stack: ProjectionStack, depth: int) -> ProjectionStack:
    """Nearest-layer resampling of the stack to ``depth`` layers."""
    src = np.floor((np.arange(depth) + 0.5) * stack.depth / depth).astype(int)
    return stack.with_layers(stack.layers[np.clip(src, 0, stack.depth - 1)])


def _gauss_1d(sigma: float, pitch: float) -> np.ndarray:
    if sigma < pitch / 10:
        return np.ones(1)
    r = math.ceil(3 * sigma / pitch)
    x = np.arange(-r, r + 1) * pitch
    return np.exp(-0.5 * (x / sigma) ** 2)


def gaussian_kernel(sigma_x: float, sigma_y: float, pitch: float) -> Kernel2D:
    if not (sigma_x > 0 and sigma_y > 0 and pitch > 0):
        raise ConfigError("sigmas and pitch must be positive")
    if min(sigma_x, sigma_y) < pitch / 10:
        warnings.warn(f"kernel sigma below pitch/10 ({pitch / 10:.4g} mm); axis collapses to identity tap")
    gx = _gauss_1d(sigma_x, pitch)
    gy = _gauss_1d(sigma_y, pitch)
    taps = np.outer(gy, gx)
    return Kernel2D(taps / taps.sum(), pitch)


def convolve_layers(layers: np.ndarray, kernel: Kernel2D) -> np.ndarray:
    """Per-layer 2-D convolution with edge-replicate padding."""
    k = kernel.taps[::-1, ::-1][None, :, :]
    return ndimage.correlate(np.asarray(layers, dtype=np.float64), k, mode="nearest")


def psf_kernel(stack: ProjectionStack, params: OpticsParams) -> Kernel2D:
    return gaussian_kernel(params.sigma_x, params.sigma_y, stack.pixel_pitch)


def diffusion_kernel(stack: ProjectionStack, params: OpticsParams) -> Kernel2D:
    return gaussian_kernel(params.sigma_diffusion, params.sigma_diffusion, stack.pixel_pitch)


def apply_diffraction(stack: ProjectionStack, params: OpticsParams) -> ProjectionStack:
    blurred = convolve_layers(stack.layers, psf_kernel(stack, params))
    return stack.with_layers(np.clip(blurred, 0.0, 1.0))


def apply_diffusion(stack: ProjectionStack, params: OpticsParams, alpha: float | None = None) -> ProjectionStack:
    """Subtract the blurred inverse image: oxygen influx from neighbouring void erodes the solid edge."""
    a = params.alpha_diffusion if alpha is None else alpha
    layers = stack.layers.astype(np.float64)
    influx = convolve_layers(1.0 - layers, diffusion_kernel(stack, params))
    return stack.with_layers(np.clip(layers - a * influx, 0.0, 1.0))


def forward_transform(stack: ProjectionStack, params: OpticsParams, alpha: float | None = None) -> ProjectionStack:
    return apply_diffusion(apply_diffraction(stack, params), params, alpha=alpha)


def irradiance_at(radial_distance, params: OpticsParams):
    r = np.asarray(radial_distance, dtype=float)
    out = np.maximum(0.0, params.i_max - params.slope_per_mm * r)
    return float(out) if out.ndim == 0 else out


def dosage_field(stack: ProjectionStack, params: OpticsParams, intensity: float | None = None) -> np.ndarray:
    """Beer-Lambert dose of a single bottom-up exposure; layer k sits at depth (k + 1/2) h from the window."""
    i0 = params.i_max if intensity is None else intensity
    depth = (np.arange(stack.depth) + 0.5) * stack.layer_height
    return i0 * stack.layers.astype(np.float64) * np.exp(-params.attenuation_mu * depth)[:, None, None]

"""Gradient saliency, occlusion sensitivity, parameter-space error maps and FiLM gamma analysis."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ._io import write_raw_volume
from .dataset import FEATURE_NAMES, Dataset
from .lattice import ConfigError
from .models import ArchKind, Checkpoint, CPGAModel
from .optics import ProjectionStack
from .training import MetricsReport, Tensors, pearson

DEFAULT_PAIRS = (("layer_height", "lattice_n"), ("sa_to_v", "void_ratio"), ("void_ratio", "lattice_n"))


def _model(m) -> torch.nn.Module:
    model = m.to_model() if isinstance(m, Checkpoint) else m
    model.eval()
    return model


def _arch(model) -> ArchKind | None:
    spec = getattr(model, "spec", None)
    return spec.arch if spec is not None else None


def _as_batch(x: torch.Tensor | np.ndarray, dims: int) -> torch.Tensor:
    if torch.is_tensor(x):
        t = x if x.is_floating_point() else x.float()
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float32))
    return t.unsqueeze(0) if t.dim() == dims else t


def _export(values: np.ndarray, path: str | Path, meta: dict, png_dir: str | Path | None) -> None:
    write_raw_volume(path, values.astype(np.float32), meta)
    if png_dir is not None:
        # max-normalised render so small maps stay visible
        peak = float(values.max()) if values.size else 0.0
        scaled = values / peak if peak > 0 else values
        ProjectionStack(scaled, 1.0, 1.0).save_png_slices(png_dir, Path(path).stem)


# ---------------------------------------------------------------- saliency

@dataclass
class SaliencyMap:
    values: np.ndarray  # (D, H, W), max-normalised unless all zero
    sample_id: str
    arch: str
    raw_max: float
    normalized: bool
    transformed: np.ndarray | None = None  # same normalisation constant as ``values``

    @property
    def all_zero(self) -> bool:
        return self.raw_max == 0.0

    def save(self, path: str | Path, png_dir: str | Path | None = None) -> None:
        _export(self.values, path, {"kind": "saliency", "sample_id": self.sample_id, "arch": self.arch,
                                    "raw_max": self.raw_max, "normalized": self.normalized}, png_dir)


def saliency(model, numeric, orig, conv, sample_id: str = "", include_transformed: bool = False) -> SaliencyMap:
    """|d prediction / d voxel| of the original-modality stack, normalised by its maximum."""
    model = _model(model)
    if _arch(model) is ArchKind.NUMERIC_ONLY:
        raise ConfigError("saliency needs an image pathway; numeric_only has none")
    orig_t = _as_batch(orig, 3).clone().requires_grad_(True)
    conv_t = _as_batch(conv, 3).clone().requires_grad_(include_transformed)
    num_t = _as_batch(numeric, 1)
    if orig_t.shape[0] != 1:
        raise ConfigError("saliency takes one sample at a time")
    with torch.enable_grad():
        y = model(num_t, orig_t, conv_t)
        y.sum().backward()
    g = orig_t.grad.abs().reshape(orig_t.shape[-3:]).double().numpy()
    gc = conv_t.grad.abs().reshape(conv_t.shape[-3:]).double().numpy() if include_transformed else None
    peak = float(max(g.max(), gc.max() if gc is not None else 0.0))
    arch = _arch(model)
    if peak > 0:
        g, gc = g / peak, (gc / peak if gc is not None else None)
    return SaliencyMap(g, sample_id, arch.value if arch else type(model).__name__, peak, peak > 0, gc)


# ---------------------------------------------------------------- occlusion

@dataclass
class OcclusionMap:
    values: np.ndarray  # (n_layers, rows, cols) of |delta prediction|
    signed: np.ndarray
    layers: list[int]
    patch: int
    stride: int
    fill: float
    base_prediction: float
    sample_id: str = ""

    def origins(self, axis_len: int) -> np.ndarray:
        return np.arange(0, axis_len - self.patch + 1, self.stride)

    def save(self, path: str | Path, png_dir: str | Path | None = None) -> None:
        _export(self.values, path, {"kind": "occlusion", "sample_id": self.sample_id, "patch": self.patch,
                                    "stride": self.stride, "fill": self.fill, "layers": self.layers,
                                    "base_prediction": self.base_prediction}, png_dir)


@torch.no_grad()
def occlusion_map(model, numeric, orig, conv, patch: int = 4, stride: int = 4, fill: float = 0.0,
                  layers: Sequence[int] | None = None, sample_id: str = "", batch_size: int = 64) -> OcclusionMap:
    """Fill a patch x patch square of one layer in both modalities and record the prediction change."""
    model = _model(model)
    o = _as_batch(orig, 3).reshape(-1, *np.shape(orig)[-3:])[0].float()
    c = _as_batch(conv, 3).reshape(-1, *np.shape(conv)[-3:])[0].float()
    num = _as_batch(numeric, 1)
    depth, rows, cols = o.shape
    if patch < 1 or stride < 1:
        raise ConfigError("patch and stride must be >= 1")
    if patch > min(rows, cols):
        raise ConfigError(f"patch {patch} exceeds the image side ({rows}x{cols})")
    layers = list(range(depth)) if layers is None else [int(k) for k in layers]
    if any(not 0 <= k < depth for k in layers):
        raise ConfigError(f"layer index out of range 0..{depth - 1}")
    ys = np.arange(0, rows - patch + 1, stride)
    xs = np.arange(0, cols - patch + 1, stride)
    base = float(model(num, o[None, None], c[None, None]).item())
    jobs = [(li, k, y, x) for li, k in enumerate(layers) for y in ys for x in xs]
    signed = np.zeros((len(layers), len(ys), len(xs)))
    for s in range(0, len(jobs), batch_size):
        chunk = jobs[s:s + batch_size]
        ob = o.repeat(len(chunk), 1, 1, 1)
        cb = c.repeat(len(chunk), 1, 1, 1)
        for b, (_, k, y, x) in enumerate(chunk):
            ob[b, k, y:y + patch, x:x + patch] = fill
            cb[b, k, y:y + patch, x:x + patch] = fill
        pred = model(num.expand(len(chunk), -1), ob.unsqueeze(1), cb.unsqueeze(1)).double().numpy()
        for b, (li, _, y, x) in enumerate(chunk):
            signed[li, y // stride, x // stride] = pred[b] - base
    return OcclusionMap(np.abs(signed), signed, layers, patch, stride, float(fill), base, sample_id)


def patch_solid_fraction(occ: OcclusionMap, occupancy: np.ndarray) -> np.ndarray:
    """Mean solid fraction of the original stack under every occlusion patch."""
    occupancy = np.asarray(occupancy, dtype=np.float64)
    out = np.zeros(occ.values.shape)
    ys = occ.origins(occupancy.shape[1])
    xs = occ.origins(occupancy.shape[2])
    for li, k in enumerate(occ.layers):
        for i, y in enumerate(ys):
            for j, x in enumerate(xs):
                out[li, i, j] = occupancy[k, y:y + occ.patch, x:x + occ.patch].mean()
    return out


def solid_void_contrast(occ: OcclusionMap, occupancy: np.ndarray) -> float:
    """Median |delta| over solid-majority patches divided by the median over void-majority patches."""
    frac = patch_solid_fraction(occ, occupancy)
    solid = occ.values[frac > 0.5]
    void = occ.values[frac < 0.5]
    if solid.size == 0 or void.size == 0:
        return math.nan
    s, v = float(np.median(solid)), float(np.median(void))
    if v == 0.0:
        return math.inf if s > 0 else math.nan
    return s / v


# ---------------------------------------------------------------- error maps

@dataclass
class ErrorMap:
    feature_a: str
    feature_b: str
    ids: list[str]
    a: np.ndarray
    b: np.ndarray
    abs_error: np.ndarray

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id", self.feature_a, self.feature_b, "abs_error"])
        for row in zip(self.ids, self.a, self.b, self.abs_error):
            w.writerow([row[0], float(row[1]), float(row[2]), float(row[3])])
        return buf.getvalue()


def error_map(rep: MetricsReport, features: Dataset | dict[str, Sequence[float]],
              pair: tuple[str, str]) -> ErrorMap:
    """Raw feature coordinates of every evaluated sample with its absolute residual."""
    for name in pair:
        if name not in FEATURE_NAMES:
            raise ConfigError(f"unknown feature {name!r}; choose from {list(FEATURE_NAMES)}")
    ia, ib = FEATURE_NAMES.index(pair[0]), FEATURE_NAMES.index(pair[1])
    if isinstance(features, Dataset):
        rows = features.numeric[features.index(rep.ids)]
    else:
        rows = np.array([features[i] for i in rep.ids], dtype=np.float64).reshape(len(rep.ids), -1)
    return ErrorMap(pair[0], pair[1], list(rep.ids), rows[:, ia], rows[:, ib], np.abs(rep.residuals))


def error_maps(rep: MetricsReport, features, pairs=DEFAULT_PAIRS) -> list[ErrorMap]:
    return [error_map(rep, features, tuple(p)) for p in pairs]


# ---------------------------------------------------------------- gamma analysis

@dataclass
class GammaReport:
    arch: str
    correlations: dict[str, float]  # feature -> Pearson R against mean gamma
    per_block: list[dict[str, float]] = field(default_factory=list)
    constant_gamma: bool = False
    undefined: list[str] = field(default_factory=list)  # features whose R had no variance to work with
    n: int = 0

    def to_json(self) -> dict:
        return {"arch": self.arch, "correlations": self.correlations, "per_block": self.per_block,
                "constant_gamma": self.constant_gamma, "undefined": self.undefined, "n": self.n}


def _correlate(features: np.ndarray, g: np.ndarray, undefined: set) -> dict[str, float]:
    out = {}
    for k, name in enumerate(FEATURE_NAMES):
        r = pearson(features[:, k], g)
        if not math.isfinite(r):
            undefined.add(name)
            r = 0.0
        out[name] = float(np.clip(r, -1.0, 1.0))
    return out


@torch.no_grad()
def mean_gammas(model: CPGAModel, numeric: torch.Tensor) -> list[np.ndarray]:
    """Channel-averaged gamma per sample, one array per FiLM stage."""
    arch = _arch(model)
    if arch is None or not arch.is_film or (arch is ArchKind.LATE_FILM and not model.spec.gate):
        raise ConfigError(f"gamma analysis needs a FiLM architecture, got {arch.value if arch else model}")
    f_num = model.num(numeric)
    if arch is ArchKind.LATE_FILM:
        return [model.film.gamma(f_num).mean(dim=1).double().numpy()]
    return [torch.cat([po.gamma(f_num), pc.gamma(f_num)], dim=1).mean(dim=1).double().numpy()
            for po, pc in zip(model.films_orig, model.films_conv)]


def gamma_analysis(model, data: Tensors | np.ndarray) -> GammaReport:
    """Pearson R between each standardized feature and the mean gamma across samples."""
    model = _model(model)
    numeric = data.numeric if isinstance(data, Tensors) else torch.as_tensor(np.asarray(data, dtype=np.float32))
    stages = mean_gammas(model, numeric)
    feats = numeric.double().numpy()
    g_all = np.mean(stages, axis=0)
    constant = bool(np.ptp(g_all) < 1e-12)
    undefined: set[str] = set()
    corr = _correlate(feats, g_all, undefined) if not constant else {n: 0.0 for n in FEATURE_NAMES}
    if constant:
        undefined.update(FEATURE_NAMES)
    blocks = [_correlate(feats, g, undefined) for g in stages] if len(stages) > 1 else []
    return GammaReport(model.spec.arch.value, corr, blocks, constant, sorted(undefined), len(feats))


@torch.no_grad()
def plant_feature_projector(model: CPGAModel, feature: str | int, sign: float = 1.0,
                            offset: float = 10.0) -> CPGAModel:
    """Rewire encoder and gamma projectors so every gamma channel equals 1 + sign * x[feature].

    Valid while the standardized feature stays above ``-offset`` (ReLU stays open).
    """
    k = FEATURE_NAMES.index(feature) if isinstance(feature, str) else int(feature)
    enc = model.num
    for layer in (enc.fc1, enc.fc2):
        layer.weight.zero_()
        layer.bias.zero_()
    enc.fc1.weight[0, k] = 1.0
    enc.fc1.bias[0] = offset
    enc.fc2.weight[0, 0] = 1.0
    enc.fc2.bias[0] = -offset
    for p in model.projectors():
        p.gamma.weight.zero_()
        p.gamma.weight[:, 0] = sign
        p.gamma.bias.fill_(1.0)
    return model

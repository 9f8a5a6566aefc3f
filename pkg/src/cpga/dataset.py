"""Design grid, synthetic degree-of-conversion targets, leak-free splits and feature scaling.

The DoC targets produced here are a declared synthetic oracle, not experimental
measurements. Each specimen gets a hidden oxygen-inhibition strength that only
shows up in its transformed projection stack, so part of the target variance is
recoverable from images alone.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import __version__, lattice, optics
from .lattice import ConfigError, GeometryKind, LatticeConfig

log = logging.getLogger(__name__)

FEATURE_NAMES = ("sa_to_v", "void_ratio", "lattice_n", "solid_volume", "layer_height", "max_intensity")
FEATURE_LABELS = {"solid_volume": "solid_volume (mass_before proxy)"}

UNIT_CELLS = (1, 2, 3, 4)
LAYER_HEIGHTS = (0.05, 0.10, 0.15)
RADIAL_POSITIONS = (0.0, 15.0, 30.0)  # mm from vat centre
DEFAULT_OFFSETS = {
    "primitive": (0.2, 0.5, 0.8),
    "diamond": (0.2, 0.5, 0.8),
    "fischer_koch": (0.2, 0.5, 0.8),
    "gyroid": (0.2, 0.5, 0.8),
    "neovius": (0.9, 1.2, 1.5),
    "frd": (0.2, 0.5, 0.8),
}

DOC_LOW, DOC_HIGH = 0.67, 0.95


class DataError(RuntimeError):
    """Missing, inconsistent or leaking dataset artifacts."""


class LeakageError(DataError):
    pass


def load_offsets(path: str | Path) -> dict[str, tuple[float, ...]]:
    raw = json.loads(Path(path).read_text())
    out = {}
    for name, values in raw.items():
        out[GeometryKind.parse(name).value] = tuple(float(v) for v in values)
    return out


@dataclass(frozen=True)
class DesignPoint:
    geometry: GeometryKind
    unit_cells: int
    offset_c: float
    offset_index: int
    layer_height: float
    irradiance_pos: int
    radial_distance: float
    max_intensity: float

    @property
    def id(self) -> str:
        return (f"{self.geometry.value}-n{self.unit_cells}-c{self.offset_index}"
                f"-h{int(round(self.layer_height * 1000)):03d}-r{self.irradiance_pos}")


def build_design_grid(geometries: Iterable[str | GeometryKind] | None = None,
                      unit_cells: Sequence[int] = UNIT_CELLS,
                      layer_heights: Sequence[float] = LAYER_HEIGHTS,
                      radial_positions: Sequence[float] = RADIAL_POSITIONS,
                      offsets: dict[str, Sequence[float]] | None = None,
                      params: optics.OpticsParams | None = None) -> list[DesignPoint]:
    params = params or optics.PRESETS["paper-3.2"]
    offsets = {**DEFAULT_OFFSETS, **(offsets or {})}
    geoms = [GeometryKind.parse(g) for g in (geometries if geometries is not None else GeometryKind)]
    points = []
    for g in geoms:
        for n in unit_cells:
            for ci, c in enumerate(offsets[g.value]):
                for h in layer_heights:
                    for ri, r in enumerate(radial_positions):
                        points.append(DesignPoint(g, int(n), float(c), ci, float(h), ri, float(r),
                                                  optics.irradiance_at(r, params)))
    return points


@dataclass
class SampleRecord:
    id: str
    point: DesignPoint
    numeric: np.ndarray  # FEATURE_NAMES order
    stack_original: optics.ProjectionStack | None
    stack_transformed: optics.ProjectionStack | None
    inhibition: float  # hidden per-specimen oxygen-inhibition strength
    interface_activity: float = math.nan
    doc_target: float = math.nan


def record_rng(seed: int, record_id: str, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(record_id.encode()), stream])


def draw_inhibition(seed: int, record_id: str, low: float = 0.02, high: float = 2.0) -> float:
    """Log-uniform oxygen-inhibition strength for one specimen."""
    u = record_rng(seed, record_id, 1).uniform()
    return float(math.exp(math.log(low) + u * (math.log(high) - math.log(low))))


def interface_band(layers: np.ndarray) -> np.ndarray:
    """Pixels whose 3x3 in-layer neighbourhood is not uniform."""
    size = (1, 3, 3)
    return (ndimage.maximum_filter(layers, size=size, mode="nearest")
            - ndimage.minimum_filter(layers, size=size, mode="nearest")) > 1e-6


def interface_activity(original: optics.ProjectionStack, transformed: optics.ProjectionStack) -> float:
    """Mean |transformed - original| over the interface band of the original stack."""
    band = interface_band(original.layers)
    if not band.any():
        return 0.0
    diff = np.abs(transformed.layers.astype(np.float64) - original.layers)
    return float(diff[band].mean())


@dataclass(frozen=True)
class OracleCoefficients:
    base: float = 0.95
    interface: float = 1.5
    layer_height: float = 0.02
    intensity: float = 0.04
    void: float = 0.03
    noise_sd: float = 0.005


def synth_doc_oracle(record: SampleRecord, seed: int, i_max: float = 1.0,
                     coef: OracleCoefficients = OracleCoefficients()) -> float:
    """Synthetic DoC: stronger interface erosion, thicker layers and dimmer exposure lower conversion."""
    if record.stack_original is None or record.stack_transformed is None:
        raise DataError(f"record {record.id} has no stacks")
    act = interface_activity(record.stack_original, record.stack_transformed)
    p = record.point
    h_hat = (p.layer_height - 0.05) / 0.10
    i_hat = p.max_intensity / i_max
    v_hat = float(record.numeric[FEATURE_NAMES.index("void_ratio")])
    eps = record_rng(seed, record.id, 2).normal(0.0, coef.noise_sd) if coef.noise_sd > 0 else 0.0
    # dimmer exposure lets inhibition act more strongly
    value = (coef.base - coef.interface * act / max(i_hat, 1e-6) - coef.layer_height * h_hat
             + coef.intensity * i_hat - coef.void * v_hat + eps)
    return float(np.clip(value, DOC_LOW, DOC_HIGH))


@dataclass(frozen=True)
class BuildSettings:
    grid_resolution: int = 64
    out_px: int = 32
    depth: int = 32
    domain_size: float = 10.0
    preset: str = "paper-3.2"
    seed: int = 0
    inhibition_low: float = 0.02
    inhibition_high: float = 2.0


def build_records(points: Sequence[DesignPoint], settings: BuildSettings = BuildSettings(),
                  progress=None) -> list[SampleRecord]:
    params = optics.preset(settings.preset)
    fields: dict = {}
    metrics: dict = {}
    stacks: dict = {}
    records = []
    for k, p in enumerate(points):
        cfg = LatticeConfig(p.geometry, p.unit_cells, p.offset_c, lattice.SHEET,
                            settings.grid_resolution, settings.domain_size)
        fkey = (p.geometry, p.unit_cells)
        if fkey not in fields:
            fields[fkey] = lattice.level_set_field(cfg)
        f = fields[fkey]
        mkey = fkey + (p.offset_c,)
        if mkey not in metrics:
            metrics[mkey] = (lattice.geom_metrics(cfg, f), lattice.solidify(f, p.offset_c))
        m, occ = metrics[mkey]
        skey = mkey + (p.layer_height,)
        if skey not in stacks:
            stacks[skey] = optics.resample_depth(optics.slice_stack(occ, p.layer_height, settings.out_px),
                                                 settings.depth)
        original = stacks[skey]
        alpha = draw_inhibition(settings.seed, p.id, settings.inhibition_low, settings.inhibition_high)
        transformed = optics.forward_transform(original, params, alpha=alpha)
        numeric = np.array([m.sa_to_v, m.porosity, p.unit_cells, m.solid_volume,
                            p.layer_height, p.max_intensity], dtype=np.float64)
        rec = SampleRecord(p.id, p, numeric, original, transformed, alpha)
        rec.interface_activity = interface_activity(original, transformed)
        rec.doc_target = synth_doc_oracle(rec, settings.seed, params.i_max)
        records.append(rec)
        if progress is not None:
            progress(k + 1, len(points))
    return records


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class SplitManifest:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def all_ids(self) -> list[str]:
        return self.train + self.val + self.test

    def of(self, name: str) -> list[str]:
        if name not in ("train", "val", "test"):
            raise ConfigError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_json(self) -> dict:
        return {"seed": self.seed, "train": self.train, "val": self.val, "test": self.test}

    @classmethod
    def from_json(cls, d: dict) -> "SplitManifest":
        return cls(list(d["train"]), list(d["val"]), list(d["test"]), int(d["seed"]))


def split(ids: Sequence[str], seed: int, test_frac: float = 0.2, val_frac: float = 0.2) -> SplitManifest:
    """Hold out ``test_frac`` first, then ``val_frac`` of the remainder."""
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise DataError("duplicate ids")
    order = np.random.default_rng(seed).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    n_test = _round_half_up(test_frac * len(ids))
    rest = shuffled[n_test:]
    n_val = _round_half_up(val_frac * len(rest))
    return SplitManifest(train=rest[n_val:], val=rest[:n_val], test=shuffled[:n_test], seed=seed)


@dataclass
class FeatureStats:
    mean: np.ndarray
    std: np.ndarray
    median: np.ndarray
    constant: np.ndarray
    fitted_on: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"features": list(FEATURE_NAMES), "mean": self.mean.tolist(), "std": self.std.tolist(),
                "median": self.median.tolist(), "constant": self.constant.tolist(),
                "fitted_on": self.fitted_on}

    @classmethod
    def from_json(cls, d: dict) -> "FeatureStats":
        return cls(np.array(d["mean"]), np.array(d["std"]), np.array(d["median"]),
                   np.array(d["constant"], dtype=bool), list(d.get("fitted_on", [])))


def fit_stats(ids: Sequence[str], numeric: np.ndarray, manifest: SplitManifest) -> FeatureStats:
    """Fit scaler statistics; every row must belong to the training partition."""
    train = set(manifest.train)
    leaked = [i for i in ids if i not in train]
    if leaked:
        raise LeakageError(f"{len(leaked)} non-training records passed to fit_stats (e.g. {leaked[0]})")
    x = np.asarray(numeric, dtype=np.float64)
    median = np.nanmedian(x, axis=0)
    filled = np.where(np.isnan(x), median, x)
    mean = filled.mean(axis=0)
    std = filled.std(axis=0)
    constant = ~(std > 0)
    return FeatureStats(mean, np.where(constant, 1.0, std), median, constant, sorted(ids))


def impute(numeric: np.ndarray, stats: FeatureStats) -> np.ndarray:
    x = np.asarray(numeric, dtype=np.float64)
    return np.where(np.isnan(x), stats.median, x)


def standardize(numeric: np.ndarray, stats: FeatureStats) -> np.ndarray:
    z = (impute(numeric, stats) - stats.mean) / stats.std
    return np.where(stats.constant, 0.0, z)


# ---------------------------------------------------------------- persistence

MANIFEST_COLUMNS = ("id", "geometry", "n", "c", "layer_height", "irradiance_pos", *FEATURE_NAMES,
                    "doc_target", "interface_activity", "inhibition", "stack_orig", "stack_conv")


def provenance(config_hash: str, seed: int) -> dict:
    return {"config_hash": config_hash, "seed": int(seed), "version": __version__}


def write_dataset(root: str | Path, records: Sequence[SampleRecord], manifest: SplitManifest,
                  stats: FeatureStats, prov: dict) -> None:
    root = Path(root)
    (root / "stacks").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fh:
        fh.write("# " + json.dumps(prov, sort_keys=True) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            p = r.point
            orig = f"stacks/{r.id}_orig.f32"
            conv = f"stacks/{r.id}_conv.f32"
            r.stack_original.save(root / orig)
            r.stack_transformed.save(root / conv)
            w.writerow([r.id, p.geometry.value, p.unit_cells, p.offset_c, p.layer_height, p.irradiance_pos,
                        *[float(x) for x in r.numeric], r.doc_target, r.interface_activity, r.inhibition,
                        orig, conv])
    _write_json(root / "splits.json", {**manifest.to_json(), "provenance": prov})
    _write_json(root / "stats.json", {**stats.to_json(), "provenance": prov})


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")


def read_manifest(root: str | Path) -> tuple[list[dict], dict]:
    path = Path(root) / "manifest.csv"
    if not path.exists():
        raise DataError(f"no manifest.csv under {root}")
    lines = path.read_text().splitlines()
    prov = {}
    if lines and lines[0].startswith("#"):
        prov = json.loads(lines[0][1:])
        lines = lines[1:]
    rows = list(csv.DictReader(lines))
    return rows, prov


@dataclass
class Dataset:
    """In-memory arrays for training and analysis."""

    root: Path
    ids: list[str]
    numeric: np.ndarray  # raw features (N, 6)
    original: np.ndarray  # (N, D, H, W) float32
    transformed: np.ndarray
    target: np.ndarray
    manifest: SplitManifest
    stats: FeatureStats
    provenance: dict
    rows: list[dict]

    def index(self, ids: Sequence[str]) -> np.ndarray:
        pos = {i: k for k, i in enumerate(self.ids)}
        try:
            return np.array([pos[i] for i in ids], dtype=int)
        except KeyError as e:
            raise DataError(f"unknown record id {e.args[0]}") from None

    def split_index(self, name: str) -> np.ndarray:
        return self.index(self.manifest.of(name))

    def standardized(self) -> np.ndarray:
        return standardize(self.numeric, self.stats)

    def column(self, name: str) -> np.ndarray:
        return self.numeric[:, FEATURE_NAMES.index(name)]


def load_dataset(root: str | Path) -> Dataset:
    root = Path(root)
    rows, prov = read_manifest(root)
    try:
        splits = json.loads((root / "splits.json").read_text())
        stats = json.loads((root / "stats.json").read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing dataset artifact: {e.filename}") from None
    manifest = SplitManifest.from_json(splits)
    fs = FeatureStats.from_json(stats)
    if set(fs.fitted_on) - set(manifest.train):
        raise LeakageError("stats.json was fitted on records outside the training split")
    ids = [r["id"] for r in rows]
    numeric = np.array([[float(r[k]) if r[k] != "" else math.nan for k in FEATURE_NAMES] for r in rows])
    orig = np.stack([optics.ProjectionStack.load(root / r["stack_orig"]).layers for r in rows])
    conv = np.stack([optics.ProjectionStack.load(root / r["stack_conv"]).layers for r in rows])
    target = np.array([float(r["doc_target"]) for r in rows])
    return Dataset(root, ids, numeric, orig, conv, target, manifest, fs, prov, rows)


def build_dataset(root: str | Path, settings: BuildSettings = BuildSettings(), config_hash: str = "",
                  geometries=None, offsets=None, progress=None) -> Dataset:
    """Build records, split, fit train-only stats and write everything under ``root``."""
    params = optics.preset(settings.preset)
    points = build_design_grid(geometries, offsets=offsets, params=params)
    records = build_records(points, settings, progress=progress)
    manifest = split([r.id for r in records], settings.seed)
    train = set(manifest.train)
    train_recs = [r for r in records if r.id in train]
    stats = fit_stats([r.id for r in train_recs], np.stack([r.numeric for r in train_recs]), manifest)
    write_dataset(root, records, manifest, stats, provenance(config_hash, settings.seed))
    return load_dataset(root)

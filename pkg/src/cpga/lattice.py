"""TPMS level-set fields, sheet/skeletal solidification, meshing and geometric descriptors."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from skimage import measure

from ._io import write_raw_volume


class ConfigError(ValueError):
    """Raised for invalid lattice or pipeline configuration."""


class GeometryKind(str, enum.Enum):
    PRIMITIVE = "primitive"
    DIAMOND = "diamond"
    FISCHER_KOCH = "fischer_koch"
    GYROID = "gyroid"
    NEOVIUS = "neovius"
    FRD = "frd"

    @classmethod
    def parse(cls, name: "str | GeometryKind") -> "GeometryKind":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower().replace("-", "_")
        aliases = {"fischerkoch": "fischer_koch", "f_rd": "frd", "p": "primitive", "d": "diamond", "g": "gyroid"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown geometry {name!r}; expected one of {[g.value for g in cls]}") from None


def level_set(geometry: GeometryKind | str, X, Y, Z):
    """Evaluate the bare level-set function (no offset term) at already-scaled coordinates."""
    g = GeometryKind.parse(geometry)
    cos, sin = np.cos, np.sin
    if g is GeometryKind.PRIMITIVE:
        return cos(X) + cos(Y) + cos(Z)
    if g is GeometryKind.DIAMOND:
        # four-term Schwarz D form
        return (sin(X) * sin(Y) * sin(Z) + sin(X) * cos(Y) * cos(Z)
                + cos(X) * sin(Y) * cos(Z) + cos(X) * cos(Y) * sin(Z))
    if g is GeometryKind.FISCHER_KOCH:
        return (cos(2 * X) * sin(Y) * cos(Z) + cos(2 * Y) * sin(Z) * cos(X)
                + cos(2 * Z) * sin(X) * cos(Y))
    if g is GeometryKind.GYROID:
        return sin(X) * cos(Y) + sin(Z) * cos(X) + sin(Y) * cos(Z)
    if g is GeometryKind.NEOVIUS:
        c2x, c2y, c2z = cos(2 * X), cos(2 * Y), cos(2 * Z)
        return 3 * (c2x + c2y + c2z) + 4 * c2x * c2y * c2z
    if g is GeometryKind.FRD:
        c2x, c2y, c2z = cos(2 * X), cos(2 * Y), cos(2 * Z)
        return 4 * cos(X) * cos(Y) * cos(Z) - (c2x * c2y + c2x * c2z + c2y * c2z)
    raise ConfigError(f"unhandled geometry {g}")


def evaluate(geometry, x, y, z, unit_cells: int = 1):
    """Level-set value at unit-cube coordinates ``x, y, z`` in [0, 1]."""
    s = 2 * np.pi * unit_cells
    return level_set(geometry, s * np.asarray(x, float), s * np.asarray(y, float), s * np.asarray(z, float))


SHEET = "sheet"
SKELETAL = "skeletal"


@dataclass(frozen=True)
class LatticeConfig:
    geometry: GeometryKind
    unit_cells: int = 2
    offset_c: float = 0.5
    mode: str = SHEET
    grid_resolution: int = 100
    domain_size: float = 10.0  # mm, cube edge

    def __post_init__(self):
        object.__setattr__(self, "geometry", GeometryKind.parse(self.geometry))
        if self.unit_cells not in (1, 2, 3, 4):
            raise ConfigError(f"unit_cells must be in 1..4, got {self.unit_cells}")
        if self.grid_resolution < 16:
            raise ConfigError(f"grid_resolution must be >= 16, got {self.grid_resolution}")
        if self.mode not in (SHEET, SKELETAL):
            raise ConfigError(f"mode must be 'sheet' or 'skeletal', got {self.mode!r}")
        if self.mode == SHEET and not self.offset_c > 0:
            raise ConfigError("offset_c must be > 0 in sheet mode")
        if not self.domain_size > 0:
            raise ConfigError("domain_size must be positive")

    @property
    def spacing(self) -> float:
        return self.domain_size / self.grid_resolution


@dataclass
class ScalarField:
    values: np.ndarray
    spacing: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.values.shape)


@dataclass
class OccupancyGrid:
    solid: np.ndarray
    spacing: float

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.solid.shape)

    @property
    def size(self) -> float:
        return self.solid.shape[0] * self.spacing

    def save(self, path: str | Path) -> None:
        """Raw little-endian uint8 volume with a text sidecar."""
        write_raw_volume(path, self.solid.astype(np.uint8), {"dims": list(self.dims), "spacing": self.spacing})


@dataclass
class TriMesh:
    vertices: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    triangles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    empty: bool = False

    def __len__(self) -> int:
        return len(self.triangles)

    def write_stl(self, path: str | Path, name: str = "lattice") -> None:
        v = self.vertices[self.triangles]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        n = np.divide(n, norm, out=np.zeros_like(n), where=norm > 0)
        lines = [f"solid {name}"]
        for tri, nn in zip(v, n):
            lines.append(f"  facet normal {nn[0]:.6e} {nn[1]:.6e} {nn[2]:.6e}")
            lines.append("    outer loop")
            for p in tri:
                lines.append(f"      vertex {p[0]:.6e} {p[1]:.6e} {p[2]:.6e}")
            lines.append("    endloop")
            lines.append("  endfacet")
        lines.append(f"endsolid {name}")
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class GeomMetrics:
    surface_area: float
    solid_volume: float
    porosity: float
    sa_to_v: float
    domain_volume: float


def voxel_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def level_set_field(config: LatticeConfig) -> ScalarField:
    n = config.grid_resolution
    u = 2 * np.pi * config.unit_cells * voxel_centers(n)
    X, Y, Z = np.meshgrid(u, u, u, indexing="ij")
    values = level_set(config.geometry, X, Y, Z)
    return ScalarField(values=values, spacing=config.spacing)


def solidify(field_: ScalarField, offset_c: float, mode: str = SHEET) -> OccupancyGrid:
    f = field_.values
    if mode == SHEET:
        if not offset_c > 0:
            raise ConfigError("offset_c must be > 0 in sheet mode")
        # min(f + c, c - f) >= 0
        solid = np.minimum(f + offset_c, offset_c - f) >= 0
    elif mode == SKELETAL:
        solid = f <= offset_c
    else:
        raise ConfigError(f"unknown mode {mode!r}")
    return OccupancyGrid(solid=solid, spacing=field_.spacing)


def isosurface(values: np.ndarray, spacing: float, level: float = 0.0, closed: bool = False) -> TriMesh:
    """Mesh the ``level`` isosurface of a sampled field; positive side is solid.

    Vertices are in mm with voxel centres at ``(i + 0.5) * spacing``. ``closed``
    pads the volume with one layer of void so the mesh caps the domain faces.
    """
    v = np.asarray(values, dtype=float)
    if min(v.shape) < 2:
        raise ConfigError("field needs at least 2 samples per axis")
    offset = 0.5 * spacing
    if closed:
        pad = min(v.min(), level) - 1.0
        v = np.pad(v, 1, constant_values=pad)
        offset -= spacing
    if not (v.min() < level < v.max()):
        return TriMesh(empty=True)
    verts, faces, _, _ = measure.marching_cubes(v, level=level, spacing=(spacing,) * 3,
                                                allow_degenerate=False)
    verts = verts + offset
    mesh = TriMesh(vertices=verts, triangles=faces.astype(np.int64))
    return _drop_degenerate(mesh)


def _drop_degenerate(mesh: TriMesh) -> TriMesh:
    if len(mesh) == 0:
        return mesh
    areas = _triangle_areas(mesh)
    keep = areas > 1e-12 * max(areas.max(), 1e-300)
    mesh.triangles = mesh.triangles[keep]
    return mesh


def marching_cubes(field_: ScalarField, offset_c: float, closed: bool = False) -> TriMesh:
    """Triangulate the sheet-solid boundary, i.e. the zero set of ``c - |f|``."""
    return isosurface(offset_c - np.abs(field_.values), field_.spacing, 0.0, closed=closed)


def _triangle_areas(mesh: TriMesh) -> np.ndarray:
    v = mesh.vertices[mesh.triangles]
    return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)


def surface_area(mesh: TriMesh) -> float:
    if len(mesh) == 0:
        return 0.0
    return float(_triangle_areas(mesh).sum())


def enclosed_volume(mesh: TriMesh) -> float:
    """Signed-tetrahedron volume of a closed mesh (divergence theorem)."""
    if len(mesh) == 0:
        return 0.0
    v = mesh.vertices[mesh.triangles]
    return float(abs(np.einsum("ij,ij->i", v[:, 0], np.cross(v[:, 1], v[:, 2])).sum()) / 6.0)


def euler_characteristic(mesh: TriMesh) -> int:
    tris = mesh.triangles
    edges = np.sort(np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]]), axis=1)
    n_edges = len(np.unique(edges, axis=0))
    n_verts = len(np.unique(tris))
    return int(n_verts - n_edges + len(tris))


def volume_and_porosity(occ: OccupancyGrid) -> tuple[float, float]:
    """(solid volume in mm^3, porosity) by voxel stacking."""
    n_solid = int(np.count_nonzero(occ.solid))
    solid_volume = n_solid * occ.spacing ** 3
    porosity = 1.0 - n_solid / occ.solid.size
    return solid_volume, porosity


def geom_metrics(config: LatticeConfig, field_: ScalarField | None = None) -> GeomMetrics:
    f = field_ if field_ is not None else level_set_field(config)
    occ = solidify(f, config.offset_c, config.mode)
    solid_volume, porosity = volume_and_porosity(occ)
    if config.mode == SHEET:
        mesh = marching_cubes(f, config.offset_c)
    else:
        mesh = isosurface(config.offset_c - f.values, f.spacing)
    area = surface_area(mesh)
    return GeomMetrics(
        surface_area=area,
        solid_volume=solid_volume,
        porosity=porosity,
        sa_to_v=area / solid_volume if solid_volume > 0 else math.nan,
        domain_volume=config.domain_size ** 3,
    )


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float
    degenerate: bool = False


def linear_fit(x, y) -> LinearFit:
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if len(x) < 3:
        raise ConfigError("need at least 3 points for a fit")
    xm, ym = x.mean(), y.mean()
    sxx = ((x - xm) ** 2).sum()
    if sxx == 0:
        raise ConfigError("x values are all identical")
    slope = ((x - xm) * (y - ym)).sum() / sxx
    intercept = ym - slope * xm
    ss_tot = ((y - ym) ** 2).sum()
    if ss_tot == 0:
        return LinearFit(float(slope), float(intercept), math.nan, degenerate=True)
    ss_res = ((y - (slope * x + intercept)) ** 2).sum()
    return LinearFit(float(slope), float(intercept), float(1 - ss_res / ss_tot))


def sweep_and_fit(geometry, unit_cells: int, c_values, metric: str = "porosity",
                  grid_resolution: int = 100, mode: str = SHEET,
                  domain_size: float = 10.0) -> LinearFit:
    """Sweep the offset, compute ``metric`` at each value and fit it linearly against c."""
    c_values = list(c_values)
    if len(c_values) < 3:
        raise ConfigError("sweep needs at least 3 offset values")
    base = LatticeConfig(geometry, unit_cells, c_values[0], mode, grid_resolution, domain_size)
    f = level_set_field(base)
    ys = []
    for c in c_values:
        cfg = LatticeConfig(geometry, unit_cells, c, mode, grid_resolution, domain_size)
        if metric == "porosity":
            ys.append(volume_and_porosity(solidify(f, c, mode))[1])
        else:
            ys.append(getattr(geom_metrics(cfg, f), metric))
    return linear_fit(c_values, ys)

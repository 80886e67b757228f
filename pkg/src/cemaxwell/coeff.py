"""Piecewise-constant relative permeability fields on the fine grid."""
from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import NestedMesh

VOXEL_MAGIC = "MAXWELL-COEFF"
VOXEL_VERSION = "v1"


class CoefficientError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


class ModelKind(str, enum.Enum):
    HOMOGENEOUS = "homogeneous"
    RANDOM_CUBES = "random_cubes"
    PERIODIC_RODS = "periodic_rods"
    VOXEL_FILE = "voxel_file"


@dataclass(frozen=True, eq=False)
class CoefficientField:
    """mu_r per fine cell, cells ordered by (z, y, x)."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise CoefficientError("coefficient values must be a flat array")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise CoefficientError("coefficient values must be positive and finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def mu_min(self) -> float:
        return float(self.values.min())

    @property
    def mu_max(self) -> float:
        return float(self.values.max())

    @property
    def contrast(self) -> float:
        return self.mu_max / self.mu_min

    def digest(self) -> str:
        return hashlib.sha256(self.values.tobytes()).hexdigest()[:16]


def inverse_values(field: CoefficientField) -> np.ndarray:
    return 1.0 / field.values


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind = ModelKind.HOMOGENEOUS
    inclusion_value: float = 1e3
    background_value: float = 1.0
    n_cubes: int = 4
    cube_side: int | None = None  # voxels; None -> n // 8
    rod_lattice: int = 5
    rod_radius: float = 0.06
    path: str | None = None
    rng_seed: int = 2024

    def __post_init__(self):
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if self.inclusion_value <= 0 or self.background_value <= 0:
            raise CoefficientError("coefficient values must be positive")
        if self.kind in (ModelKind.RANDOM_CUBES, ModelKind.PERIODIC_RODS) and (
            self.inclusion_value == self.background_value
        ):
            raise CoefficientError("inclusion and background values coincide; use HOMOGENEOUS")


def _random_cubes(spec: ModelSpec, n: int, max_attempts: int = 10_000) -> np.ndarray:
    side = spec.cube_side if spec.cube_side is not None else max(n // 8, 1)
    if side < 1 or side > n:
        raise CoefficientError(f"cube side {side} does not fit a {n}^3 grid")
    rng = np.random.default_rng(spec.rng_seed)
    placed = []
    attempts = 0
    while len(placed) < spec.n_cubes:
        attempts += 1
        if attempts > max_attempts:
            raise PlacementError(
                f"could not place {spec.n_cubes} disjoint cubes of side {side} "
                f"(seed {spec.rng_seed})"
            )
        corner = rng.integers(0, n - side + 1, size=3)
        if all(np.any(np.abs(corner - c) >= side) for c in placed):
            placed.append(corner)
    vol = np.full((n, n, n), spec.background_value)  # indexed [z, y, x]
    for cx, cy, cz in placed:
        vol[cz:cz + side, cy:cy + side, cx:cx + side] = spec.inclusion_value
    return vol.ravel()


def rod_mask(n: int, lattice: int, radius: float) -> np.ndarray:
    """Cells whose centre lies inside one of the z-aligned rods, ordered (z, y, x)."""
    c = (np.arange(n) + 0.5) / n
    centres = (np.arange(lattice) + 0.5) / lattice
    dx = np.min(np.abs(c[None, :] - centres[:, None]), axis=0)
    # nearest lattice point per axis is the nearest rod axis
    y, x = np.meshgrid(dx, dx, indexing="ij")
    inside2d = x**2 + y**2 <= radius**2
    return np.broadcast_to(inside2d, (n, n, n)).ravel()


def generate(spec: ModelSpec, mesh: NestedMesh) -> CoefficientField:
    n = mesh.n
    if spec.kind is ModelKind.HOMOGENEOUS:
        return CoefficientField(np.full(n**3, spec.background_value))
    if spec.kind is ModelKind.RANDOM_CUBES:
        return CoefficientField(_random_cubes(spec, n))
    if spec.kind is ModelKind.PERIODIC_RODS:
        if not 0 < spec.rod_radius < 0.5 / spec.rod_lattice:
            raise CoefficientError("rod radius must be positive and below half the lattice pitch")
        mask = rod_mask(n, spec.rod_lattice, spec.rod_radius)
        return CoefficientField(np.where(mask, spec.inclusion_value, spec.background_value))
    if spec.kind is ModelKind.VOXEL_FILE:
        if spec.path is None:
            raise CoefficientError("VOXEL_FILE model needs a path")
        return load_voxels(spec.path, mesh)
    raise CoefficientError(f"unknown model kind {spec.kind}")


def write_voxels(path, field: CoefficientField, dims) -> None:
    nx, ny, nz = dims
    if nx * ny * nz != field.values.size:
        raise CoefficientError("dimensions do not match the number of values")
    header = f"{VOXEL_MAGIC} {VOXEL_VERSION} {nx} {ny} {nz} zyx f64le\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(field.values.astype("<f8").tobytes())


def load_voxels(path, mesh: NestedMesh) -> CoefficientField:
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        payload = fh.read()
    if len(header) != 7 or header[0] != VOXEL_MAGIC or header[1] != VOXEL_VERSION:
        raise CoefficientError(f"{path}: malformed voxel header {' '.join(header)!r}")
    if header[5] != "zyx" or header[6] != "f64le":
        raise CoefficientError(f"{path}: unsupported ordering/dtype {header[5]} {header[6]}")
    try:
        dims = tuple(int(v) for v in header[2:5])
    except ValueError:
        raise CoefficientError(f"{path}: non-integer dimensions in header") from None
    if dims != mesh.dims:
        raise CoefficientError(f"{path}: grid {dims} does not match mesh {mesh.dims}")
    count = dims[0] * dims[1] * dims[2]
    if len(payload) != 8 * count:
        raise CoefficientError(f"{path}: expected {8 * count} bytes of data, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(values)) or np.any(values <= 0):
        raise CoefficientError(f"{path}: voxel values must be positive and finite")
    return CoefficientField(values)

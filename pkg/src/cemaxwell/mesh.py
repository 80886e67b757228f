"""Nested structured hexahedral meshes on the unit cube with edge numbering.

Edges are directed along the positive coordinate axis they are parallel to.
For a box of ``(nx, ny, nz)`` cells the edges are numbered x-edges first,
then y-edges, then z-edges; within each family by ``(z, y, x)`` of the edge
origin.  Patches reuse the same scheme on their own sub-box, so the local
numbering of a patch is that of a structured grid and ``edge_map`` is a
plain offset computation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from fractions import Fraction
from functools import cached_property

import numpy as np

DEFAULT_CELL_CAP = 128


class EdgeKind(IntEnum):
    INTERIOR = 0
    PATCH_BOUNDARY = 1
    DOMAIN_BOUNDARY = 2


class MeshSizeError(ValueError):
    pass


# ---------------------------------------------------------------------------
# structured-grid edge numbering


def edge_family_sizes(dims):
    nx, ny, nz = dims
    return (
        nx * (ny + 1) * (nz + 1),
        (nx + 1) * ny * (nz + 1),
        (nx + 1) * (ny + 1) * nz,
    )


def edge_count(dims) -> int:
    return sum(edge_family_sizes(dims))


def edge_index(dims, d, i, j, k):
    """Index of the edge with direction ``d`` and origin node ``(i, j, k)``."""
    nx, ny, nz = dims
    sx, sy, _ = edge_family_sizes(dims)
    d = np.asarray(d)
    i, j, k = np.asarray(i), np.asarray(j), np.asarray(k)
    ix = i + nx * (j + (ny + 1) * k)
    iy = sx + i + (nx + 1) * (j + ny * k)
    iz = sx + sy + i + (nx + 1) * (j + (ny + 1) * k)
    return np.where(d == 0, ix, np.where(d == 1, iy, iz))


def edge_origins(dims):
    """Direction and origin node of every edge, in numbering order.

    Returns ``(d, ijk)`` with ``d`` of shape ``(E,)`` and ``ijk`` of shape
    ``(E, 3)``.
    """
    nx, ny, nz = dims
    blocks = []
    for d, shape in enumerate([(nx, ny + 1, nz + 1), (nx + 1, ny, nz + 1), (nx + 1, ny + 1, nz)]):
        k, j, i = np.meshgrid(
            np.arange(shape[2]), np.arange(shape[1]), np.arange(shape[0]), indexing="ij"
        )
        ijk = np.stack([i.ravel(), j.ravel(), k.ravel()], axis=1)
        blocks.append((np.full(len(ijk), d), ijk))
    d = np.concatenate([b[0] for b in blocks])
    ijk = np.concatenate([b[1] for b in blocks])
    return d, ijk


def transverse_axes(d):
    return [(1, 2), (0, 2), (0, 1)][d]


def local_edge_layout():
    """Direction and transverse offsets of the 12 edges of one cell.

    Local edge ``4*d + a + 2*b`` runs along axis ``d`` with offset ``a`` along
    the first and ``b`` along the second transverse axis.
    """
    out = []
    for d in range(3):
        for b in range(2):
            for a in range(2):
                off = [0, 0, 0]
                p, q = transverse_axes(d)
                off[p], off[q] = a, b
                out.append((d, tuple(off)))
    return out


LOCAL_EDGES = local_edge_layout()


def cell_edges(dims) -> np.ndarray:
    """``(ncells, 12)`` array of edge indices, cells ordered by ``(z, y, x)``."""
    nx, ny, nz = dims
    k, j, i = np.meshgrid(np.arange(nz), np.arange(ny), np.arange(nx), indexing="ij")
    i, j, k = i.ravel(), j.ravel(), k.ravel()
    cols = []
    for d, off in LOCAL_EDGES:
        cols.append(edge_index(dims, d, i + off[0], j + off[1], k + off[2]))
    return np.stack(cols, axis=1)


def cell_ids(dims, lo, box_dims) -> np.ndarray:
    """Global ids of the cells of a sub-box, in the sub-box's own order."""
    nx, ny, _ = dims
    k, j, i = np.meshgrid(
        np.arange(box_dims[2]) + lo[2],
        np.arange(box_dims[1]) + lo[1],
        np.arange(box_dims[0]) + lo[0],
        indexing="ij",
    )
    return (i + nx * (j + ny * k)).ravel()


# ---------------------------------------------------------------------------
# nested meshes and patches


@dataclass(frozen=True)
class NestedMesh:
    n_coarse_per_axis: int
    n_fine_per_coarse: int

    @property
    def n(self) -> int:
        return self.n_coarse_per_axis * self.n_fine_per_coarse

    @property
    def dims(self):
        return (self.n, self.n, self.n)

    @property
    def H_exact(self) -> Fraction:
        return Fraction(1, self.n_coarse_per_axis)

    @property
    def h_exact(self) -> Fraction:
        return Fraction(1, self.n)

    @property
    def H(self) -> float:
        return 1.0 / self.n_coarse_per_axis

    @property
    def h(self) -> float:
        return 1.0 / self.n

    @property
    def n_coarse(self) -> int:
        return self.n_coarse_per_axis**3

    @property
    def n_cells(self) -> int:
        return self.n**3

    @property
    def n_edges(self) -> int:
        return 3 * self.n * (self.n + 1) ** 2

    @cached_property
    def cell_edges(self) -> np.ndarray:
        return cell_edges(self.dims)

    def coarse_coords(self, i: int):
        nc = self.n_coarse_per_axis
        if not 0 <= i < self.n_coarse:
            raise IndexError(f"coarse index {i} out of range [0, {self.n_coarse})")
        return (i % nc, (i // nc) % nc, i // (nc * nc))

    def coarse_index(self, cx: int, cy: int, cz: int) -> int:
        nc = self.n_coarse_per_axis
        return cx + nc * (cy + nc * cz)

    def cell_centers(self) -> np.ndarray:
        """Cell centres, shape ``(n**3, 3)``, cells ordered by ``(z, y, x)``."""
        c = (np.arange(self.n) + 0.5) * self.h
        z, y, x = np.meshgrid(c, c, c, indexing="ij")
        return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)

    def edge_geometry(self):
        """Start point and direction of every global edge."""
        d, ijk = edge_origins(self.dims)
        return ijk * self.h, d


def build_nested_mesh(n_coarse_per_axis: int, n_fine_per_coarse: int,
                      cap: int = DEFAULT_CELL_CAP) -> NestedMesh:
    if n_coarse_per_axis < 1 or n_fine_per_coarse < 1:
        raise ValueError("mesh parameters must be positive integers")
    n = n_coarse_per_axis * n_fine_per_coarse
    if n > cap:
        raise MeshSizeError(f"{n} fine cells per axis exceeds the cap of {cap}")
    return NestedMesh(int(n_coarse_per_axis), int(n_fine_per_coarse))


@dataclass(frozen=True, eq=False)
class Patch:
    """Box of coarse elements with its patch-local edge numbering.

    ``center_element`` is ``None`` for the whole-domain region.
    """

    mesh: NestedMesh
    center_element: int | None
    layers: int | None
    coarse_lo: tuple
    coarse_hi: tuple  # inclusive
    coarse_elements: np.ndarray = field(repr=False)
    edge_map: np.ndarray = field(repr=False)
    edge_kind: np.ndarray = field(repr=False)

    @property
    def lo(self):
        nf = self.mesh.n_fine_per_coarse
        return tuple(c * nf for c in self.coarse_lo)

    @property
    def dims(self):
        nf = self.mesh.n_fine_per_coarse
        return tuple((h - l + 1) * nf for l, h in zip(self.coarse_lo, self.coarse_hi))

    @property
    def n_edges(self) -> int:
        return len(self.edge_map)

    @property
    def is_global(self) -> bool:
        nc = self.mesh.n_coarse_per_axis
        return self.coarse_lo == (0, 0, 0) and self.coarse_hi == (nc - 1,) * 3

    @cached_property
    def cell_ids(self) -> np.ndarray:
        return cell_ids(self.mesh.dims, self.lo, self.dims)

    @property
    def cell_edges(self) -> np.ndarray:
        # not cached: patches outlive their assembly inside every basis block
        return cell_edges(self.dims)

    @cached_property
    def inverse_map(self) -> dict:
        return {int(g): p for p, g in enumerate(self.edge_map)}

    def boundary_sides(self):
        """``(axis, side)`` pairs for which the box touches the domain boundary."""
        nc = self.mesh.n_coarse_per_axis
        out = []
        for a in range(3):
            if self.coarse_lo[a] == 0:
                out.append((a, 0))
            if self.coarse_hi[a] == nc - 1:
                out.append((a, 1))
        return out

    def free_mask(self, strict: bool = False) -> np.ndarray:
        """Edges kept by a zero-trace condition on the patch boundary.

        With ``strict`` the domain-boundary edges are dropped as well.
        """
        mask = self.edge_kind != EdgeKind.PATCH_BOUNDARY
        if strict:
            mask &= self.edge_kind != EdgeKind.DOMAIN_BOUNDARY
        return mask


def _box_patch(mesh: NestedMesh, lo, hi, center, layers) -> Patch:
    nf = mesh.n_fine_per_coarse
    n = mesh.n
    flo = np.array(lo) * nf
    dims = tuple((h - l + 1) * nf for l, h in zip(lo, hi))
    d, ijk = edge_origins(dims)
    g = ijk + flo
    edge_map = edge_index(mesh.dims, d, g[:, 0], g[:, 1], g[:, 2]).astype(np.int64)

    on_domain = np.zeros(len(d), dtype=bool)
    on_patch = np.zeros(len(d), dtype=bool)
    for t in range(3):
        transverse = d != t
        on_domain |= transverse & ((g[:, t] == 0) | (g[:, t] == n))
        on_patch |= transverse & (
            ((ijk[:, t] == 0) & (flo[t] > 0)) | ((ijk[:, t] == dims[t]) & (flo[t] + dims[t] < n))
        )
    # an edge on an interior patch face must vanish even if it also touches the domain boundary
    kind = np.full(len(d), EdgeKind.INTERIOR, dtype=np.int8)
    kind[on_domain] = EdgeKind.DOMAIN_BOUNDARY
    kind[on_patch] = EdgeKind.PATCH_BOUNDARY

    nc = mesh.n_coarse_per_axis
    cz, cy, cx = np.meshgrid(
        np.arange(lo[2], hi[2] + 1), np.arange(lo[1], hi[1] + 1), np.arange(lo[0], hi[0] + 1),
        indexing="ij",
    )
    elems = (cx + nc * (cy + nc * cz)).ravel()
    return Patch(mesh, center, layers, tuple(int(v) for v in lo), tuple(int(v) for v in hi),
                 elems, edge_map, kind)


def extract_patch(mesh: NestedMesh, i: int, m: int) -> Patch:
    if m < 0:
        raise ValueError("oversampling layers must be nonnegative")
    c = mesh.coarse_coords(i)
    nc = mesh.n_coarse_per_axis
    lo = tuple(max(ci - m, 0) for ci in c)
    hi = tuple(min(ci + m, nc - 1) for ci in c)
    return _box_patch(mesh, lo, hi, i, m)


def whole_domain(mesh: NestedMesh) -> Patch:
    nc = mesh.n_coarse_per_axis
    return _box_patch(mesh, (0, 0, 0), (nc - 1,) * 3, None, None)


def coarse_element(mesh: NestedMesh, i: int) -> Patch:
    return extract_patch(mesh, i, 0)


def restrict_field(patch: Patch, global_field) -> np.ndarray:
    global_field = np.asarray(global_field)
    if global_field.shape[0] != patch.mesh.n_edges:
        raise ValueError(
            f"field has {global_field.shape[0]} entries, mesh has {patch.mesh.n_edges} edges"
        )
    return global_field[patch.edge_map]


def prolong_field(patch: Patch, local_field) -> np.ndarray:
    local_field = np.asarray(local_field)
    if local_field.shape[0] != patch.n_edges:
        raise ValueError(
            f"local field has {local_field.shape[0]} entries, patch has {patch.n_edges} edges"
        )
    out = np.zeros((patch.mesh.n_edges,) + local_field.shape[1:], dtype=local_field.dtype)
    out[patch.edge_map] = local_field
    return out

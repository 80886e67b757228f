"""Lowest-order edge elements on cubes and operator assembly over boxes.

Shape functions are normalised so that each degree of freedom is the line
integral of the tangential component along its edge: on a cube of side h
the edge along axis d with transverse offsets (a, b) carries

    w = (1/h) L_a(xi_p) L_b(xi_q) e_d,     L_0(t) = 1 - t,  L_1(t) = t.

With this normalisation the mass matrix scales like h and the curl-curl
matrix like 1/h.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .coeff import CoefficientField, inverse_values
from .mesh import LOCAL_EDGES, NestedMesh, Patch, transverse_axes, whole_domain

# 1D integrals over [0, 1]
_MASS_1D = np.array([[1 / 3, 1 / 6], [1 / 6, 1 / 3]])
_DERIV_SIGN = np.array([-1.0, 1.0])  # L_0' and L_1'


def _levi_civita(i, j, k):
    return (i - j) * (j - k) * (k - i) / 2


def _curl_terms():
    """Curl of each reference edge function (h = 1) as a list of terms.

    A term ``(component, coef, axis, offset)`` stands for
    ``coef * L_offset(xi_axis)`` in the given curl component.
    """
    terms = []
    for d, off in LOCAL_EDGES:
        p, q = transverse_axes(d)
        et = []
        for dp, r in ((p, q), (q, p)):
            c = 3 - d - dp
            et.append((c, _levi_civita(c, dp, d) * _DERIV_SIGN[off[dp]], r, off[r]))
        terms.append(et)
    return terms


def _reference_matrices():
    curl = _curl_terms()
    K = np.zeros((12, 12))
    M = np.zeros((12, 12))
    for e, (de, oe) in enumerate(LOCAL_EDGES):
        for f, (df, of) in enumerate(LOCAL_EDGES):
            if de == df:
                p, q = transverse_axes(de)
                M[e, f] = _MASS_1D[oe[p], of[p]] * _MASS_1D[oe[q], of[q]]
            for c1, s1, r1, o1 in curl[e]:
                for c2, s2, r2, o2 in curl[f]:
                    if c1 != c2:
                        continue
                    integral = _MASS_1D[o1, o2] if r1 == r2 else 0.25
                    K[e, f] += s1 * s2 * integral
    return K, M


def _face_matrices():
    """Tangential-trace mass on each cell face, keyed by ``(axis, side)``."""
    out = {}
    for a in range(3):
        for s in range(2):
            F = np.zeros((12, 12))
            for e, (de, oe) in enumerate(LOCAL_EDGES):
                for f, (df, of) in enumerate(LOCAL_EDGES):
                    if de != df or de == a or oe[a] != s or of[a] != s:
                        continue
                    r = 3 - a - de
                    F[e, f] = _MASS_1D[oe[r], of[r]]
            out[(a, s)] = F
    return out


K_REF, M_REF = _reference_matrices()
FACE_REF = _face_matrices()


def element_matrices(h: float, mu_inv: float = 1.0):
    """Curl-curl, mass and (unweighted) s-mass matrices of one h-cube."""
    if h <= 0 or mu_inv <= 0:
        raise ValueError("cell size and inverse permeability must be positive")
    M = h * M_REF
    return mu_inv * K_REF / h, M, M.copy()


def face_matrix(axis: int, side: int) -> np.ndarray:
    """Boundary tangential mass of one face; independent of h for this normalisation."""
    return FACE_REF[(axis, side)]


@dataclass(frozen=True, eq=False)
class OperatorSet:
    """Real sparse matrices of one region; complex combinations are formed on demand."""

    region: Patch
    K: sp.csr_matrix = field(repr=False)
    M: sp.csr_matrix = field(repr=False)
    Mbd: sp.csr_matrix = field(repr=False)
    S: sp.csr_matrix = field(repr=False)
    K_unit: sp.csr_matrix = field(repr=False)
    k: float
    H: float

    @property
    def n(self) -> int:
        return self.K.shape[0]

    @property
    def M_mu(self) -> sp.csr_matrix:
        return self.S * self.H**2

    def system(self) -> sp.csr_matrix:
        """Matrix of B: v^H (K - k^2 M - i k Mbd) w."""
        k = self.k
        return (self.K - k**2 * self.M - 1j * k * self.Mbd).tocsr()

    def a_matrix(self) -> sp.csr_matrix:
        k = self.k
        return (self.K + k**2 * self.M + k * self.Mbd).tocsr()

    def kimp_matrix(self) -> sp.csr_matrix:
        k = self.k
        return (self.K_unit + k**2 * self.M + k * self.Mbd).tocsr()


def _scatter(rows_local, blocks, n):
    ne = rows_local.shape[1]
    r = np.repeat(rows_local, ne, axis=1).ravel()
    c = np.tile(rows_local, (1, ne)).ravel()
    A = sp.coo_matrix((blocks.ravel(), (r, c)), shape=(n, n)).tocsr()
    A.sum_duplicates()
    return A


def assemble_operators(mesh: NestedMesh, field: CoefficientField, region: Patch | None,
                       k: float, H: float | None = None) -> OperatorSet:
    if region is None:
        region = whole_domain(mesh)
    if region.mesh != mesh:
        raise ValueError("region belongs to a different mesh")
    if field.values.size != mesh.n_cells:
        raise ValueError("coefficient field does not match the mesh")
    if k <= 0:
        raise ValueError("wavenumber must be positive")
    H = mesh.H if H is None else H
    h = mesh.h
    n = region.n_edges
    ce = region.cell_edges
    mu_inv = inverse_values(field)[region.cell_ids]

    Ke, Me, _ = element_matrices(h)
    ones = np.ones(len(ce))
    K = _scatter(ce, mu_inv[:, None, None] * Ke[None], n)
    K_unit = _scatter(ce, ones[:, None, None] * Ke[None], n)
    M = _scatter(ce, ones[:, None, None] * Me[None], n)
    S = _scatter(ce, (mu_inv / H**2)[:, None, None] * Me[None], n)

    dims = region.dims
    loc = np.stack(np.unravel_index(np.arange(len(ce)), dims[::-1]), axis=1)[:, ::-1]
    rows, blocks = [], []
    for a, s in region.boundary_sides():
        sel = loc[:, a] == (0 if s == 0 else dims[a] - 1)
        rows.append(ce[sel])
        blocks.append(np.broadcast_to(face_matrix(a, s), (sel.sum(), 12, 12)))
    if rows:
        Mbd = _scatter(np.concatenate(rows), np.concatenate(blocks), n)
    else:
        Mbd = sp.csr_matrix((n, n))
    return OperatorSet(region, K, M, Mbd, S, K_unit, float(k), float(H))


# ---------------------------------------------------------------------------
# forms and norms


def _check(ops: OperatorSet, *vs):
    for v in vs:
        if np.shape(v)[0] != ops.n:
            raise ValueError(f"vector of length {np.shape(v)[0]} for region with {ops.n} edges")


def apply_B(ops: OperatorSet, w, v) -> complex:
    """B(w, v), conjugate-linear in v."""
    _check(ops, w, v)
    return complex(np.vdot(v, ops.system() @ w))


def _quad(A, v) -> float:
    return float(max(np.vdot(v, A @ v).real, 0.0))


def norm_a(ops: OperatorSet, v) -> float:
    _check(ops, v)
    return np.sqrt(_quad(ops.a_matrix(), v))


def norm_s(ops: OperatorSet, v) -> float:
    _check(ops, v)
    return np.sqrt(_quad(ops.S, v))


def norm_kimp(ops: OperatorSet, v) -> float:
    _check(ops, v)
    return np.sqrt(_quad(ops.kimp_matrix(), v))


def norm_l2(ops: OperatorSet, v) -> float:
    _check(ops, v)
    return np.sqrt(_quad(ops.M, v))


def dual_s_norm(ops: OperatorSet, f_vec) -> float:
    """sqrt(f^H S^{-1} f)."""
    _check(ops, f_vec)
    f_vec = np.asarray(f_vec)
    if not np.any(f_vec):
        return 0.0
    lu = spla.splu(ops.S.tocsc())
    if np.iscomplexobj(f_vec):
        x = lu.solve(np.ascontiguousarray(f_vec.real)) + 1j * lu.solve(np.ascontiguousarray(f_vec.imag))
    else:
        x = lu.solve(f_vec.astype(float))
    return float(np.sqrt(max(np.vdot(f_vec, x).real, 0.0)))


# ---------------------------------------------------------------------------
# load vectors

_GP, _GW = np.polynomial.legendre.leggauss(3)
GAUSS_POINTS = (_GP + 1) / 2
GAUSS_WEIGHTS = _GW / 2


def _lagrange(o, t):
    return t if o == 1 else 1 - t


@dataclass(frozen=True, eq=False)
class LoadVector:
    values: np.ndarray = field(repr=False)
    source: str = ""


def assemble_load(mesh: NestedMesh, region: Patch | None, f=None, g=None,
                  source: str = "") -> LoadVector:
    """Edge moments (f, w_e) + <g, (w_e)_T> on a region.

    ``f(points) -> (P, 3)`` is evaluated at 3x3x3 Gauss points per cell;
    ``g(points, axis, side) -> (P, 3)`` at 3x3 Gauss points on every cell
    face lying on the boundary of the unit cube.
    """
    if region is None:
        region = whole_domain(mesh)
    h = mesh.h
    b = np.zeros(region.n_edges, dtype=complex)
    ce = region.cell_edges
    dims = region.dims
    loc = np.stack(np.unravel_index(np.arange(len(ce)), dims[::-1]), axis=1)[:, ::-1]
    origins = (loc + np.array(region.lo)) * h

    if f is not None:
        t = GAUSS_POINTS
        xi = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
        wq = np.einsum("i,j,k->ijk", GAUSS_WEIGHTS, GAUSS_WEIGHTS, GAUSS_WEIGHTS).ravel()
        pts = origins[:, None, :] + h * xi[None, :, :]
        fv = np.asarray(f(pts.reshape(-1, 3)), dtype=complex).reshape(len(ce), len(xi), 3)
        local = np.empty((len(ce), 12), dtype=complex)
        for e, (d, off) in enumerate(LOCAL_EDGES):
            p, q = transverse_axes(d)
            shape = _lagrange(off[p], xi[:, p]) * _lagrange(off[q], xi[:, q]) / h
            local[:, e] = h**3 * (fv[:, :, d] @ (wq * shape))
        b += _bincount(ce, local, region.n_edges)

    if g is not None:
        t = GAUSS_POINTS
        w2 = np.outer(GAUSS_WEIGHTS, GAUSS_WEIGHTS).ravel()
        for a, s in region.boundary_sides():
            sel = loc[:, a] == (0 if s == 0 else dims[a] - 1)
            u, v = [ax for ax in range(3) if ax != a]
            tu, tv = np.meshgrid(t, t, indexing="ij")
            xi = np.zeros((tu.size, 3))
            xi[:, u], xi[:, v], xi[:, a] = tu.ravel(), tv.ravel(), float(s)
            pts = origins[sel][:, None, :] + h * xi[None, :, :]
            gv = np.asarray(g(pts.reshape(-1, 3), a, s), dtype=complex).reshape(sel.sum(), len(xi), 3)
            local = np.zeros((sel.sum(), 12), dtype=complex)
            for e, (d, off) in enumerate(LOCAL_EDGES):
                if d == a or off[a] != s:
                    continue
                r = 3 - a - d
                shape = _lagrange(off[r], xi[:, r]) / h
                local[:, e] = h**2 * (gv[:, :, d] @ (w2 * shape))
            b += _bincount(ce[sel], local, region.n_edges)
    return LoadVector(b, source)


def _bincount(idx, vals, n):
    idx = idx.ravel()
    vals = vals.ravel()
    return np.bincount(idx, vals.real, n) + 1j * np.bincount(idx, vals.imag, n)

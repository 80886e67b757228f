"""Two-stage multiscale construction: auxiliary spectral spaces, localized
trial/test bases on oversampled patches, and the Petrov-Galerkin coarse solve.

Conventions.  For edge vectors w, v the forms are

    B(w, v) = v^H A w,      A = K - k^2 M - i k Mbd   (complex symmetric)
    s(w, v) = v^H S w.

The auxiliary modes of element i are real and s_i-orthonormal, collected as
the columns of Phi_i; with U_i = S_i Phi_i the penalty s(pi w, pi v) is
v^H (sum_i R_i^T U_i U_i^T R_i) w, and the right-hand side s(phi, pi v) of
the basis problem is v^H R_i^T S_i phi.  Because A is symmetric and the
modes are real, conjugating the basis problem gives the adjoint problem, so
the test functions are the complex conjugates of the trial functions.
"""
from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .assembly import OperatorSet, assemble_operators
from .coeff import CoefficientField
from .linalg import Factorization, SolverError
from .mesh import NestedMesh, Patch, coarse_element, edge_index, edge_origins, extract_patch, whole_domain

log = logging.getLogger(__name__)

DENSE_EIG_LIMIT = 4000
RESOLUTION_THRESHOLD = 0.35
COERCIVITY_THRESHOLD = 0.1


class CoarseSolveError(SolverError):
    pass


# ---------------------------------------------------------------------------
# auxiliary space


@dataclass(frozen=True, eq=False)
class ElementModes:
    index: int
    eigenvalues: np.ndarray  # l + 1 values, ascending
    vectors: np.ndarray = field(repr=False)  # (n_local, l), s_i-orthonormal
    S: sp.csr_matrix = field(repr=False)
    edge_map: np.ndarray = field(repr=False)

    @cached_property
    def weighted(self) -> np.ndarray:
        """S_i Phi_i; its transpose maps a local field to its pi_i coefficients."""
        return self.S @ self.vectors

    @property
    def next_eigenvalue(self) -> float:
        return float(self.eigenvalues[-1])


@dataclass(frozen=True, eq=False)
class AuxiliarySpace:
    mesh: NestedMesh
    k: float
    H: float
    l: int
    elements: tuple = field(repr=False)

    @property
    def Lambda(self) -> float:
        return min(e.next_eigenvalue for e in self.elements)

    def eigenvalue_table(self) -> np.ndarray:
        return np.array([e.eigenvalues for e in self.elements])

    @property
    def n_modes(self) -> int:
        return self.l * len(self.elements)


def _fix_phase(vecs: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(vecs), axis=0)
    ph = vecs[idx, np.arange(vecs.shape[1])]
    return vecs * (np.abs(ph) / ph)[None, :]


def solve_local_spectral(ops_i: OperatorSet, l: int):
    """Smallest ``l + 1`` eigenpairs of the pencil (a_i, s_i).

    Returns ``(eigenvalues, vectors)`` with ``l + 1`` values and the first
    ``l`` vectors, s_i-orthonormal and with their largest entry made positive.
    """
    n = ops_i.n
    if l + 1 > n:
        raise ValueError(f"cannot retain {l} modes from a {n}-dimensional element space")
    A = ops_i.a_matrix()
    S = ops_i.S
    try:
        if n <= DENSE_EIG_LIMIT:
            vals, vecs = sla.eigh(A.toarray(), S.toarray(), subset_by_index=[0, l])
        else:
            vals, vecs = spla.eigsh(A.tocsc(), k=l + 1, M=S.tocsc(), sigma=0.0, which="LM")
            order = np.argsort(vals, kind="stable")
            vals, vecs = vals[order], vecs[:, order]
            vecs = vecs / np.sqrt(np.einsum("ij,ij->j", vecs, S @ vecs))[None, :]
    except (np.linalg.LinAlgError, spla.ArpackError) as exc:
        raise SolverError(f"local eigensolve failed on element {ops_i.region.center_element}: {exc}") from exc
    return vals, _fix_phase(vecs[:, :l])


def _element_key(mesh, field, region):
    return (field.values[region.cell_ids].tobytes(), tuple(region.boundary_sides()))


def compute_auxiliary(mesh: NestedMesh, field: CoefficientField, k: float, l: int = 4,
                      H: float | None = None) -> AuxiliarySpace:
    """Local spectral problems on every coarse element.

    Elements with identical coefficients and boundary faces share one
    eigensolve, so the modes of a homogeneous medium are translates of each
    other.
    """
    H = mesh.H if H is None else H
    cache = {}
    elements = []
    for i in range(mesh.n_coarse):
        region = coarse_element(mesh, i)
        key = _element_key(mesh, field, region)
        if key not in cache:
            ops = assemble_operators(mesh, field, region, k, H)
            vals, vecs = solve_local_spectral(ops, l)
            cache[key] = (vals, vecs, ops.S)
        vals, vecs, S = cache[key]
        elements.append(ElementModes(i, vals, vecs, S, region.edge_map))
    return AuxiliarySpace(mesh, float(k), float(H), int(l), tuple(elements))


# ---------------------------------------------------------------------------
# projection pi on broken (element-wise) fields


def broken(aux: AuxiliarySpace, v) -> np.ndarray:
    """Element-wise restriction of a global field, shape ``(N, n_local, ...)``."""
    v = np.asarray(v)
    if v.shape[0] != aux.mesh.n_edges:
        raise ValueError("field does not match the mesh")
    return np.stack([v[e.edge_map] for e in aux.elements])


def project_pi(aux: AuxiliarySpace, v) -> np.ndarray:
    """pi v as a broken field.

    ``v`` is either a global edge vector or a broken field of shape
    ``(N, n_local)``; the result is always broken, so that pi(pi v) = pi v.
    """
    v = np.asarray(v)
    if v.ndim == 1:
        v = broken(aux, v)
    if v.shape[0] != len(aux.elements):
        raise ValueError("broken field does not match the number of coarse elements")
    out = np.empty(v.shape, dtype=np.result_type(v, float))
    for e, vi in zip(aux.elements, v):
        out[e.index] = e.vectors @ (e.weighted.T @ vi)
    return out


def pi_coefficients(aux: AuxiliarySpace, v) -> np.ndarray:
    """Coefficients s_i(v, phi_j^i) for all (i, j), shape ``(N, l)``."""
    v = np.asarray(v)
    if v.ndim == 1:
        v = broken(aux, v)
    return np.stack([e.weighted.T @ vi for e, vi in zip(aux.elements, v)])


def broken_to_global(aux: AuxiliarySpace, vb) -> np.ndarray:
    """Sum a broken field into a global edge vector; interface edges accumulate."""
    out = np.zeros(aux.mesh.n_edges, dtype=np.result_type(vb, float))
    for e, vi in zip(aux.elements, vb):
        np.add.at(out, e.edge_map, vi)
    return out


def broken_s_norm(aux: AuxiliarySpace, vb) -> float:
    return float(np.sqrt(sum(np.vdot(vi, e.S @ vi).real for e, vi in zip(aux.elements, vb))))


# ---------------------------------------------------------------------------
# multiscale basis


@dataclass(frozen=True, eq=False)
class BasisBlock:
    """Trial functions T_{i,m} phi_j^i, j = 1..l, of one coarse element."""

    element: int
    patch: Patch
    vectors: np.ndarray = field(repr=False)  # (patch.n_edges, l)
    free: np.ndarray = field(repr=False)

    @property
    def is_global(self) -> bool:
        return self.patch.is_global

    def prolonged(self) -> np.ndarray:
        out = np.zeros((self.patch.mesh.n_edges, self.vectors.shape[1]), dtype=complex)
        out[self.patch.edge_map] = self.vectors
        return out


@dataclass(frozen=True, eq=False)
class MultiscaleBasis:
    mesh: NestedMesh
    m: int
    strict: bool
    blocks: tuple = field(repr=False)

    @property
    def n_basis(self) -> int:
        return sum(b.vectors.shape[1] for b in self.blocks)

    def trial_matrix(self) -> sp.csc_matrix:
        """Global trial functions as columns, ordered by (element, mode)."""
        nnz = sum(len(b.free) * b.vectors.shape[1] for b in self.blocks)
        itype = np.int32 if nnz < np.iinfo(np.int32).max else np.int64
        data = np.empty(nnz, dtype=complex)
        indices = np.empty(nnz, dtype=itype)
        indptr = np.zeros(self.n_basis + 1, dtype=itype)
        pos = col = 0
        for b in self.blocks:
            rows = b.patch.edge_map[b.free]
            order = np.argsort(rows, kind="stable")
            rows, loc = rows[order], b.free[order]
            for j in range(b.vectors.shape[1]):
                data[pos:pos + len(rows)] = b.vectors[loc, j]
                indices[pos:pos + len(rows)] = rows
                pos += len(rows)
                col += 1
                indptr[col] = pos
        return sp.csc_matrix((data, indices, indptr), shape=(self.mesh.n_edges, col))

    def test_matrix(self) -> sp.csc_matrix:
        return build_adjoint_basis(self.trial_matrix())


class PatchSystem:
    """Factorized penalised problem (B + s(pi., pi.)) on one patch.

    The rank-(l * #elements) penalty is carried by an auxiliary unknown
    y = U^T t, giving the sparse complex symmetric system

        [A_FF   U_F] [t]   [r]
        [U_F^T   -I] [y] = [0].
    """

    def __init__(self, mesh, field, k, H, aux: AuxiliarySpace, patch: Patch, strict=False):
        self.patch = patch
        self.ops = assemble_operators(mesh, field, patch, k, H)
        self.free = np.flatnonzero(patch.free_mask(strict))
        nf = len(self.free)
        g2f = np.full(mesh.n_edges, -1, dtype=np.int64)
        g2f[patch.edge_map[self.free]] = np.arange(nf)
        rows, cols, vals = [], [], []
        self.columns = {}
        l = aux.l
        for c, e in enumerate(patch.coarse_elements):
            em = aux.elements[e]
            loc = g2f[em.edge_map]
            keep = loc >= 0
            W = em.weighted[keep]
            rows.append(np.repeat(loc[keep], l))
            cols.append(np.tile(np.arange(c * l, (c + 1) * l), keep.sum()))
            vals.append(W.ravel())
            self.columns[int(e)] = slice(c * l, (c + 1) * l)
        ncol = l * len(patch.coarse_elements)
        self.U = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(nf, ncol))
        A = self.ops.system()[self.free][:, self.free]
        self.A_free = A
        aug = sp.bmat([[A, self.U], [self.U.T, -sp.identity(ncol)]], format="csr")
        self.factor = Factorization(aug)
        self.nf = nf

    def penalty_matrix(self) -> sp.csr_matrix:
        return (self.U @ self.U.T).tocsr()

    def rhs(self, element: int) -> np.ndarray:
        return self.U[:, self.columns[int(element)]].toarray()

    def solve(self, r: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=complex)
        r = r.reshape(self.nf, r.shape[1] if r.ndim > 1 else 1)
        rhs = np.vstack([r, np.zeros((self.U.shape[1], r.shape[1]))])
        x = self.factor.solve(rhs)
        t = np.zeros((self.patch.n_edges, r.shape[1]), dtype=complex)
        t[self.free] = x[: self.nf]
        return t

    def release(self):
        self.factor.release()


def build_ms_basis(mesh, field, k, H, aux: AuxiliarySpace, i: int, m: int,
                   strict: bool = False, system: PatchSystem | None = None) -> BasisBlock:
    """Trial functions of element ``i`` on its ``m``-layer patch."""
    patch = extract_patch(mesh, i, m)
    if system is None or system.patch.coarse_lo != patch.coarse_lo or system.patch.coarse_hi != patch.coarse_hi:
        system = PatchSystem(mesh, field, k, H, aux, patch, strict)
    t = system.solve(system.rhs(i))
    if system.factor.last_residual > 1e-8:
        rc = resolution_check(k, H, field.mu_max, aux.Lambda)
        raise SolverError(
            f"patch system of element {i} solved to residual {system.factor.last_residual:.2e}; "
            f"k H sqrt(mu_max / Lambda) = {rc.value:.3g}"
        )
    # keep patch-local numbering; the free mask is re-derived to match the system
    return BasisBlock(i, patch, t, np.flatnonzero(patch.free_mask(strict)))


def build_adjoint_basis(trial):
    """Test functions T*_{i,m} phi = conj(T_{i,m} phi)."""
    if isinstance(trial, BasisBlock):
        return trial.vectors.conj()
    if sp.issparse(trial):
        return trial.conjugate()
    return np.conj(trial)


# process-pool plumbing: workers inherit the shared inputs through fork
_SHARED = {}


def _basis_worker(i):
    s = _SHARED
    blk = build_ms_basis(s["mesh"], s["field"], s["k"], s["H"], s["aux"], i, s["m"], s["strict"])
    return blk


def build_multiscale_basis(mesh, field, k, aux: AuxiliarySpace, m: int, strict: bool = False,
                           H: float | None = None, jobs: int = 1) -> MultiscaleBasis:
    """Trial functions of every element.

    Elements whose patches coincide (e.g. when the patch saturates the
    domain) share one factorization.  With ``jobs > 1`` elements are farmed
    out to worker processes; results are gathered in element order.
    """
    H = aux.H if H is None else H
    N = mesh.n_coarse
    patches = [extract_patch(mesh, i, m) for i in range(N)]
    boxes = [(p.coarse_lo, p.coarse_hi) for p in patches]
    shared_box = len(set(boxes)) < N

    if jobs > 1 and not shared_box and N > 1:
        # more workers than cores buys nothing and multiplies factorization memory
        workers = max(1, min(jobs, len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity")
                             else (os.cpu_count() or 1)))
        _SHARED.update(mesh=mesh, field=field, k=k, H=H, aux=aux, m=m, strict=strict)
        try:
            import multiprocessing as mp

            ctx = mp.get_context("fork")
            with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as ex:
                blocks = list(ex.map(_basis_worker, range(N), chunksize=max(1, N // (4 * workers))))
        finally:
            _SHARED.clear()
        return MultiscaleBasis(mesh, m, strict, tuple(blocks))

    blocks = [None] * N
    by_box = {}
    for i, b in enumerate(boxes):
        by_box.setdefault(b, []).append(i)
    for box, members in by_box.items():
        system = PatchSystem(mesh, field, k, H, aux, patches[members[0]], strict)
        if len(members) > 1:
            free = np.flatnonzero(patches[members[0]].free_mask(strict))
            # a few elements per solve keeps the dense right-hand sides small
            for s0 in range(0, len(members), 4):
                group = members[s0:s0 + 4]
                T = system.solve(np.hstack([system.rhs(i) for i in group]))
                for n_, i in enumerate(group):
                    blocks[i] = BasisBlock(i, patches[i], T[:, n_ * aux.l:(n_ + 1) * aux.l].copy(), free)
        else:
            blocks[members[0]] = build_ms_basis(mesh, field, k, H, aux, members[0], m, strict, system)
        system.release()
    return MultiscaleBasis(mesh, m, strict, tuple(blocks))


def coercivity_ratio(system: PatchSystem, aux: AuxiliarySpace, t_free: np.ndarray) -> float:
    """|B(t,t) + s(pi t, pi t)| / (|t|_a^2 + |pi t|_s^2) on a patch."""
    A = system.A_free
    y = system.U.T @ t_free
    num = abs(np.vdot(t_free, A @ t_free) + np.vdot(y, y))
    Aa = system.ops.a_matrix()[system.free][:, system.free]
    den = np.vdot(t_free, Aa @ t_free).real + np.vdot(y, y).real
    return float(num / den)


# ---------------------------------------------------------------------------
# coarse Petrov-Galerkin problem


@dataclass(frozen=True, eq=False)
class CoarseProblem:
    matrix: np.ndarray = field(repr=False)
    load: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)
    u_ms: np.ndarray = field(repr=False)
    rcond: float = float("nan")


def _offsets(basis: MultiscaleBasis) -> np.ndarray:
    return np.concatenate([[0], np.cumsum([b.vectors.shape[1] for b in basis.blocks])])


def coarse_matrix(ops: OperatorSet, trial, field: CoefficientField | None = None,
                  block: int = 256) -> np.ndarray:
    """Entries B(psi_p, conj(psi_q)) = psi_q^T A psi_p.

    B is conjugate-linear in its second slot, so pairing with the conjugated
    test function cancels the conjugation and leaves the plain bilinear form.
    Given a MultiscaleBasis and the coefficient field, A is split into coarse
    element contributions, C = sum_K V_K^T A_K V_K, and only the patch-local
    blocks are touched. A sparse trial matrix is handled in column blocks.
    """
    if isinstance(trial, MultiscaleBasis) and field is not None:
        return _element_coarse_matrix(trial, field, ops.k, ops.H)
    if isinstance(trial, MultiscaleBasis):
        trial = trial.trial_matrix()
    A = ops.system()
    Psi = sp.csc_matrix(trial)
    PsiT = Psi.T.tocsr()
    n = Psi.shape[1]
    C = np.empty((n, n), dtype=complex)
    for s in range(0, n, block):
        C[:, s:s + block] = (PsiT @ (A @ Psi[:, s:s + block])).toarray()
    return C


def _element_coarse_matrix(basis: MultiscaleBasis, field: CoefficientField, k, H) -> np.ndarray:
    mesh = basis.mesh
    nf = mesh.n_fine_per_coarse
    blocks = basis.blocks
    off = _offsets(basis)
    containing = [[] for _ in range(mesh.n_coarse)]
    for n_, b in enumerate(blocks):
        for e in b.patch.coarse_elements:
            containing[int(e)].append(n_)
    d, ijk = edge_origins((nf, nf, nf))
    C = np.zeros((off[-1], off[-1]), dtype=complex)
    for e, members in enumerate(containing):
        if not members:
            continue
        el = extract_patch(mesh, e, 0)
        AK = assemble_operators(mesh, field, el, k, H).system()
        V = []
        for n_ in members:
            pat = blocks[n_].patch
            g = ijk + (np.array(el.coarse_lo) - np.array(pat.coarse_lo)) * nf
            V.append(blocks[n_].vectors[edge_index(pat.dims, d, g[:, 0], g[:, 1], g[:, 2])])
        V = np.hstack(V)
        cols = np.concatenate([np.arange(off[n_], off[n_ + 1]) for n_ in members])
        C[np.ix_(cols, cols)] += V.T @ (AK @ V)
    return C


def restrict(trial, v) -> np.ndarray:
    """Psi^T v."""
    v = np.asarray(v)
    if isinstance(trial, MultiscaleBasis):
        return np.concatenate([b.vectors.T @ v[b.patch.edge_map] for b in trial.blocks])
    return np.asarray(trial.T @ v).ravel()


def expand(trial, c) -> np.ndarray:
    """Psi c."""
    c = np.asarray(c)
    if isinstance(trial, MultiscaleBasis):
        off = _offsets(trial)
        out = np.zeros(trial.mesh.n_edges, dtype=np.result_type(c, complex))
        for n_, b in enumerate(trial.blocks):
            out[b.patch.edge_map] += b.vectors @ c[off[n_]:off[n_ + 1]]
        return out
    return np.asarray(trial @ c).ravel()


def column_norms(M: sp.spmatrix, trial, block: int = 256) -> np.ndarray:
    """sqrt(psi_q^H M psi_q) for every column."""
    if isinstance(trial, MultiscaleBasis):
        M = M.tocsr()
        out = []
        for b in trial.blocks:
            em = b.patch.edge_map
            V = b.vectors
            out.append(np.real(np.sum(V.conj() * (M[em][:, em] @ V), axis=0)))
        return np.sqrt(np.maximum(np.concatenate(out), 0))
    Psi = sp.csc_matrix(trial)
    out = np.empty(Psi.shape[1])
    for s in range(0, Psi.shape[1], block):
        P = Psi[:, s:s + block]
        out[s:s + block] = np.sqrt(np.maximum(np.real(np.asarray(P.conj().multiply(M @ P).sum(axis=0))).ravel(), 0))
    return out


def galerkin_defect(ops: OperatorSet, trial, e) -> np.ndarray:
    """B(e, conj(psi_q)) for every trial column psi_q."""
    return restrict(trial, ops.system() @ e)


def assemble_coarse(ops: OperatorSet, basis: MultiscaleBasis, load,
                    aux: AuxiliarySpace | None = None, field: CoefficientField | None = None) -> CoarseProblem:
    b = np.asarray(getattr(load, "values", load), dtype=complex)
    if b.shape != (ops.n,) or ops.n != basis.mesh.n_edges:
        raise ValueError("load, operators and basis must live on the same whole-domain mesh")
    C = coarse_matrix(ops, basis, field)
    rhs = restrict(basis, b)
    if not np.any(rhs):
        z = np.zeros(C.shape[0], dtype=complex)
        return CoarseProblem(C, rhs, z, np.zeros(ops.n, dtype=complex), 1.0)
    lu, piv = sla.lu_factor(C)
    anorm = np.abs(C).sum(axis=0).max()
    rcond, info = sla.lapack.zgecon(lu, anorm)
    if info != 0 or not rcond > 1e-15:
        msg = f"coarse matrix is numerically singular (rcond {rcond:.2e})"
        if aux is not None and field is not None:
            rc = resolution_check(ops.k, ops.H, field.mu_max, aux.Lambda)
            msg += f"; resolution value {rc.value:.3g} (threshold {rc.threshold})"
        raise CoarseSolveError(msg)
    c = sla.lu_solve((lu, piv), rhs)
    return CoarseProblem(C, rhs, c, expand(basis, c), float(rcond))


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class ResolutionReport:
    value: float
    threshold: float
    satisfied: bool


def resolution_check(k, H, mu_max, Lambda, threshold: float = RESOLUTION_THRESHOLD,
                     warn: bool = False) -> ResolutionReport:
    """k H sqrt(mu_max) / sqrt(Lambda) against a configurable threshold."""
    value = k * H * np.sqrt(mu_max) / np.sqrt(Lambda)
    rep = ResolutionReport(float(value), float(threshold), bool(value < threshold))
    if warn and not rep.satisfied:
        warnings.warn(f"resolution condition not met: {value:.3g} >= {threshold}", stacklevel=2)
    return rep


def decay_profile(mesh, field, k, H, aux: AuxiliarySpace, i: int, j: int, m_list, strict=False):
    """Distance of localized trial functions from the global one.

    Returns ``[(m, |T_i phi - T_{i,m} phi|_a, |pi(T_i phi - T_{i,m} phi)|_s), ...]``.
    """
    full = whole_domain(mesh)
    ops = assemble_operators(mesh, field, full, k, H)
    Aa = ops.a_matrix()
    sysg = PatchSystem(mesh, field, k, H, aux, full, strict)
    ref = sysg.solve(sysg.rhs(i)[:, [j]])[:, 0]
    sysg.release()
    out = []
    for m in sorted(m_list):
        blk = build_ms_basis(mesh, field, k, H, aux, i, m, strict)
        d = ref - blk.prolonged()[:, j]
        ea = float(np.sqrt(max(np.vdot(d, Aa @ d).real, 0.0)))
        es = float(np.linalg.norm(pi_coefficients(aux, d)))
        out.append((m, ea, es))
    return out

"""Fine-scale reference solves and the homogeneous exact-solution benchmark."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .assembly import GAUSS_POINTS, GAUSS_WEIGHTS, LoadVector, OperatorSet
from .linalg import Factorization, SolverError, relative_residual
from .mesh import NestedMesh

RESIDUAL_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class FineSolution:
    u: np.ndarray = field(repr=False)
    residual: float
    report: dict = field(default_factory=dict)


def solve_fine(ops: OperatorSet, load: LoadVector | np.ndarray, rtol: float = RESIDUAL_TOL) -> FineSolution:
    if not ops.region.is_global:
        raise ValueError("fine solves need operators assembled on the whole domain")
    b = np.asarray(getattr(load, "values", load), dtype=complex)
    if b.shape != (ops.n,):
        raise ValueError(f"load of shape {b.shape} for {ops.n} unknowns")
    if not np.any(b):
        return FineSolution(np.zeros(ops.n, dtype=complex), 0.0, {"method": "trivial"})
    A = ops.system()
    t0 = time.perf_counter()
    try:
        F = Factorization(A, rtol=rtol)
        u = F.solve(b)
        res = F.last_residual
        report = {"method": F.backend, "factor_s": time.perf_counter() - t0}
        F.release()
    except SolverError as exc:
        u, res, report = _iterative_fallback(A, b, rtol, str(exc))
    if not res <= rtol:
        raise SolverError(f"fine solve reached relative residual {res:.3e} > {rtol:.1e}")
    return FineSolution(u, res, report)


def _iterative_fallback(A, b, rtol, reason):
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-5, fill_factor=20)
    prec = spla.LinearOperator(A.shape, ilu.solve, dtype=complex)
    iters = []
    u, info = spla.gmres(A, b, M=prec, rtol=rtol * 0.1, restart=200, maxiter=50,
                         callback=lambda r: iters.append(r), callback_type="pr_norm")
    if info != 0:
        raise SolverError(f"GMRES fallback did not converge after {len(iters)} iterations ({reason})")
    return u, relative_residual(A, u, b), {"method": "gmres+ilu", "iterations": len(iters)}


# ---------------------------------------------------------------------------
# homogeneous benchmark: u = sin(kx) (1, 1, 1)


def _curl_exact(k, x):
    c = k * np.cos(k * x)
    return np.stack([np.zeros_like(x), -c, c], axis=-1)


def exact_benchmark(k: float, boundary: str = "consistent"):
    """Samplers ``(u, f, g)`` of the homogeneous benchmark with mu_r = 1.

    ``boundary="consistent"`` returns the impedance data that makes ``u`` the
    solution of the weak problem, ``g = curl u x n - i k u_T``.
    ``boundary="published"`` returns an alternative face-wise data set whose
    x = 0 face is zero and whose imaginary parts differ in sign. It is
    not consistent with ``u``.
    """
    if k <= 0:
        raise ValueError("wavenumber must be positive")

    def u(pts):
        s = np.sin(k * np.asarray(pts)[:, 0])
        return np.stack([s, s, s], axis=-1).astype(complex)

    def f(pts):
        x = np.asarray(pts)[:, 0]
        out = np.zeros((len(x), 3), dtype=complex)
        out[:, 0] = -k**2 * np.sin(k * x)
        return out

    def g_consistent(pts, axis, side):
        pts = np.asarray(pts)
        n = np.zeros(3)
        n[axis] = 1.0 if side == 1 else -1.0
        uu = u(pts)
        ut = uu - (uu @ n)[:, None] * n[None, :]
        return np.cross(_curl_exact(k, pts[:, 0]), n) - 1j * k * ut

    def g_published(pts, axis, side):
        x = np.asarray(pts)[:, 0]
        out = np.zeros((len(x), 3), dtype=complex)
        c, s = np.cos(k * x), np.sin(k * x)
        if (axis, side) == (0, 1):
            v = k * np.cos(k) + 1j * k * np.sin(k)
            out[:, 1] = v
            out[:, 2] = v
        elif (axis, side) == (1, 1):
            out[:, 0] = -k * c + 1j * k * s
            out[:, 2] = -1j * k * s
        elif (axis, side) == (2, 1):
            out[:, 0] = -k * c + 1j * k * s
            out[:, 1] = 1j * k * s
        elif (axis, side) == (1, 0):
            out[:, 0] = k * c + 1j * k * s
            out[:, 2] = 1j * k * s
        elif (axis, side) == (2, 0):
            out[:, 0] = k * c + 1j * k * s
            out[:, 1] = 1j * k * s
        return out

    if boundary == "consistent":
        return u, f, g_consistent
    if boundary == "published":
        return u, f, g_published
    raise ValueError(f"unknown boundary data variant {boundary!r}")


def interpolate_edge(mesh: NestedMesh, sampler) -> np.ndarray:
    """Tangential line integral of ``sampler`` along every edge (3-point Gauss)."""
    start, d = mesh.edge_geometry()
    h = mesh.h
    vals = np.zeros(len(d), dtype=complex)
    for t, w in zip(GAUSS_POINTS, GAUSS_WEIGHTS):
        pts = start.astype(float).copy()
        pts[np.arange(len(d)), d] += t * h
        vals += w * h * np.asarray(sampler(pts))[np.arange(len(d)), d]
    return vals

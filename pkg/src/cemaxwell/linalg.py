"""Sparse direct factorizations for complex symmetric systems.

MKL PARDISO (matrix type 6, complex symmetric) is used when ``libmkl_rt`` can
be loaded; otherwise SuperLU from scipy.  Every solve is followed by
residual-driven iterative refinement so that callers get a bound on the
relative residual rather than a promise from the factorization.
"""
from __future__ import annotations

import ctypes
import glob
import logging
import os
import sys
from ctypes.util import find_library

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    pass


def _find_mkl():
    override = os.environ.get("CEMAXWELL_MKL_RT")
    candidates = [override] if override else []
    lib = find_library("mkl_rt")
    if lib:
        candidates.append(lib)
    for root in {sys.prefix, "/usr/local", "/usr"}:
        candidates += sorted(glob.glob(os.path.join(root, "lib", "libmkl_rt.so*")))
    for path in candidates:
        try:
            return ctypes.CDLL(path)
        except OSError:
            continue
    return None


_MKL = None
_MKL_PROBED = False


def _mkl():
    global _MKL, _MKL_PROBED
    if not _MKL_PROBED:
        _MKL_PROBED = True
        if os.environ.get("CEMAXWELL_SOLVER", "").lower() != "superlu":
            _MKL = _find_mkl()
            if _MKL is not None:
                _MKL.pardiso.restype = None
    return _MKL


def backend_name() -> str:
    return "pardiso" if _mkl() is not None else "superlu"


class _Pardiso:
    MTYPE = 6  # complex symmetric

    def __init__(self, A: sp.csr_matrix):
        self.lib = _mkl()
        self.pt = np.zeros(64, dtype=np.int64)
        self.n = A.shape[0]
        upper = sp.triu(A, format="csr")
        upper = (upper + sp.csr_matrix((np.zeros(self.n, dtype=complex),
                                        (np.arange(self.n), np.arange(self.n))),
                                       shape=A.shape)).tocsr()
        upper.sort_indices()
        self.data = np.ascontiguousarray(upper.data, dtype=np.complex128)
        self.ia = np.ascontiguousarray(upper.indptr, dtype=np.int32)
        self.ja = np.ascontiguousarray(upper.indices, dtype=np.int32)
        self.iparm = np.zeros(64, dtype=np.int32)
        self.iparm[0] = 1    # user-supplied iparm
        self.iparm[1] = 2    # nested dissection ordering
        self.iparm[7] = 2    # refinement steps
        self.iparm[9] = 8    # pivot perturbation 1e-8
        self.iparm[10] = 1   # symmetric scaling
        self.iparm[12] = 1   # weighted matching
        self.iparm[34] = 1   # zero-based indexing
        self.perm = np.zeros(self.n, dtype=np.int32)
        self._call(12, np.zeros((self.n, 1), dtype=complex))
        self.perturbed_pivots = int(self.iparm[13])

    def _call(self, phase, b):
        x = np.zeros_like(b)
        err = ctypes.c_int32(0)
        i32 = ctypes.POINTER(ctypes.c_int32)
        self.lib.pardiso(
            self.pt.ctypes.data_as(ctypes.POINTER(ctypes.c_int64)),
            ctypes.byref(ctypes.c_int32(1)),
            ctypes.byref(ctypes.c_int32(1)),
            ctypes.byref(ctypes.c_int32(self.MTYPE)),
            ctypes.byref(ctypes.c_int32(phase)),
            ctypes.byref(ctypes.c_int32(self.n)),
            self.data.ctypes.data_as(ctypes.c_void_p),
            self.ia.ctypes.data_as(i32),
            self.ja.ctypes.data_as(i32),
            self.perm.ctypes.data_as(i32),
            ctypes.byref(ctypes.c_int32(b.shape[1])),
            self.iparm.ctypes.data_as(i32),
            ctypes.byref(ctypes.c_int32(0)),
            b.ctypes.data_as(ctypes.c_void_p),
            x.ctypes.data_as(ctypes.c_void_p),
            ctypes.byref(err),
        )
        if err.value != 0:
            raise SolverError(f"PARDISO phase {phase} failed with error {err.value}")
        return x

    def solve(self, b):
        b = np.asfortranarray(b, dtype=np.complex128)
        return self._call(33, b)

    def release(self):
        pt = getattr(self, "pt", None)
        if self.lib is not None and pt is not None and pt.any():
            try:
                self._call(-1, np.zeros((self.n, 1), dtype=complex))
            except SolverError:  # pragma: no cover
                pass
            self.pt[:] = 0

    def __del__(self):
        try:
            self.release()
        except Exception:  # interpreter shutdown
            pass


class _SuperLU:
    def __init__(self, A):
        try:
            self.lu = spla.splu(A.tocsc().astype(complex), permc_spec="MMD_AT_PLUS_A")
        except RuntimeError as exc:
            raise SolverError(f"SuperLU factorization failed: {exc}") from exc

    def solve(self, b):
        return self.lu.solve(np.asarray(b, dtype=complex))

    def release(self):
        self.lu = None


class Factorization:
    """Factorization of a complex symmetric sparse matrix with refined solves."""

    def __init__(self, A, rtol: float = 1e-10, max_refine: int = 5):
        self.A = sp.csr_matrix(A, dtype=complex)
        if self.A.shape[0] != self.A.shape[1]:
            raise ValueError("matrix must be square")
        self.rtol = rtol
        self.max_refine = max_refine
        self.backend = backend_name()
        self._impl = _Pardiso(self.A) if self.backend == "pardiso" else _SuperLU(self.A)

    def solve(self, b, chunk: int = 16) -> np.ndarray:
        """Refined solve; many right-hand sides are taken ``chunk`` at a time."""
        b = np.asarray(b, dtype=complex)
        vec = b.ndim == 1
        B = b.reshape(len(b), -1)
        X = np.empty_like(B)
        worst = 0.0
        for s in range(0, B.shape[1], chunk):
            X[:, s:s + chunk], r = self._solve(B[:, s:s + chunk])
            worst = max(worst, r)
        self.last_residual = worst
        return X[:, 0] if vec else X

    def _solve(self, B):
        X = np.asarray(self._impl.solve(B)).reshape(B.shape)
        bnorm = np.linalg.norm(B, axis=0)
        bnorm[bnorm == 0] = 1.0
        for _ in range(self.max_refine):
            R = B - self.A @ X
            rel = np.linalg.norm(R, axis=0) / bnorm
            if np.all(rel <= self.rtol):
                break
            X = X + np.asarray(self._impl.solve(R)).reshape(B.shape)
        else:
            rel = np.linalg.norm(B - self.A @ X, axis=0) / bnorm
        if not np.all(np.isfinite(X)):
            raise SolverError("factorization produced non-finite values")
        return X, float(np.max(rel)) if rel.size else 0.0

    def release(self):
        self._impl.release()


def relative_residual(A, x, b) -> float:
    bn = np.linalg.norm(b)
    return float(np.linalg.norm(b - A @ x) / (bn if bn > 0 else 1.0))

import warnings

import numpy as np
import pytest
import scipy.linalg as sla
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from cemaxwell import cem
from cemaxwell.assembly import apply_B, assemble_load, assemble_operators, norm_a
from cemaxwell.coeff import CoefficientField, ModelKind, ModelSpec, generate
from cemaxwell.fine import exact_benchmark, solve_fine
from cemaxwell.mesh import EdgeKind, build_nested_mesh, coarse_element, extract_patch

import oracles


def random_field(mesh, seed, lo=0.5, hi=4.0):
    return CoefficientField(np.random.default_rng(seed).uniform(lo, hi, mesh.n_cells))


def system_oracle(n, mu, k, H):
    K, M, Mbd, S = oracles.quadrature_matrices(n, mu, k, H)
    return K - k**2 * M - 1j * k * Mbd, K + k**2 * M + k * Mbd, S


def penalty_oracle(aux, n_edges, elements):
    """Dense s(pi., pi.) restricted to the given elements."""
    P = np.zeros((n_edges, n_edges))
    for i in elements:
        e = aux.elements[i]
        W = np.zeros((n_edges, e.vectors.shape[1]))
        W[e.edge_map] = e.S @ e.vectors
        P += W @ W.T
    return P


@pytest.fixture(scope="module")
def het2():
    """2^3 coarse, 2^3 fine per coarse, random coefficient."""
    mesh = build_nested_mesh(2, 2)
    fld = random_field(mesh, 10)
    k = 3.0
    aux = cem.compute_auxiliary(mesh, fld, k, 4)
    return mesh, fld, k, aux


# ---------------------------------------------------------------------------
# local spectral problems


def test_homogeneous_interior_element_spectrum():
    mesh = build_nested_mesh(3, 4)
    i = mesh.coarse_index(1, 1, 1)
    ops = assemble_operators(mesh, generate(ModelSpec(), mesh), coarse_element(mesh, i), 4.0)
    vals, vecs = cem.solve_local_spectral(ops, 4)
    assert len(vals) == 5 and vecs.shape == (ops.n, 4)
    assert np.all(vals > 0) and np.all(np.diff(vals) >= 0)


@pytest.mark.parametrize("seed", [0, 1])
def test_spectral_matches_dense_pencil(seed):
    mesh = build_nested_mesh(1, 2)
    fld = random_field(mesh, seed)
    k, l = 2.5, 4
    ops = assemble_operators(mesh, fld, coarse_element(mesh, 0), k)
    vals, vecs = cem.solve_local_spectral(ops, l)
    _, A, S = system_oracle(2, fld.values, k, 1.0)
    ref_vals, ref_vecs = sla.eigh(A, S)
    assert np.allclose(vals, ref_vals[: l + 1], rtol=1e-9, atol=0)
    # the retained subspace is well separated from the next mode
    assert ref_vals[l] - ref_vals[l - 1] > 1e-3 * ref_vals[l]
    assert oracles.principal_angles(vecs, ref_vecs[:, :l], S) <= 1e-8


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), k=st.floats(0.5, 8.0), l=st.integers(1, 6))
def test_spectral_invariants(seed, k, l):
    mesh = build_nested_mesh(2, 2)
    fld = random_field(mesh, seed, 0.1, 10.0)
    ops = assemble_operators(mesh, fld, coarse_element(mesh, seed % 8), k)
    vals, vecs = cem.solve_local_spectral(ops, l)
    assert np.all(vals > 0) and np.all(np.diff(vals) >= 0)
    G = vecs.T @ (ops.S @ vecs)
    assert np.max(np.abs(G - np.eye(l))) <= 1e-10
    A = ops.a_matrix()
    ray = np.einsum("ij,ij->j", vecs, A @ vecs)
    assert np.all(np.abs(ray - vals[:l]) <= 1e-8 * vals[:l])
    idx = np.argmax(np.abs(vecs), axis=0)
    assert np.all(vecs[idx, np.arange(l)] > 0)


def test_spectral_errors():
    mesh = build_nested_mesh(1, 1)
    ops = assemble_operators(mesh, generate(ModelSpec(), mesh), None, 1.0)
    with pytest.raises(ValueError):
        cem.solve_local_spectral(ops, 12)


def test_identical_elements_share_modes():
    mesh = build_nested_mesh(4, 2)
    aux = cem.compute_auxiliary(mesh, generate(ModelSpec(), mesh), 4.0, 4)
    a, b = mesh.coarse_index(1, 1, 1), mesh.coarse_index(2, 2, 1)
    assert np.array_equal(aux.elements[a].eigenvalues, aux.elements[b].eigenvalues)
    assert aux.eigenvalue_table().shape == (64, 5)
    assert aux.Lambda == aux.eigenvalue_table()[:, -1].min()


@pytest.mark.xfail(strict=True, reason="the lowest pencil modes are discrete gradients, so their curl vanishes")
def test_retained_modes_have_curl_energy():
    mesh = build_nested_mesh(2, 3)
    fld = random_field(mesh, 3, 1.0, 10.0)
    aux = cem.compute_auxiliary(mesh, fld, 4.0, 4)
    for e in aux.elements:
        ops = assemble_operators(mesh, fld, coarse_element(mesh, e.index), 4.0)
        K = ops.K
        for phi in e.vectors.T:
            assert np.linalg.norm(K @ phi) > 1e-8 * sp.linalg.norm(K) * np.linalg.norm(phi)


# ---------------------------------------------------------------------------
# projection


def test_pi_of_a_mode(het2):
    mesh, _, _, aux = het2
    e = aux.elements[5]
    for j in range(aux.l):
        v = np.zeros(mesh.n_edges)
        v[e.edge_map] = e.vectors[:, j]
        c = cem.pi_coefficients(aux, v)[5]
        expect = np.zeros(aux.l)
        expect[j] = 1.0
        assert np.allclose(c, expect, atol=1e-12)
        assert np.allclose(cem.project_pi(aux, v)[5], e.vectors[:, j], atol=1e-12)


def test_pi_idempotent_and_contractive(het2):
    mesh, _, _, aux = het2
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.standard_normal(mesh.n_edges) + 1j * rng.standard_normal(mesh.n_edges)
        p = cem.project_pi(aux, v)
        pp = cem.project_pi(aux, p)
        vs = cem.broken_s_norm(aux, cem.broken(aux, v))
        assert cem.broken_s_norm(aux, pp - p) <= 1e-10 * vs
        for e, pi, vi in zip(aux.elements, p, cem.broken(aux, v)):
            assert np.vdot(pi, e.S @ pi).real <= np.vdot(vi, e.S @ vi).real * (1 + 1e-12)


def test_pi_projection_error_bound(het2):
    mesh, fld, k, aux = het2
    rng = np.random.default_rng(1)
    for e in aux.elements:
        A = assemble_operators(mesh, fld, coarse_element(mesh, e.index), k).a_matrix()
        lam = e.next_eigenvalue
        V = rng.standard_normal((len(e.edge_map), 100)) + 1j * rng.standard_normal((len(e.edge_map), 100))
        R = V - e.vectors @ (e.weighted.T @ V)
        lhs = np.einsum("ij,ij->j", R.conj(), e.S @ R).real
        rhs = np.einsum("ij,ij->j", V.conj(), A @ V).real / lam
        assert np.all(lhs <= rhs * (1 + 1e-9))


def test_pi_shape_errors(het2):
    _, _, _, aux = het2
    with pytest.raises(ValueError):
        cem.project_pi(aux, np.zeros(7))
    with pytest.raises(ValueError):
        cem.project_pi(aux, np.zeros((3, 54)))


def test_broken_round_trip(het2):
    mesh, _, _, aux = het2
    v = np.random.default_rng(2).standard_normal(mesh.n_edges)
    mult = cem.broken_to_global(aux, cem.broken(aux, np.ones(mesh.n_edges)))
    assert np.allclose(cem.broken_to_global(aux, cem.broken(aux, v)), v * mult)


# ---------------------------------------------------------------------------
# multiscale basis


def dense_patch_solve(mesh, fld, k, aux, i, m, adjoint=False):
    A, _, S = system_oracle(mesh.n, fld.values, k, mesh.H)
    patch = extract_patch(mesh, i, m)
    P = penalty_oracle(aux, mesh.n_edges, patch.coarse_elements)
    free = patch.edge_map[patch.free_mask()]
    Mat = (A + P)[np.ix_(free, free)]
    e = aux.elements[i]
    R = np.zeros((mesh.n_edges, aux.l))
    R[e.edge_map] = e.S @ e.vectors
    rhs = R[free]
    if adjoint:
        Mat = Mat.conj().T
    t = np.zeros((mesh.n_edges, aux.l), dtype=complex)
    t[free] = np.linalg.solve(Mat, rhs)
    return t


def test_basis_matches_dense_oracle(het2):
    mesh, fld, k, aux = het2
    blk = cem.build_ms_basis(mesh, fld, k, mesh.H, aux, 3, 1)
    assert blk.is_global
    ref = dense_patch_solve(mesh, fld, k, aux, 3, 1)
    got = blk.prolonged()
    assert np.linalg.norm(got - ref) <= 1e-9 * np.linalg.norm(ref)


@pytest.fixture(scope="module")
def het3():
    mesh = build_nested_mesh(3, 2)
    fld = random_field(mesh, 11)
    k = 3.0
    return mesh, fld, k, cem.compute_auxiliary(mesh, fld, k, 3)


def test_local_basis_matches_dense_oracle_and_has_zero_trace(het3):
    mesh, fld, k, aux = het3
    for i in (0, mesh.coarse_index(1, 0, 2)):
        blk = cem.build_ms_basis(mesh, fld, k, mesh.H, aux, i, 1)
        assert not blk.is_global
        ref = dense_patch_solve(mesh, fld, k, aux, i, 1)
        assert np.linalg.norm(blk.prolonged() - ref) <= 1e-9 * np.linalg.norm(ref)
        pb = blk.patch.edge_kind == EdgeKind.PATCH_BOUNDARY
        assert pb.any() and np.all(blk.vectors[pb] == 0)


def test_adjoint_basis_matches_dual_solve(het3):
    mesh, fld, k, aux = het3
    i = mesh.coarse_index(1, 1, 1)
    blk = cem.build_ms_basis(mesh, fld, k, mesh.H, aux, i, 1)
    dual = dense_patch_solve(mesh, fld, k, aux, i, 1, adjoint=True)
    test = np.zeros_like(dual)
    test[blk.patch.edge_map] = cem.build_adjoint_basis(blk)
    assert np.linalg.norm(test - dual) <= 1e-8 * np.linalg.norm(dual)


def test_adjoint_conjugation_forms():
    x = np.random.default_rng(0).standard_normal((6, 2))
    assert np.array_equal(cem.build_adjoint_basis(x), x)
    z = x + 1j * x[::-1]
    assert np.array_equal(cem.build_adjoint_basis(cem.build_adjoint_basis(z)), z)
    s = sp.csc_matrix(z)
    assert np.array_equal(cem.build_adjoint_basis(s).toarray(), z.conj())


def test_strict_mode_clamps_domain_boundary(het3):
    mesh, fld, k, aux = het3
    blk = cem.build_ms_basis(mesh, fld, k, mesh.H, aux, 0, 1, strict=True)
    dom = blk.patch.edge_kind == EdgeKind.DOMAIN_BOUNDARY
    assert np.all(blk.vectors[dom] == 0)
    loose = cem.build_ms_basis(mesh, fld, k, mesh.H, aux, 0, 1)
    assert np.any(loose.vectors[dom] != 0)


def test_collection_matches_single_builds(het3):
    mesh, fld, k, aux = het3
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    assert basis.n_basis == aux.n_modes
    for i in (0, 13, 26):
        blk = cem.build_ms_basis(mesh, fld, k, mesh.H, aux, i, 1)
        assert np.allclose(basis.blocks[i].vectors, blk.vectors, rtol=0, atol=1e-12)
    Psi = basis.trial_matrix()
    assert Psi.shape == (mesh.n_edges, aux.n_modes)
    col = 13 * aux.l + 1
    assert np.allclose(Psi[:, col].toarray().ravel(), basis.blocks[13].prolonged()[:, 1])


def test_saturated_patches_share_one_system(het2):
    mesh, fld, k, aux = het2
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    assert all(b.is_global for b in basis.blocks)
    ref = dense_patch_solve(mesh, fld, k, aux, 6, 1)
    assert np.linalg.norm(basis.blocks[6].prolonged() - ref) <= 1e-9 * np.linalg.norm(ref)


def test_coercivity_certificate():
    mesh = build_nested_mesh(4, 2)
    fld = generate(ModelSpec(), mesh)
    k = 4.0
    aux = cem.compute_auxiliary(mesh, fld, k, 4)
    i = mesh.coarse_index(1, 1, 1)
    system = cem.PatchSystem(mesh, fld, k, mesh.H, aux, extract_patch(mesh, i, 1))
    t = system.solve(system.rhs(i))
    for j in range(aux.l):
        assert cem.coercivity_ratio(system, aux, t[system.free, j]) >= cem.COERCIVITY_THRESHOLD
    system.release()


# ---------------------------------------------------------------------------
# coarse problem


def test_zero_load_gives_zero(het2):
    mesh, fld, k, aux = het2
    ops = assemble_operators(mesh, fld, None, k)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    cp = cem.assemble_coarse(ops, basis, np.zeros(mesh.n_edges))
    assert not cp.coefficients.any() and not cp.u_ms.any()


def test_coarse_entries_are_sesquilinear_pairings(het3):
    mesh, fld, k, aux = het3
    ops = assemble_operators(mesh, fld, None, k)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    Psi = basis.trial_matrix()
    C = cem.coarse_matrix(ops, Psi)
    Phi = cem.build_adjoint_basis(Psi)
    rng = np.random.default_rng(0)
    for p, q in rng.integers(0, Psi.shape[1], (25, 2)):
        direct = apply_B(ops, Psi[:, p].toarray().ravel(), Phi[:, q].toarray().ravel())
        assert abs(C[q, p] - direct) <= 1e-12 * np.abs(C).max()


@pytest.mark.parametrize("m", [0, 1])
def test_blockwise_products_match_trial_matrix(het3, m):
    mesh, fld, k, aux = het3
    ops = assemble_operators(mesh, fld, None, k)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, m)
    Psi = basis.trial_matrix()
    C = cem.coarse_matrix(ops, Psi)
    assert np.abs(cem.coarse_matrix(ops, basis, fld) - C).max() <= 1e-13 * np.abs(C).max()
    assert np.abs(cem.coarse_matrix(ops, basis) - C).max() <= 1e-13 * np.abs(C).max()
    rng = np.random.default_rng(m)
    v = rng.standard_normal(mesh.n_edges) + 1j * rng.standard_normal(mesh.n_edges)
    c = rng.standard_normal(Psi.shape[1]) + 1j * rng.standard_normal(Psi.shape[1])
    assert np.allclose(cem.restrict(basis, v), Psi.T @ v, rtol=0, atol=1e-12 * np.abs(v).max())
    assert np.allclose(cem.expand(basis, c), Psi @ c, rtol=0, atol=1e-12 * np.abs(c).max())
    Ma = ops.a_matrix()
    assert np.allclose(cem.column_norms(Ma, basis), cem.column_norms(Ma, Psi), rtol=1e-12)


def test_single_element_petrov_galerkin_oracle():
    mesh = build_nested_mesh(1, 2)
    fld = random_field(mesh, 4)
    k = 2.0
    aux = cem.compute_auxiliary(mesh, fld, k, 4)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 0)
    assert basis.blocks[0].is_global
    ops = assemble_operators(mesh, fld, None, k)
    u, f, g = exact_benchmark(k)
    b = assemble_load(mesh, None, f, g).values
    cp = cem.assemble_coarse(ops, basis, b)
    A, _, _ = system_oracle(2, fld.values, k, 1.0)
    T = basis.blocks[0].prolonged()
    V = T.conj()
    # B(T c, v_q) = (f, v_q) for each conjugated test function v_q
    G = np.array([[np.vdot(V[:, q], A @ T[:, p]) for p in range(4)] for q in range(4)])
    rhs = np.array([np.vdot(V[:, q], b) for q in range(4)])
    c = np.linalg.solve(G, rhs)
    assert np.linalg.norm(cp.u_ms - T @ c) <= 1e-10 * np.linalg.norm(T @ c)


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_manufactured_trial_span_recovery(seed):
    mesh = build_nested_mesh(3, 2)
    fld = random_field(mesh, seed, 0.2, 20.0)
    k = 2.0
    aux = cem.compute_auxiliary(mesh, fld, k, 2)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    ops = assemble_operators(mesh, fld, None, k)
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(basis.n_basis) + 1j * rng.standard_normal(basis.n_basis)
    u = basis.trial_matrix() @ c
    cp = cem.assemble_coarse(ops, basis, ops.system() @ u)
    assert np.linalg.norm(cp.coefficients - c) <= 1e-8 * np.linalg.norm(c)


def test_galerkin_orthogonality_homogeneous():
    mesh = build_nested_mesh(2, 4)
    fld = generate(ModelSpec(), mesh)
    k = 4.0
    aux = cem.compute_auxiliary(mesh, fld, k, 4)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    ops = assemble_operators(mesh, fld, None, k)
    _, f, g = exact_benchmark(k)
    b = assemble_load(mesh, None, f, g)
    uh = solve_fine(ops, b).u
    cp = cem.assemble_coarse(ops, basis, b)
    Psi = basis.trial_matrix()
    defect = cem.galerkin_defect(ops, Psi, uh - cp.u_ms)
    na = norm_a(ops, uh)
    for q in range(Psi.shape[1]):
        assert abs(defect[q]) <= 1e-6 * na * norm_a(ops, Psi[:, q].toarray().ravel())


def test_coarse_errors(het2):
    mesh, fld, k, aux = het2
    ops = assemble_operators(mesh, fld, None, k)
    basis = cem.build_multiscale_basis(mesh, fld, k, aux, 1)
    with pytest.raises(ValueError):
        cem.assemble_coarse(ops, basis, np.ones(5))
    twice = cem.MultiscaleBasis(mesh, 1, False, (basis.blocks[0], basis.blocks[0]))
    with pytest.raises(cem.CoarseSolveError, match="resolution value"):
        cem.assemble_coarse(ops, twice, np.ones(mesh.n_edges), aux, fld)


# ---------------------------------------------------------------------------
# diagnostics


def test_resolution_examples():
    mesh = build_nested_mesh(8, 2)
    aux = cem.compute_auxiliary(mesh, generate(ModelSpec(), mesh), 4.0, 4)
    rep = cem.resolution_check(4.0, 1 / 8, 1.0, aux.Lambda)
    assert rep.value == pytest.approx(0.5 / np.sqrt(aux.Lambda), rel=1e-14)
    assert rep.threshold == cem.RESOLUTION_THRESHOLD
    small = cem.resolution_check(1e-9, 1 / 8, 1.0, 1.0)
    assert small.value < 1e-9 and small.satisfied
    assert not cem.resolution_check(32.0, 0.25, 1e3, 1.0).satisfied
    assert not cem.resolution_check(32.0, 0.25, 1e3, 100.0).satisfied


def test_resolution_warns_but_returns():
    with pytest.warns(UserWarning, match="resolution"):
        rep = cem.resolution_check(32.0, 0.25, 1e3, 1.0, warn=True)
    assert not rep.satisfied
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        cem.resolution_check(0.1, 0.25, 1.0, 1.0, warn=True)


def test_decay_profile_saturation(het2):
    mesh, fld, k, aux = het2
    prof = cem.decay_profile(mesh, fld, k, mesh.H, aux, 2, 0, [2, 1])
    assert [m for m, _, _ in prof] == [1, 2]
    assert all(ea <= 1e-9 and es <= 1e-9 for _, ea, es in prof)


@pytest.mark.xfail(strict=True, reason="the patch problems are not coercive on the discrete gradients left "
                                        "outside the retained modes, so localization does not decay")
def test_decay_profile_decreases_at_high_contrast():
    mesh = build_nested_mesh(8, 2)
    spec = ModelSpec(kind=ModelKind.PERIODIC_RODS, inclusion_value=1e3)
    fld = generate(spec, mesh)
    k = 4.0
    aux = cem.compute_auxiliary(mesh, fld, k, 4)
    i = mesh.coarse_index(3, 3, 3)
    prof = cem.decay_profile(mesh, fld, k, mesh.H, aux, i, 0, [1, 2, 3])
    ea = [p[1] for p in prof]
    assert ea[0] > ea[1] > ea[2]

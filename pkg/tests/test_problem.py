import dataclasses

import numpy as np
import pytest

from pdecont.assembly import CoefficientSet, JacobianCoefficients, neumann_bc
from pdecont.library import make_problem, make_state
from pdecont.mesh import interp_node_to_tri, make_rect_mesh
from pdecont.problem import (ProblemDef, SparsityError, adjacency_pattern,
                             color_columns, fd_glam, fd_jacobian_u, jac_check,
                             jacobian, residual, solve_linearized)


def linear_problem(lam_coupled=True):
    """f = lam u: the Jacobian is exactly linear, FD and assembled must agree."""

    def coeff(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        return CoefficientSet.from_user(1, mesh.n_triangles, 1.0, 0.0,
                                        lam * ut, 0.0)

    def jac(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        return JacobianCoefficients.from_user(1, mesh.n_triangles, 1.0, lam, ut,
                                              0.0)

    return ProblemDef(name="linear", neq=1, coeff_fn=coeff, jac_fn=jac,
                      bc_fn=lambda mesh, u, lam: neumann_bc(1, 4))


# -- residual ---------------------------------------------------------------------

def test_residual_bratu_homogeneous():
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 9, 9)
    ustar = 0.35
    r = residual(problem, m, ustar * np.ones(m.n_points), ustar * np.exp(-ustar))
    assert np.abs(r).max() <= 1e-12


def test_residual_ac_trivial():
    problem, _ = make_problem("ac")
    m = make_rect_mesh(1.0, 0.9, 9, 9)
    for lam in (0.0, 1.0, 3.7):
        assert np.abs(residual(problem, m, np.zeros(m.n_points), lam)).max() == 0.0


def test_residual_chemotaxis_homogeneous():
    problem, _ = make_problem("chemtax")
    m = make_rect_mesh(0.5, 2.0, 6, 18)
    u = np.concatenate([np.ones(m.n_points), 0.5 * np.ones(m.n_points)])
    assert np.abs(residual(problem, m, u, 13.0)).max() <= 1e-12


# -- jacobian modes -----------------------------------------------------------------

def test_linear_problem_fd_is_exact():
    # for f = lam u the residual is linear in u, so the FD Jacobian carries no
    # truncation error: halving the step changes nothing beyond roundoff
    problem = linear_problem()
    m = make_rect_mesh(0.5, 0.5, 8, 8)
    u = 0.3 * m.points[:, 0] + 0.1
    import pdecont.problem as prob_mod
    Gu_a = fd_jacobian_u(problem, m, u, 0.7, check_sparsity=False)
    old = prob_mod.FD_STEP
    try:
        prob_mod.FD_STEP = old / 8.0
        Gu_b = fd_jacobian_u(problem, m, u, 0.7, check_sparsity=False)
    finally:
        prob_mod.FD_STEP = old
    assert abs(Gu_a - Gu_b).max() <= 1e-6 * abs(Gu_a).max()


def test_linear_problem_fd_vs_assembled_quadrature_gap():
    # assembled a-term uses the exact element mass with the coefficient at the
    # centroid; FD differentiates the centroid-quadrature load, so the two
    # differ by an O(h^2)-relative element pattern even for linear f
    problem = linear_problem()
    errs = []
    for npts in (8, 16):
        m = make_rect_mesh(0.5, 0.5, npts, npts)
        u = 0.3 * m.points[:, 0] + 0.1
        rep = jac_check(problem, m, u, 0.7)
        errs.append(rep.rel_error)
    assert errs[0] <= 5e-3
    assert errs[1] <= errs[0] / 2.0


def test_jsw0_and_jsw1_same_gu():
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 8, 8)
    u = 0.1 + 0.2 * np.sin(m.points[:, 0])
    Gu0, Glam0 = jacobian(problem, m, u, 0.2, jsw=0)
    Gu1, Glam1 = jacobian(problem, m, u, 0.2, jsw=1)
    assert abs(Gu0 - Gu1).max() == 0.0
    # assembled flam and FD Glam agree for the Bratu problem
    assert np.abs(Glam0 - Glam1).max() <= 1e-4 * np.abs(Glam0).max()


def test_jsw2_assembled_glam():
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 7, 7)
    u = 0.15 * np.ones(m.n_points)
    Gu2, Glam2 = jacobian(problem, m, u, 0.2, jsw=2)
    Gu3, Glam3 = jacobian(problem, m, u, 0.2, jsw=3)
    assert abs(Gu2 - Gu3).max() == 0.0
    assert np.abs(Glam2 - Glam3).max() <= 1e-4 * np.abs(Glam3).max()


def test_jacobian_requires_jac_fn():
    problem = dataclasses.replace(linear_problem(), jac_fn=None)
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    with pytest.raises(ValueError, match="no Jacobian"):
        jacobian(problem, m, np.zeros(m.n_points), 0.1, jsw=0)
    jacobian(problem, m, np.zeros(m.n_points), 0.1, jsw=3)  # FD path works


def test_bratu_jac_check_mesh_sequence():
    problem, _ = make_problem("bratu")
    errors = []
    for npts in (10, 20, 40):
        m = make_rect_mesh(0.5, 0.5, npts, npts)
        u = 0.1 + 0.3 * np.sin(2 * m.points[:, 0]) * np.cos(m.points[:, 1])
        errors.append(jac_check(problem, m, u, 0.2).rel_error)
    assert errors[0] <= 0.1
    assert errors[0] > errors[1] > errors[2]


def test_quasilinear_jacobian_matches_fd():
    problem, _ = make_problem("ac-ql")
    m = make_rect_mesh(1.0, 0.9, 40, 36)
    x, y = m.points.T
    u = 0.3 * np.sin(np.pi * (x + 1) / 2) * np.sin(np.pi * (y + 0.9) / 1.8)
    rep = jac_check(problem, m, u, 1.2)
    assert rep.rel_error <= 0.05


def test_directional_derivative_check():
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 10, 10)
    rng = np.random.default_rng(0)
    u = 0.2 + 0.1 * np.sin(3 * m.points[:, 0])
    # the direction is scaled up so the O(eps^2) truncation term dominates the
    # fixed FD-step floor of the jsw=3 Jacobian
    v = 20.0 * rng.standard_normal(m.n_points)
    Gu, _ = jacobian(problem, m, u, 0.2, jsw=3)
    errs = []
    for eps in (1e-3, 1e-4):
        d = (residual(problem, m, u + eps * v, 0.2)
             - residual(problem, m, u - eps * v, 0.2)) / (2 * eps)
        errs.append(np.abs(d - Gu @ v).max())
    assert errs[0] / errs[1] >= 3.0


def test_glam_fd():
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 6, 6)
    u = 0.2 * np.ones(m.n_points)
    g = fd_glam(problem, m, u, 0.2)
    # dG/dlam = -d/dlam F(10 lam e^u) = -load(10 e^u)
    from pdecont.assembly import assemble_load
    expect = -assemble_load(m, 10.0 * np.exp(0.2) * np.ones(m.n_triangles), 1)
    assert np.abs(g - expect).max() <= 1e-4 * np.abs(expect).max()


# -- sparsity ---------------------------------------------------------------------------

def test_adjacency_pattern_covers_assembled():
    problem, _ = make_problem("chemtax")
    m = make_rect_mesh(0.5, 2.0, 5, 14)
    u = np.concatenate([np.ones(m.n_points), 0.5 * np.ones(m.n_points)])
    Gu, _ = jacobian(problem, m, u, 13.0, jsw=1)
    S = adjacency_pattern(m, 2)
    outside = Gu.copy()
    outside.data = np.abs(outside.data)
    mask = S.copy()
    mask.data[:] = 1.0
    stray = (outside - outside.multiply(mask)).max()
    assert stray <= 1e-12


def test_coloring_groups_are_conflict_free():
    m = make_rect_mesh(0.5, 0.5, 7, 7)
    S = adjacency_pattern(m, 2).tocsc()
    groups = color_columns(m, 2)
    all_cols = np.concatenate(groups)
    assert sorted(all_cols) == list(range(2 * m.n_points))
    for g in groups:
        rows = [frozenset(S.indices[S.indptr[j]:S.indptr[j + 1]]) for j in g]
        for i in range(len(rows)):
            for j in range(i + 1, len(rows)):
                assert not (rows[i] & rows[j])


def test_global_coupling_violates_sparsity():
    state, problem = make_state("ac-gc")
    with pytest.raises(SparsityError):
        fd_jacobian_u(problem, state.mesh, state.u, 0.5, check_sparsity=True)


# -- linearized solve dispatch ------------------------------------------------------------

def test_solve_linearized_plain():
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 6, 6)
    u = 0.2 * np.ones(m.n_points)
    Gu, _ = jacobian(problem, m, u, 0.1, jsw=0)
    rhs = np.sin(np.arange(m.n_points))
    from pdecont.linalg import solve
    assert np.array_equal(solve_linearized(problem, m, Gu, rhs, 0.1),
                          solve(Gu, rhs))


def test_solve_linearized_coupling_lam_zero():
    state, problem = make_state("ac-gc")
    m = state.mesh
    Gu, _ = jacobian(problem, m, state.u, 0.0, jsw=0)
    rhs = np.ones(state.n)
    from pdecont.linalg import solve
    assert np.allclose(solve_linearized(problem, m, Gu, rhs, 0.0), solve(Gu, rhs))


def test_assembled_faster_than_fd_at_scale():
    import time
    problem, _ = make_problem("bratu")
    m = make_rect_mesh(0.5, 0.5, 41, 41)  # n_p = 1681 >= 1600
    u = 0.1 + 0.2 * np.sin(m.points[:, 0])
    from pdecont.problem import assembled_jacobian_u
    t0 = time.perf_counter()
    for _ in range(3):
        assembled_jacobian_u(problem, m, u, 0.2)
    t1 = time.perf_counter()
    for _ in range(3):
        fd_jacobian_u(problem, m, u, 0.2, check_sparsity=False)
    t2 = time.perf_counter()
    assert (t2 - t1) >= 5.0 * (t1 - t0)

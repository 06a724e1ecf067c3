import dataclasses
import math

import numpy as np
import pytest

from pdecont.engine import ContinuationState, cont, corrector_natural, swibra
from pdecont.library import (REGISTRY, SCHNAK_KC, UnsupportedMeshError,
                             ac_bifurcation_lams, chemotaxis_bifurcation_lams,
                             dominant_x_wavenumber, get_preset, make_problem,
                             make_state, plateau_guess, schnak_turing_lambda)
from pdecont.mesh import gradients, make_rect_mesh
from pdecont.problem import jac_check, residual


def test_registry_names():
    assert set(REGISTRY) == {"bratu", "ac", "ac-mu", "ac-ql", "ac-gc",
                             "chemtax", "schnak"}


def test_unknown_problem_rejected():
    with pytest.raises(KeyError, match="unknown problem"):
        get_preset("nope")


# -- trivial/homogeneous branches -------------------------------------------------------

def test_trivial_branches_zero_residual():
    cases = {
        "bratu": lambda m, p, lam: None,  # handled separately (root depends on lam)
        "ac": lambda m, p, lam: np.zeros(m.n_points),
        "ac-ql": lambda m, p, lam: np.zeros(m.n_points),
        "chemtax": lambda m, p, lam: np.concatenate(
            [np.ones(m.n_points), 0.5 * np.ones(m.n_points)]),
        "schnak": lambda m, p, lam: np.concatenate(
            [lam * np.ones(m.n_points), (1.0 / lam) * np.ones(m.n_points)]),
    }
    lam_ranges = {"ac": (0.5, 2.0, 3.9), "ac-ql": (0.5, 2.0, 3.9),
                  "chemtax": (11.0, 13.0, 14.5), "schnak": (2.6, 3.0, 3.5)}
    for name, make_u in cases.items():
        if name == "bratu":
            continue
        state, problem = make_state(name)
        for lam in lam_ranges[name]:
            u = make_u(state.mesh, None, lam)
            r = residual(problem, state.mesh, u, lam)
            assert np.abs(r).max() <= 1e-10, name


def test_bratu_homogeneous_residual():
    state, problem = make_state("bratu")
    for u0 in (0.3, 1.0, 2.5):
        lam = u0 * math.exp(-u0)
        r = residual(problem, state.mesh, u0 * np.ones(state.n), lam)
        assert np.abs(r).max() <= 1e-10


# -- reference formulas -------------------------------------------------------------------

def test_ac_bifurcation_formula():
    lams = ac_bifurcation_lams(0.25, 1.0, 0.9, [(1, 1), (2, 1), (1, 2)])
    assert lams == pytest.approx([1.3784, 3.2289, 3.6630], abs=2e-4)


def test_chemotaxis_bifurcation_formula():
    lams = chemotaxis_bifurcation_lams(0.25, 1.52, 1.0, 4.0,
                                       [(0, 2), (0, 3), (0, 1), (1, 0)])
    assert lams[0] == pytest.approx(12.01, abs=0.005)
    assert lams[1] == pytest.approx(13.73, abs=0.005)
    assert lams[2] == pytest.approx(17.55, abs=0.01)
    assert lams[3] == pytest.approx(17.57, abs=0.01)


def test_schnak_turing_constants():
    assert SCHNAK_KC == pytest.approx(0.63, abs=0.015)
    assert schnak_turing_lambda(60.0) == pytest.approx(3.2, abs=0.01)


def test_bratu_references():
    refs = get_preset("bratu").references
    assert refs["fold_lam"] == pytest.approx(0.3679, abs=1e-4)
    uk = 1 + 2 * np.pi ** 2 / 10
    assert uk * math.exp(-uk) == pytest.approx(refs["simple_lam"], abs=3e-4)
    ud = 1 + np.pi ** 2 / 10
    assert ud * math.exp(-ud) == pytest.approx(refs["double_lam"], abs=3e-4)


# -- jac_check across presets ---------------------------------------------------------------

def _representative_state(name):
    state, problem = make_state(name)
    x, y = state.mesh.points.T
    n_p = state.mesh.n_points
    u = state.u.copy()
    lam = state.lam
    bump = 0.1 * np.cos(np.pi * x / (x.max() - x.min()) * 2) \
        * np.cos(np.pi * y / (y.max() - y.min()))
    if problem.neq == 1:
        u = u + bump
    else:
        u[:n_p] += bump
        u[n_p:] += 0.05 * bump
    if name == "ac":
        lam = 1.2
    if name == "ac-ql":
        lam = 1.2
    if name == "ac-gc":
        lam = 0.0  # coupling vanishes: local Jacobian is exact
    return problem, state.mesh, u, lam


@pytest.mark.parametrize("name", ["bratu", "ac", "ac-mu", "ac-ql", "ac-gc",
                                  "chemtax", "schnak"])
def test_jac_check_all_presets(name):
    problem, mesh, u, lam = _representative_state(name)
    rep = jac_check(problem, mesh, u, lam)
    assert rep.rel_error <= 0.1


# -- convergence-order studies ----------------------------------------------------------------

def test_bratu_detection_convergence_order():
    uk = 1 + 2 * np.pi ** 2 / 10
    lam_exact = uk * np.exp(-uk)
    errs = []
    for npts in (11, 21, 41):
        mesh = make_rect_mesh(0.5, 0.5, npts, npts)
        state, problem = make_state(
            "bratu", mesh=mesh,
            settings=dict(nsteps=25, dlammax=0.02, dsmax=0.02, bisecmax=14,
                          lammin=0.12))
        u0 = 2.7
        state.u = u0 * np.ones(state.n)
        state.lam = u0 * np.exp(-u0)
        state.ds = -0.02
        cont(state, problem)
        assert state.bifpoints
        errs.append(abs(state.bifpoints[0].lam - lam_exact) / lam_exact)
    h = np.array([1.0 / (n - 1) for n in (11, 21, 41)])
    order = np.polyfit(np.log(h), np.log(errs), 1)[0]
    assert order >= 1.5


def test_ac_detection_convergence_order():
    # qs = 1e4 keeps the Robin boundary offset below the h^2 term
    lam11 = ac_bifurcation_lams(0.25, 1.0, 0.9, [(1, 1)])[0]
    errs = []
    dims = ((21, 19), (29, 27), (41, 37))
    for nx, ny in dims:
        mesh = make_rect_mesh(1.0, 0.9, nx, ny)
        state, problem = make_state(
            "ac", params=dict(qs=1e4), mesh=mesh,
            settings=dict(nsteps=14, dlammax=0.06, dsmax=0.1, bisecmax=14,
                          lammax=1.6))
        state.lam = 1.1
        cont(state, problem)
        assert state.bifpoints
        errs.append(abs(state.bifpoints[0].lam - lam11) / lam11)
    h = np.array([1.0 / (nx - 1) for nx, _ in dims])
    order = np.polyfit(np.log(h), np.log(errs), 1)[0]
    assert order >= 1.5


# -- ac-mu -----------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def ac_branch_point(ac_short_run):
    state, problem = ac_short_run
    q = swibra(state.bifpoints[0], state, ds=0.08)
    q.settings.nsteps = 10
    cont(q, problem)
    return q, problem


def _mu_state(q, settings_overrides, probparams):
    problem, params = make_problem("ac-mu", probparams)
    kwargs = dict(jsw=1, parasw=0, bifchecksw=0, spcalcsw=0, dsmax=0.05,
                  dlammax=1e6, lammin=0.05)
    kwargs.update(settings_overrides)
    settings = dataclasses.replace(q.settings, **kwargs)
    state = ContinuationState(mesh=q.mesh, u=q.u.copy(), lam=0.25,
                              settings=settings, ds=-0.01, xi=1e-6,
                              problem_name="ac-mu", problem_params=params)
    return state, problem


def test_ac_mu_branch_start_residual(ac_branch_point):
    q, _ = ac_branch_point
    problem, _ = make_problem("ac-mu", dict(up1=q.lam))
    r = residual(problem, q.mesh, q.u, 0.25)
    assert np.abs(r).max() <= 1e-8  # same equation at mu = 0.25


def test_ac_mu_interfaces_sharpen(ac_branch_point):
    q, _ = ac_branch_point
    state, problem = _mu_state(q, dict(nsteps=10), dict(up1=q.lam))
    cont(state, problem)
    assert state.lam < 0.15
    g0 = np.hypot(*gradients(q.mesh, q.u)).max()
    g1 = np.hypot(*gradients(state.mesh, state.u)).max()
    assert g1 > g0


def test_ac_mu_jsw1_vs_jsw3(ac_branch_point):
    q, _ = ac_branch_point
    seqs = {}
    for jsw in (1, 3):
        state, problem = _mu_state(q, dict(nsteps=5, jsw=jsw), dict(up1=q.lam))
        cont(state, problem)
        seqs[jsw] = np.array([r.lam for r in state.branch])
    assert np.abs(seqs[1] - seqs[3]).max() <= 1e-4


# -- ac-ql ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def acql_run():
    state, problem = make_state("ac-ql", settings=dict(nsteps=14, lammax=1.6))
    cont(state, problem)
    return state, problem


def test_acql_bifurcation_matches_ac(acql_run, ac_short_run):
    acql_state, _ = acql_run
    ac_state, _ = ac_short_run
    # c(0) = 0.25: bifurcations from the trivial branch coincide with ac
    assert acql_state.bifpoints[0].lam == pytest.approx(
        ac_state.bifpoints[0].lam, abs=1e-6)


def test_acql_first_bifurcation_transcritical(acql_run, ac_short_run):
    acql_state, _ = acql_run
    ac_state, _ = ac_short_run
    # the quadratic coefficient is orders of magnitude larger than for the
    # symmetric equation, tilting the pitchfork into a transcritical point
    assert abs(acql_state.bifpoints[0].a1) > 100 * abs(ac_state.bifpoints[0].a1)


def test_acql_symmetry_broken(acql_run):
    state, problem = acql_run
    bif = state.bifpoints[0]
    halves = []
    for ds in (0.08, -0.08):
        q = swibra(bif, state, ds=ds)
        q.settings.nsteps = 4
        cont(q, problem)
        halves.append(q.u)
    l2 = np.sqrt(np.mean((halves[0] + halves[1]) ** 2))
    assert l2 > 1e-2


# -- ac-gc ------------------------------------------------------------------------------------

def test_acgc_decoupled_plateau():
    state, problem = make_state("ac-gc")
    res = corrector_natural(problem, state.mesh, state.settings,
                            plateau_guess(state.mesh, 1.3), 0.0, None, 0.0,
                            state.xi, tol=1e-11, imax=20)
    assert res.converged
    # the interior plateau sits at the positive zero of u + u^3 - u^5,
    # i.e. u^2 = (1 + sqrt(5)) / 2
    assert res.u.max() ** 2 == pytest.approx((1 + math.sqrt(5)) / 2, rel=1e-3)


def test_acgc_positive_feedback_raises_plateau():
    state, problem = make_state("ac-gc")
    res = corrector_natural(problem, state.mesh, state.settings,
                            plateau_guess(state.mesh, 1.9), 1.0, None, 0.0,
                            state.xi, tol=1e-11, imax=20)
    assert res.converged
    assert res.u.max() > 1.75
    assert res.u.max() == pytest.approx(1.93, rel=0.03)


def test_acgc_sign_symmetry():
    state, problem = make_state("ac-gc")
    res = corrector_natural(problem, state.mesh, state.settings,
                            plateau_guess(state.mesh, 1.9), 1.0, None, 0.0,
                            state.xi, tol=1e-11, imax=20)
    r = residual(problem, state.mesh, -res.u, 1.0)
    assert np.abs(r).max() <= 1e-9  # (u, lam) -> (-u, lam) maps branch to branch


# -- chemotaxis -------------------------------------------------------------------------------

def test_chemtax_jsw_modes_agree(chem_run):
    state3, problem = chem_run
    lam3 = state3.bifpoints[0].lam
    state1, problem1 = make_state("chemtax",
                                  settings=dict(jsw=1, lammax=12.7, nsteps=20))
    cont(state1, problem1)
    lam1 = state1.bifpoints[0].lam
    assert abs(lam1 - lam3) / lam3 <= 0.02


def test_chemtax_out_fn_l1_norm():
    state, problem = make_state("chemtax")
    out = problem.out_fn(state.mesh, state.u, 12.0)
    assert out[0] == pytest.approx(1.0)   # max |u1| on the trivial branch
    assert out[1] == pytest.approx(0.0, abs=1e-14)  # |u1 - 1| vanishes


# -- Fourier diagnostic -----------------------------------------------------------------------

def test_dominant_wavenumber_cosine():
    lx = 2 * math.pi / SCHNAK_KC
    m = make_rect_mesh(lx, 1.0, 49, 5)
    u = np.cos(SCHNAK_KC * m.points[:, 0])
    k = dominant_x_wavenumber(m, u)
    assert k == pytest.approx(SCHNAK_KC, rel=1e-6)


def test_dominant_wavenumber_unstructured_rejected():
    from pdecont.mesh import Mesh
    m = make_rect_mesh(1.0, 1.0, 8, 8)
    rng = np.random.default_rng(0)
    pts = m.points.copy()
    interior = (np.abs(pts[:, 0]) < 1 - 1e-9) & (np.abs(pts[:, 1]) < 1 - 1e-9)
    pts[interior] += 0.03 * rng.standard_normal((interior.sum(), 2))
    m2 = Mesh(pts, m.edges, m.triangles, m.segment_count)
    with pytest.raises(UnsupportedMeshError, match="unsupported"):
        dominant_x_wavenumber(m2, np.cos(m2.points[:, 0]))

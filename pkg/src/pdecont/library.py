"""Built-in problem presets with their analytic reference values.

Registry names: bratu, ac, ac-mu, ac-ql, ac-gc, chemtax, schnak.  Each preset
bundles a ProblemDef factory, a default mesh, default continuation settings,
and a starting point, so `make_state("bratu")` is enough for a full run.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .assembly import CoefficientSet, JacobianCoefficients, neumann_bc, \
    stiff_spring_dirichlet
from .engine import ContinuationSettings, ContinuationState
from .linalg import RankOneCoupling
from .mesh import Mesh, interp_node_to_tri, interp_tri_to_node, gradients, \
    make_rect_mesh, triint
from .problem import ProblemDef


class UnsupportedMeshError(RuntimeError):
    """The operation requires a structured rectangular mesh."""


@dataclass
class ProblemPreset:
    name: str
    factory: Callable[[dict], ProblemDef]
    default_params: dict
    make_mesh: Callable[[dict], Mesh]
    settings: dict
    start: Callable[[Mesh, dict], tuple]
    references: dict = field(default_factory=dict)


REGISTRY: dict[str, ProblemPreset] = {}


def register(preset):
    REGISTRY[preset.name] = preset
    return preset


def get_preset(name):
    try:
        return REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown problem {name!r}; available: "
                       f"{sorted(REGISTRY)}") from None


def make_problem(name, params=None):
    preset = get_preset(name)
    p = dict(preset.default_params)
    p.update(params or {})
    return preset.factory(p), p


def make_state(name, params=None, mesh=None, settings=None):
    """Build (state, problem) from a preset; settings is an override dict."""
    preset = get_preset(name)
    problem, p = make_problem(name, params)
    mesh = mesh if mesh is not None else preset.make_mesh(p)
    merged = dict(preset.settings)
    merged.update(settings or {})
    xi = merged.pop("xi", None)
    cs = ContinuationSettings(**merged)
    u0, lam0, ds0 = preset.start(mesh, p)
    state = ContinuationState(mesh=mesh, u=u0, lam=lam0, settings=cs, ds=ds0,
                              xi=xi, problem_name=name, problem_params=p)
    return state, problem


# -- Bratu --------------------------------------------------------------------------

def bratu(params=None):
    """-Lap u - f(u, lam) = 0 with f = -10 (u - lam e^u), zero-flux boundary."""

    def coeff(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        f = -10.0 * (ut - lam * np.exp(ut))
        return CoefficientSet.from_user(1, mesh.n_triangles, 1.0, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        fu = -10.0 * (1.0 - lam * np.exp(ut))
        flam = 10.0 * np.exp(ut)
        return JacobianCoefficients.from_user(1, mesh.n_triangles, 1.0, fu, flam, 0.0)

    return ProblemDef(name="bratu", neq=1, coeff_fn=coeff, jac_fn=jac,
                      bc_fn=lambda mesh, u, lam: neumann_bc(1, mesh.segment_count),
                      params=dict(params or {}))


register(ProblemPreset(
    name="bratu",
    factory=lambda p: bratu(p),
    default_params={},
    make_mesh=lambda p: make_rect_mesh(0.5, 0.5, 21, 21),
    settings=dict(dlammax=0.02, lammin=0.02, dsmax=0.1, nsteps=45, jsw=0),
    start=lambda mesh, p: (0.1 * np.ones(mesh.n_points), 0.2, 0.05),
    references=dict(fold_lam=1.0 / math.e, simple_lam=0.1520, double_lam=0.2724),
))


# -- cubic-quintic Allen-Cahn --------------------------------------------------------

def ac_bifurcation_lams(mu, lx, ly, modes):
    """Dirichlet values mu pi^2 ((k / (2 lx))^2 + (l / (2 ly))^2)."""
    return [mu * math.pi ** 2 * ((k / (2 * lx)) ** 2 + (l / (2 * ly)) ** 2)
            for k, l in modes]


def allen_cahn(params=None):
    """-mu Lap u - lam u - u^3 + u^5 = 0, stiff-spring Dirichlet boundary."""
    p = dict(params or {})
    mu = p.get("mu", 0.25)
    qs = p.get("qs", 1e3)

    def coeff(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        f = lam * ut + ut ** 3 - ut ** 5
        return CoefficientSet.from_user(1, mesh.n_triangles, mu, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        fu = lam + 3.0 * ut ** 2 - 5.0 * ut ** 4
        return JacobianCoefficients.from_user(1, mesh.n_triangles, mu, fu, ut, 0.0)

    return ProblemDef(
        name="ac", neq=1, coeff_fn=coeff, jac_fn=jac,
        bc_fn=lambda mesh, u, lam: stiff_spring_dirichlet(1, mesh.segment_count, qs),
        params=p)


register(ProblemPreset(
    name="ac",
    factory=lambda p: allen_cahn(p),
    default_params=dict(mu=0.25, lx=1.0, ly=0.9, qs=1e3),
    make_mesh=lambda p: make_rect_mesh(p["lx"], p["ly"], 41, 37),
    settings=dict(dlammax=0.08, dsmax=0.15, lammin=0.0, lammax=4.0, nsteps=60,
                  jsw=0),
    start=lambda mesh, p: (np.zeros(mesh.n_points), 0.8, 0.05),
    references=dict(lams=ac_bifurcation_lams(0.25, 1.0, 0.9,
                                             [(1, 1), (2, 1), (1, 2)])),
))


def allen_cahn_mu_continuation(params=None):
    """Continuation in the diffusion constant: c = lam, frozen lam passed as up1.

    flam is not available analytically (G_lam = -Lap u); run with jsw = 1.
    """
    p = dict(params or {})
    up1 = p.get("up1", 1.0)
    qs = p.get("qs", 1e3)

    def coeff(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        f = up1 * ut + ut ** 3 - ut ** 5
        return CoefficientSet.from_user(1, mesh.n_triangles, lam, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        fu = up1 + 3.0 * ut ** 2 - 5.0 * ut ** 4
        return JacobianCoefficients.from_user(1, mesh.n_triangles, lam, fu, 0.0, 0.0)

    return ProblemDef(
        name="ac-mu", neq=1, coeff_fn=coeff, jac_fn=jac,
        bc_fn=lambda mesh, u, lam: stiff_spring_dirichlet(1, mesh.segment_count, qs),
        params=p)


register(ProblemPreset(
    name="ac-mu",
    factory=lambda p: allen_cahn_mu_continuation(p),
    default_params=dict(up1=1.0, qs=1e3),
    make_mesh=lambda p: make_rect_mesh(1.0, 0.9, 41, 37),
    settings=dict(jsw=1, parasw=0, xi=1e-6, dsmax=0.05, nsteps=20),
    start=lambda mesh, p: (np.zeros(mesh.n_points), 0.25, -0.01),
))


def allen_cahn_quasilinear(params=None):
    """-div[(0.25 + delta u + gamma u^2) grad u] - (lam u + u^3 - u^5) = 0."""
    p = dict(params or {})
    delta = p.get("delta", -0.2)
    gamma = p.get("gamma", 0.05)
    qs = p.get("qs", 1e3)

    def coeff(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        c = 0.25 + delta * ut + gamma * ut ** 2
        f = lam * ut + ut ** 3 - ut ** 5
        return CoefficientSet.from_user(1, mesh.n_triangles, c, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        n_t = mesh.n_triangles
        ut = interp_node_to_tri(mesh, u)[0]
        ux, uy = gradients(mesh, u)
        ux, uy = ux[0], uy[0]
        uxx = gradients(mesh, interp_tri_to_node(mesh, ux))[0][0]
        uyy = gradients(mesh, interp_tri_to_node(mesh, uy))[1][0]
        lap = uxx + uyy
        c = 0.25 + delta * ut + gamma * ut ** 2
        fu = (lam + 3.0 * ut ** 2 - 5.0 * ut ** 4
              + delta * lap + 2.0 * gamma * (ux ** 2 + uy ** 2 + ut * lap))
        b = np.vstack([(delta + 2.0 * gamma * ut) * ux,
                       (delta + 2.0 * gamma * ut) * uy])
        return JacobianCoefficients.from_user(1, n_t, c, fu, ut, b)

    return ProblemDef(
        name="ac-ql", neq=1, coeff_fn=coeff, jac_fn=jac,
        bc_fn=lambda mesh, u, lam: stiff_spring_dirichlet(1, mesh.segment_count, qs),
        params=p)


register(ProblemPreset(
    name="ac-ql",
    factory=lambda p: allen_cahn_quasilinear(p),
    default_params=dict(delta=-0.2, gamma=0.05, qs=1e3),
    make_mesh=lambda p: make_rect_mesh(1.0, 0.9, 41, 37),
    settings=dict(dlammax=0.08, dsmax=0.15, lammin=0.0, lammax=4.0, nsteps=60,
                  jsw=1),
    start=lambda mesh, p: (np.zeros(mesh.n_points), 0.8, 0.05),
    references=dict(lams=ac_bifurcation_lams(0.25, 1.0, 0.9,
                                             [(1, 1), (2, 1), (1, 2)])),
))


def integration_row(mesh):
    """Vector eta with eta . u = triint(u) (also the weak form of 1)."""
    from .assembly import assemble_load
    return assemble_load(mesh, 1.0, 1)


def allen_cahn_global(params=None):
    """-0.1 Lap u - u - u^3 + u^5 - lam <u> = 0 with <u> the domain integral.

    The global term enters f directly; Jacobian coefficients ignore it and the
    rank-one coupling (K - lam nu eta^T) corrects the linear solves.
    """
    p = dict(params or {})
    qs = p.get("qs", 1e3)

    def coeff(mesh, u, lam):
        um = triint(mesh, u)
        ut = interp_node_to_tri(mesh, u)[0]
        f = ut + ut ** 3 - ut ** 5 + lam * um
        return CoefficientSet.from_user(1, mesh.n_triangles, 0.1, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        ut = interp_node_to_tri(mesh, u)[0]
        fu = 1.0 + 3.0 * ut ** 2 - 5.0 * ut ** 4
        return JacobianCoefficients.from_user(1, mesh.n_triangles, 0.1, fu,
                                              triint(mesh, u), 0.0)

    def coupling(mesh):
        row = integration_row(mesh)
        return RankOneCoupling(nu=row, eta=row.copy(), scale=1.0)

    return ProblemDef(
        name="ac-gc", neq=1, coeff_fn=coeff, jac_fn=jac,
        bc_fn=lambda mesh, u, lam: stiff_spring_dirichlet(1, mesh.segment_count, qs),
        coupling_fn=coupling, params=p)


def plateau_guess(mesh, amplitude=1.3, width=0.1):
    """tanh profile rising from the boundary to a flat interior plateau."""
    x, y = mesh.points.T
    dist = np.minimum(np.minimum(x - x.min(), x.max() - x),
                      np.minimum(y - y.min(), y.max() - y))
    return amplitude * np.tanh(np.clip(dist, 0.0, None) / width)


register(ProblemPreset(
    name="ac-gc",
    factory=lambda p: allen_cahn_global(p),
    default_params=dict(qs=1e3),
    make_mesh=lambda p: make_rect_mesh(math.pi / 2, math.pi / 2, 61, 61),
    settings=dict(spcalcsw=0, bifchecksw=0, jsw=0, dsmax=0.1, dlammax=0.05,
                  nsteps=20),
    start=lambda mesh, p: (plateau_guess(mesh), 0.0, 0.05),
    references=dict(plateau_zero=math.sqrt((1 + math.sqrt(5)) / 2)),
))


# -- chemotaxis ----------------------------------------------------------------------

def chemotaxis_bifurcation_lams(D, r, Lx, Ly, modes):
    """lam_ml = 4 (D k^2 + r)(k^2 + 1) / k^2 with k^2 = pi^2 (m^2/Lx^2 + l^2/Ly^2)."""
    out = []
    for m, l in modes:
        k2 = math.pi ** 2 * (m ** 2 / Lx ** 2 + l ** 2 / Ly ** 2)
        out.append(4.0 * (D * k2 + r) * (k2 + 1.0) / k2)
    return out


def chemotaxis(params=None):
    """Quasilinear cross-diffusion system: u1 cells, u2 chemoattractant."""
    p = dict(params or {})
    D = p.get("D", 0.25)
    r = p.get("r", 1.52)

    def coeff(mesh, u, lam):
        n_t = mesh.n_triangles
        ut = interp_node_to_tri(mesh, u)
        u1, u2 = ut
        sigma = np.empty((2, 2, n_t))
        sigma[0, 0] = D
        sigma[0, 1] = -lam * u1
        sigma[1, 0] = 0.0
        sigma[1, 1] = 1.0
        f = np.vstack([r * u1 * (1.0 - u1), u1 / (1.0 + u1) - u2])
        return CoefficientSet.from_user(2, n_t, sigma, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        n_t = mesh.n_triangles
        ut = interp_node_to_tri(mesh, u)
        u1 = ut[0]
        ux, uy = gradients(mesh, u)
        u2x, u2y = ux[1], uy[1]
        u2xx = gradients(mesh, interp_tri_to_node(mesh, u2x))[0][0]
        u2yy = gradients(mesh, interp_tri_to_node(mesh, u2y))[1][0]
        lap2 = u2xx + u2yy
        sigma = np.empty((2, 2, n_t))
        sigma[0, 0] = D
        sigma[0, 1] = -lam * u1
        sigma[1, 0] = 0.0
        sigma[1, 1] = 1.0
        fu = np.zeros((4, n_t))  # rows [fu11; fu21; fu12; fu22]
        fu[0] = r * (1.0 - 2.0 * u1) - lam * lap2
        fu[1] = (1.0 + u1) ** -2
        fu[2] = 0.0
        fu[3] = -1.0
        b = np.zeros((8, n_t))
        b[0] = -lam * u2x  # b_111
        b[1] = -lam * u2y  # b_112
        return JacobianCoefficients.from_user(2, n_t, sigma, fu, 0.0, b)

    def out_fn(mesh, u, lam):
        n_p = mesh.n_points
        u1 = np.asarray(u)[:n_p]
        area = float(mesh.areas.sum())
        l1 = triint(mesh, np.abs(u1 - 1.0)) / area
        return np.array([float(np.abs(u1).max()), float(l1)])

    return ProblemDef(
        name="chemtax", neq=2, coeff_fn=coeff, jac_fn=jac,
        bc_fn=lambda mesh, u, lam: neumann_bc(2, mesh.segment_count),
        out_fn=out_fn, params=p)


def _chem_start(mesh, p):
    n_p = mesh.n_points
    return np.concatenate([np.ones(n_p), 0.5 * np.ones(n_p)]), 11.0, 0.1


register(ProblemPreset(
    name="chemtax",
    factory=lambda p: chemotaxis(p),
    default_params=dict(D=0.25, r=1.52, lx=0.5, ly=2.0),
    make_mesh=lambda p: make_rect_mesh(p["lx"], p["ly"], 18, 70),
    settings=dict(jsw=3, dlammax=0.25, dsmax=0.3, lammax=14.5, nsteps=40),
    start=_chem_start,
    references=dict(lams=chemotaxis_bifurcation_lams(
        0.25, 1.52, 1.0, 4.0, [(0, 2), (0, 3), (0, 1)])),
))


# -- Schnakenberg ---------------------------------------------------------------------

SCHNAK_KC = math.sqrt(math.sqrt(2.0) - 1.0)


def schnak_turing_lambda(d):
    """Exact Turing onset for diag(1, d) diffusion: lam_c = sqrt(d) (sqrt 2 - 1)."""
    return math.sqrt(d) * (math.sqrt(2.0) - 1.0)


def schnakenberg(params=None):
    """Stationary Schnakenberg system with diagonal diffusion diag(1, d)."""
    p = dict(params or {})
    d = p.get("d", 60.0)

    def coeff(mesh, u, lam):
        n_t = mesh.n_triangles
        ut = interp_node_to_tri(mesh, u)
        u1, u2 = ut
        f = np.vstack([-u1 + u1 ** 2 * u2, lam - u1 ** 2 * u2])
        sigma = np.array([[1.0, 0.0], [0.0, d]])
        return CoefficientSet.from_user(2, n_t, sigma, 0.0, f, 0.0)

    def jac(mesh, u, lam):
        n_t = mesh.n_triangles
        ut = interp_node_to_tri(mesh, u)
        u1, u2 = ut
        fu = np.zeros((4, n_t))  # rows [fu11; fu21; fu12; fu22]
        fu[0] = -1.0 + 2.0 * u1 * u2
        fu[1] = -2.0 * u1 * u2
        fu[2] = u1 ** 2
        fu[3] = -u1 ** 2
        sigma = np.array([[1.0, 0.0], [0.0, d]])
        return JacobianCoefficients.from_user(2, n_t, sigma, fu,
                                              np.array([0.0, 1.0]), 0.0)

    return ProblemDef(
        name="schnak", neq=2, coeff_fn=coeff, jac_fn=jac,
        bc_fn=lambda mesh, u, lam: neumann_bc(2, mesh.segment_count),
        params=p)


def schnak_domain(p):
    m, n = p.get("m", 1), p.get("n", 1)
    delta = p.get("delta", 0.97)
    lx = 2.0 * m * math.pi / SCHNAK_KC
    ly = 2.0 * n * delta * math.pi / (math.sqrt(3.0) * SCHNAK_KC)
    return lx, ly


def _schnak_mesh(p):
    lx, ly = schnak_domain(p)
    nx = int(p.get("nx", 49))
    ny = max(9, int(round(nx * ly / lx)) | 1)
    return make_rect_mesh(lx, ly, nx, ny)


def _schnak_start(mesh, p):
    lam0 = p.get("lam0", 3.5)
    n_p = mesh.n_points
    u = np.concatenate([lam0 * np.ones(n_p), (1.0 / lam0) * np.ones(n_p)])
    return u, lam0, -0.1


register(ProblemPreset(
    name="schnak",
    factory=lambda p: schnakenberg(p),
    default_params=dict(d=60.0, m=1, n=1, delta=0.97, nx=49, lam0=3.5),
    make_mesh=_schnak_mesh,
    settings=dict(jsw=0, dlammax=0.15, dsmax=0.25, lammin=2.5, nsteps=30),
    start=_schnak_start,
    references=dict(lam_c=schnak_turing_lambda(60.0), k_c=SCHNAK_KC),
))


# -- Fourier diagnostic ----------------------------------------------------------------

def dominant_x_wavenumber(mesh, field, component=0, tol=1e-9):
    """Dominant wavenumber of (field - mean) along the horizontal midline.

    Only structured rectangular meshes (uniform grid rows) are supported; the
    duplicated right-edge sample is dropped so a Neumann cosine mode lands on
    an exact FFT bin.
    """
    n_p = mesh.n_points
    vals = np.asarray(field, dtype=float).ravel()
    if vals.size % n_p:
        raise ValueError("field length incompatible with the mesh")
    vals = vals.reshape(-1, n_p)[component]
    x, y = mesh.points.T
    ys = np.unique(y)
    row_y = ys[len(ys) // 2]
    sel = np.nonzero(np.abs(y - row_y) < tol)[0]
    if sel.size < 4:
        raise UnsupportedMeshError("unsupported: no full grid row found")
    order = np.argsort(x[sel])
    xs = x[sel][order]
    dx = np.diff(xs)
    if dx.size == 0 or np.abs(dx - dx[0]).max() > 1e-8 * abs(dx[0]):
        raise UnsupportedMeshError("unsupported: midline spacing is not uniform")
    row = vals[sel][order][:-1]
    width = xs[-1] - xs[0]
    w = row - row.mean()
    spec = np.abs(np.fft.rfft(w))
    if spec.size < 2 or spec[1:].max() == 0.0:
        return 0.0
    bin_ = 1 + int(np.argmax(spec[1:]))
    return 2.0 * math.pi * bin_ / width

"""Continuation core: predictor/corrector stepping, tangents, stepsize control,
bifurcation detection and localization, branch switching, multi-predictor
continuation, and semi-implicit time stepping.

The extended system couples the PDE residual G(u, lam) with the arclength
constraint p(u, lam, s) = xi <udot0, u-u0> + (1-xi) lamdot0 (lam-lam0) - ds,
solved by Newton on the bordered matrix

    A = [[G_u, G_lam], [xi udot0, (1-xi) lamdot0]].

Determinant signs for bifurcation detection always evaluate A with xi = 1/2,
independent of the continuation weight.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

from . import linalg
from .assembly import CoefficientSet, assemble_mass, assemble_system
from .linalg import (BorderedSystem, DegenerateSpectrumError, SingularSystemError,
                     SpectralData, det_sign, eigs_near_zero, solve_bordered)
from .mesh import Mesh, adapt, error_indicator
from .problem import jacobian, residual, solve_linearized

log = logging.getLogger("pdecont")


class ConvergenceError(RuntimeError):
    """Corrector failed at the minimum stepsize; the state is left at the last
    accepted point."""


class BifurcationNotFound(RuntimeError):
    """findbif exhausted its step budget without a stability change."""


# -- weighted inner product ----------------------------------------------------

def xi_inner(x, y, xi):
    """<(u, lam), (v, mu)>_xi = xi <u, v> + (1 - xi) lam mu."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError("mismatched lengths in xi_inner")
    return xi * float(x[:-1] @ y[:-1]) + (1.0 - xi) * float(x[-1] * y[-1])


def xi_norm(x, xi):
    return math.sqrt(max(xi_inner(x, x, xi), 0.0))


def default_xi(n_p):
    """Continuation weight 1/n_p; n_p = 1 is clamped to 1/2 (must be < 1)."""
    if n_p < 1:
        raise ValueError("n_p must be positive")
    if n_p == 1:
        log.warning("default_xi(1) clamped to 1/2 (weight must be < 1)")
        return 0.5
    return 1.0 / n_p


def scaled_xi(xi, lam_factor):
    """Weight for a rescaled parameter lam~ = lam_factor * lam."""
    return xi / lam_factor


# -- settings and state ----------------------------------------------------------

@dataclass
class ContinuationSettings:
    tol: Optional[float] = None      # residual tolerance; default 1e-10 sqrt(n)
    imax: int = 10
    nsw: str = "newton"              # "newton" | "chord"
    jsw: int = 0
    dsmin: float = 1e-6
    dsmax: float = 0.1
    dlammax: float = 1e6
    lammin: float = -1e6
    lammax: float = 1e6
    nsteps: int = 20
    parasw: int = 1                  # 0 natural | 1 automatic | 2 arclength
    lamdtol: float = 0.5
    neig: int = 50
    bifchecksw: int = 1              # 0 off | 1 det sign + parity | 2 det sign only
    spcalcsw: int = 1
    bisecmax: int = 10
    amod: int = 0
    maxt: int = 20000
    ngen: int = 3
    errchecksw: int = 0
    errbound: float = 0.0
    smod: int = 0
    pmod: int = 0
    # pmcont controls
    mst: int = 4
    resfac: float = 0.1
    pmimax: int = 1
    dsincfac: float = 2.0
    pm_parallel: bool = True

    def effective_tol(self, n):
        return self.tol if self.tol is not None else 1e-10 * math.sqrt(n)

    def validate(self):
        if self.nsw not in ("newton", "chord"):
            raise ValueError(f"nsw must be 'newton' or 'chord', got {self.nsw!r}")
        if self.jsw not in (0, 1, 2, 3):
            raise ValueError(f"jsw must be 0..3, got {self.jsw}")
        if self.parasw not in (0, 1, 2):
            raise ValueError(f"parasw must be 0, 1 or 2, got {self.parasw}")
        if self.bifchecksw not in (0, 1, 2):
            raise ValueError(f"bifchecksw must be 0, 1 or 2, got {self.bifchecksw}")
        if not (0 < self.dsmin <= self.dsmax):
            raise ValueError(f"need 0 < dsmin <= dsmax, got "
                             f"({self.dsmin}, {self.dsmax})")
        if self.dlammax <= 0:
            raise ValueError("dlammax must be positive")
        if self.imax < 1 or self.nsteps < 0 or self.neig < 1 or self.bisecmax < 0:
            raise ValueError("imax/nsteps/neig/bisecmax out of range")
        if self.mst < 1:
            raise ValueError("mst must be >= 1")
        if not (0.0 < self.resfac <= 1.0):
            raise ValueError(f"resfac must be in (0, 1], got {self.resfac}")
        if self.pmimax < 1:
            raise ValueError("pmimax must be >= 1")
        if self.tol is not None and self.tol <= 0:
            raise ValueError("tol must be positive")
        return self


@dataclass
class BranchRecord:
    step: int
    lam: float
    ds: float
    neg_count: Optional[int]
    err: Optional[float]
    out: np.ndarray
    is_bif: bool = False
    res: Optional[float] = None
    iters: Optional[int] = None
    tangent_resid: Optional[float] = None
    tau_norm_dev: Optional[float] = None
    orientation: Optional[float] = None


@dataclass
class BifPoint:
    u: np.ndarray
    lam: float
    mesh: Mesh
    bracket: tuple
    phi1: Optional[np.ndarray] = None
    psi1: Optional[np.ndarray] = None
    alpha0: Optional[float] = None
    alpha1: Optional[float] = None
    a1: Optional[float] = None
    b1: Optional[float] = None
    abar1: Optional[float] = None
    tau1: Optional[np.ndarray] = None
    degenerate: bool = False
    note: str = ""


@dataclass
class ContinuationState:
    mesh: Mesh
    u: np.ndarray
    lam: float
    settings: ContinuationSettings = field(default_factory=ContinuationSettings)
    tau: Optional[np.ndarray] = None
    ds: float = 0.05
    xi: Optional[float] = None
    base_mesh: Optional[Mesh] = None
    restart: bool = True
    step: int = 0
    err: Optional[float] = None
    spectral: Optional[SpectralData] = None
    branch: list = field(default_factory=list)
    bifpoints: list = field(default_factory=list)
    problem_name: str = ""
    problem_params: dict = field(default_factory=dict)
    _prev_point: Optional["_PointData"] = field(default=None, repr=False)
    _suppress_detection: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float).ravel()
        self.settings.validate()
        if self.xi is None:
            self.xi = default_xi(self.mesh.n_points)
        if not (0.0 < self.xi < 1.0):
            raise ValueError(f"xi must lie in (0, 1), got {self.xi}")
        if self.base_mesh is None:
            self.base_mesh = self.mesh

    @property
    def n(self):
        return self.u.size

    def z(self):
        return np.concatenate([self.u, [self.lam]])


@dataclass
class _PointData:
    """Per-point snapshot used by detection and bisection."""
    u: np.ndarray
    lam: float
    tau: np.ndarray
    detsign: Optional[int] = None
    neg_count: Optional[int] = None


@dataclass
class CorrectorResult:
    u: np.ndarray
    lam: float
    iters: int
    residuals: list
    converged: bool
    p_final: float = 0.0


class NullReporter:
    def accepted(self, state, record):
        pass

    def bifurcation(self, state, bif, index):
        pass

    def log(self, msg):
        log.info(msg)


# -- correctors -----------------------------------------------------------------

def corrector_arclength(problem, mesh, settings, u0, lam0, tau0, ds, xi,
                        tol=None, imax=None):
    """Newton (or chord) iteration on the extended system."""
    n = u0.size
    tol = tol if tol is not None else settings.effective_tol(n)
    imax = imax if imax is not None else settings.imax
    coupling = problem.coupling(mesh)
    udot0, lamdot0 = tau0[:n], tau0[n]
    u = u0 + ds * udot0
    lam = lam0 + ds * lamdot0
    residuals = []
    lu = None
    system = None
    for it in range(imax + 1):
        r = residual(problem, mesh, u, lam)
        p = xi * float(udot0 @ (u - u0)) + (1.0 - xi) * lamdot0 * (lam - lam0) - ds
        res = max(float(np.abs(r).max()), abs(p))
        residuals.append(res)
        if res <= tol:
            return CorrectorResult(u, lam, it, residuals, True, p)
        if it == imax:
            break
        try:
            if settings.nsw == "chord":
                if system is None:
                    Gu, Glam = jacobian(problem, mesh, u, lam, settings.jsw)
                    system = BorderedSystem(Gu, Glam, xi * udot0, (1 - xi) * lamdot0)
                    if coupling is None:
                        lu = linalg.lu_factor(system.matrix())
                dz = solve_bordered(system, r, p, coupling=coupling, lam=lam, lu=lu)
            else:
                Gu, Glam = jacobian(problem, mesh, u, lam, settings.jsw)
                system = BorderedSystem(Gu, Glam, xi * udot0, (1 - xi) * lamdot0)
                dz = solve_bordered(system, r, p, coupling=coupling, lam=lam)
        except SingularSystemError:
            return CorrectorResult(u, lam, it, residuals, False)
        u = u - dz[:n]
        lam = lam - dz[n]
    return CorrectorResult(u, lam, imax, residuals, False)


def corrector_natural(problem, mesh, settings, u0, lam0, tau0, ds, xi,
                      tol=None, imax=None):
    """Predictor along tau0, then Newton in u at frozen lam."""
    n = u0.size
    tol = tol if tol is not None else settings.effective_tol(n)
    imax = imax if imax is not None else settings.imax
    if tau0 is None:
        u, lam = u0.copy(), lam0 + ds
    else:
        u = u0 + ds * tau0[:n]
        lam = lam0 + ds * tau0[n]
    residuals = []
    lu = None
    Gu0 = None
    for it in range(imax + 1):
        r = residual(problem, mesh, u, lam)
        res = float(np.abs(r).max())
        residuals.append(res)
        if res <= tol:
            return CorrectorResult(u, lam, it, residuals, True)
        if it == imax:
            break
        try:
            if settings.nsw == "chord":
                if Gu0 is None:
                    Gu0 = _jacobian_u(problem, mesh, u, lam, settings.jsw)
                    if problem.coupling(mesh) is None:
                        lu = linalg.lu_factor(Gu0)
                du = solve_linearized(problem, mesh, Gu0, r, lam, lu=lu)
            else:
                Gu = _jacobian_u(problem, mesh, u, lam, settings.jsw)
                du = solve_linearized(problem, mesh, Gu, r, lam)
        except SingularSystemError:
            return CorrectorResult(u, lam, it, residuals, False)
        u = u - du
    return CorrectorResult(u, lam, imax, residuals, False)


def _jacobian_u(problem, mesh, u, lam, jsw):
    from .problem import assembled_jacobian_u, fd_jacobian_u
    if jsw in (0, 1):
        return assembled_jacobian_u(problem, mesh, u, lam)
    return fd_jacobian_u(problem, mesh, u, lam)


def parametrization_choice(settings, tau):
    """'natural' while |lamdot| exceeds lamdtol, else 'arclength' (parasw=1);
    parasw 0/2 force natural/arclength."""
    if settings.parasw == 0:
        return "natural"
    if settings.parasw == 2:
        return "arclength"
    return "natural" if abs(float(tau[-1])) > settings.lamdtol else "arclength"


def compute_tangent(problem, mesh, Gu, Glam, tau_prev, xi, lam=0.0):
    """Solve A tau = (0, .., 0, 1), normalize in the xi norm, keep orientation."""
    n = Gu.shape[0]
    system = BorderedSystem(Gu, Glam, xi * tau_prev[:n], (1 - xi) * tau_prev[n])
    tau = solve_bordered(system, np.zeros(n), 1.0,
                         coupling=problem.coupling(mesh), lam=lam)
    nrm = xi_norm(tau, xi)
    if nrm == 0.0 or not np.isfinite(nrm):
        raise SingularSystemError("tangent system produced a zero/non-finite tangent")
    tau = tau / nrm
    if xi_inner(tau_prev, tau, xi) < 0.0:
        tau = -tau
    return tau


def stepsize_control(settings, ds, outcome_converged, iters, lamdot):
    """Halve on failure (not below dsmin); double on fast success; cap |ds| by
    dsmax and by dlammax/|lamdot|."""
    sign = 1.0 if ds >= 0 else -1.0
    mag = abs(ds)
    if not outcome_converged:
        if mag <= settings.dsmin * (1.0 + 1e-12):
            return None  # convergence failure
        return sign * max(mag / 2.0, settings.dsmin)
    if iters < settings.imax / 2.0:
        mag = mag * 2.0
    cap = settings.dsmax
    if abs(lamdot) > 1e-14:
        cap = min(cap, settings.dlammax / abs(lamdot))
    return sign * min(mag, cap)


def _capped_ds(settings, ds, lamdot):
    """Per-step cap of the predictor so the lam increment stays below dlammax."""
    if abs(lamdot) < 1e-14:
        return ds
    cap = settings.dlammax / abs(lamdot)
    return math.copysign(min(abs(ds), cap), ds)


# -- spectral helpers -------------------------------------------------------------

def mass_matrix(mesh, neq):
    """Mass matrix with a per-mesh cache (meshes are immutable)."""
    cache = mesh.__dict__.setdefault("_mass_cache", {})
    if neq not in cache:
        cache[neq] = assemble_mass(mesh, neq)
    return cache[neq]


def spectrum_of(problem, mesh, Gu, M, neig):
    k = min(neig, Gu.shape[0])
    return eigs_near_zero(Gu, M, neig=k)


def detect_bifurcation(bifchecksw, sign_prev, sign_new, count_prev=None,
                       count_new=None):
    """Bracket decision between two accepted points.

    Mode 2 fires on a det-sign flip alone; mode 1 additionally requires the
    unstable count of G_u to change by an odd number (even crossings such as
    double eigenvalues are deliberately ignored).
    """
    if bifchecksw <= 0 or sign_prev is None or sign_new is None:
        return False
    if sign_new == sign_prev:
        return False
    if bifchecksw == 1 and count_prev is not None and count_new is not None:
        return (count_new - count_prev) % 2 == 1
    return True


def bordered_det_sign(Gu, Glam, tau, M, neig):
    """Sign of det A with the detection weight xi = 1/2; returns (sign, spectrum).

    The generalized spectrum uses blockdiag(M, 1) as mass; M is SPD so signs
    and counts match the plain determinant sign.
    """
    n = Gu.shape[0]
    nrm = xi_norm(tau, 0.5)
    th = tau / nrm
    A = BorderedSystem(Gu, Glam, 0.5 * th[:n], 0.5 * th[n]).matrix()
    Mext = sp.block_diag([M, sp.eye(1)], format="csc")
    spec = eigs_near_zero(A, Mext, neig=min(neig, n + 1))
    return det_sign(spec), spec


def errcheck(problem, mesh, u, lam, alpha=0.15, beta=0.15):
    """Error indicator at the current point (coefficients evaluated at u)."""
    cs = problem.coeff_fn(mesh, u, lam)
    if not isinstance(cs, CoefficientSet):
        cs = CoefficientSet.from_user(problem.neq, mesh.n_triangles, *cs)
    return error_indicator(mesh, cs, u, alpha, beta)


# -- main loop --------------------------------------------------------------------

def init_step(state, problem, reporter=None):
    """Generate the first two branch points and the secant tangent."""
    reporter = reporter or NullReporter()
    s = state.settings
    n = state.n
    tol = s.effective_tol(n)
    res0 = corrector_natural(problem, state.mesh, s, state.u, state.lam, None, 0.0,
                             state.xi, tol=tol)
    if not res0.converged:
        raise ConvergenceError(
            f"no convergence for the initial point at lam={state.lam:.6g} "
            f"(residual {res0.residuals[-1]:.3e} after {res0.iters} iterations)")
    u0, lam0 = res0.u, res0.lam
    _record(state, problem, reporter, u0, lam0, None, res0, ds_used=0.0)

    dlam = math.copysign(min(abs(state.ds), s.dlammax), state.ds)
    res1 = corrector_natural(problem, state.mesh, s, u0, lam0 + dlam, None, 0.0,
                             state.xi, tol=tol)
    if not res1.converged:
        raise ConvergenceError("no convergence for the second initial point "
                               f"at lam={lam0 + dlam:.6g}")
    u1, lam1 = res1.u, res1.lam
    secant = np.concatenate([u1 - u0, [lam1 - lam0]])
    nrm = xi_norm(secant, state.xi)
    if nrm == 0.0:
        secant = np.zeros(n + 1)
        secant[-1] = 1.0
        nrm = xi_norm(secant, state.xi)
    tau_secant = math.copysign(1.0, state.ds) * secant / nrm

    Gu, Glam = jacobian(problem, state.mesh, u1, lam1, s.jsw)
    try:
        tau = compute_tangent(problem, state.mesh, Gu, Glam, tau_secant, state.xi,
                              lam=lam1)
    except SingularSystemError:
        tau = tau_secant
    state.u, state.lam, state.tau = u1, lam1, tau
    state.restart = False
    _record(state, problem, reporter, u1, lam1, tau, res1, ds_used=dlam,
            Gu=Gu, Glam=Glam, make_prev=True)
    return state


def _record(state, problem, reporter, u, lam, tau, corr, ds_used, Gu=None,
            Glam=None, make_prev=False, is_bif=False):
    """Append a branch record, computing spectra/detection data as configured."""
    s = state.settings
    mesh = state.mesh
    neg = None
    spec = None
    detsign = None
    if (s.spcalcsw or s.bifchecksw == 1) and Gu is None and not is_bif:
        Gu, Glam = jacobian(problem, mesh, u, lam, s.jsw)
    if (s.spcalcsw or s.bifchecksw == 1) and Gu is not None:
        M = mass_matrix(mesh, problem.neq)
        spec = spectrum_of(problem, mesh, Gu, M, s.neig)
        neg = spec.neg_count
        if spec.window_warning:
            reporter.log(f"step {state.step}: eigenvalue window warning "
                         "(|mu_1| > |mu_neig|/2)")
    if s.bifchecksw > 0 and Gu is not None and tau is not None:
        M = mass_matrix(mesh, problem.neq)
        try:
            detsign, specA = bordered_det_sign(Gu, Glam, tau, M, s.neig)
            if specA.window_warning:
                reporter.log(f"step {state.step}: det-sign window warning")
        except DegenerateSpectrumError:
            reporter.log(f"step {state.step}: degenerate det-sign skipped")
    err = None
    if s.errchecksw > 0:
        est = errcheck(problem, mesh, u, lam)
        err = est.err
        state.err = err

    diag_resid = None
    norm_dev = None
    orient = None
    if tau is not None:
        norm_dev = abs(xi_norm(tau, state.xi) - 1.0)
        if Gu is not None and Glam is not None:
            diag_resid = float(np.abs(Gu @ tau[:-1] + Glam * tau[-1]).max())
        if state._prev_point is not None:
            orient = xi_inner(state._prev_point.tau, tau, state.xi)
    rec = BranchRecord(step=state.step, lam=lam, ds=ds_used, neg_count=neg,
                       err=err, out=np.asarray(problem.out_fn(mesh, u, lam)),
                       is_bif=is_bif,
                       res=corr.residuals[-1] if corr is not None else None,
                       iters=corr.iters if corr is not None else None,
                       tangent_resid=diag_resid, tau_norm_dev=norm_dev,
                       orientation=orient)
    state.branch.append(rec)
    state.spectral = spec if spec is not None else state.spectral
    reporter.accepted(state, rec)
    if make_prev and tau is not None:
        state._prev_point = _PointData(u.copy(), lam, tau.copy(), detsign, neg)
    state.step += 1
    return rec, detsign


def cont(state, problem, reporter=None):
    """Pseudo-arclength continuation with detection/localization of simple
    bifurcation points."""
    reporter = reporter or NullReporter()
    s = state.settings
    if state.restart or state.tau is None:
        init_step(state, problem, reporter)
    taken = 0
    while taken < s.nsteps:
        if not (s.lammin <= state.lam <= s.lammax):
            reporter.log(f"lam={state.lam:.6g} outside [{s.lammin}, {s.lammax}]; stop")
            break
        prev = state._prev_point
        ds_eff = _capped_ds(s, state.ds, float(state.tau[-1]))
        mode = parametrization_choice(s, state.tau)
        correct = corrector_natural if mode == "natural" else corrector_arclength
        corr = correct(problem, state.mesh, s, state.u, state.lam, state.tau,
                       ds_eff, state.xi)
        if not corr.converged:
            new_ds = stepsize_control(s, state.ds, False, corr.iters, state.tau[-1])
            if new_ds is None:
                raise ConvergenceError(
                    f"no convergence at ds=dsmin={s.dsmin:g} "
                    f"(step {state.step}, lam={state.lam:.6g})")
            state.ds = new_ds
            continue
        u1, lam1 = corr.u, corr.lam
        try:
            Gu, Glam = jacobian(problem, state.mesh, u1, lam1, s.jsw)
            tau1 = compute_tangent(problem, state.mesh, Gu, Glam, state.tau,
                                   state.xi, lam=lam1)
        except SingularSystemError:
            # exactly singular bordered matrix (at a bifurcation): nudge s
            state.ds *= 0.71
            if abs(state.ds) < s.dsmin:
                raise ConvergenceError(
                    f"tangent system singular down to ds=dsmin near "
                    f"lam={lam1:.6g}") from None
            reporter.log(f"singular tangent system at lam={lam1:.6g}; retry with "
                         f"ds={state.ds:.3g}")
            continue
        state.u, state.lam, state.tau = u1, lam1, tau1
        rec, detsign = _record(state, problem, reporter, u1, lam1, tau1, corr,
                               ds_used=ds_eff, Gu=Gu, Glam=Glam)
        taken += 1

        # bifurcation detection between consecutive accepted points
        if (not state._suppress_detection and prev is not None
                and detect_bifurcation(s.bifchecksw, prev.detsign, detsign,
                                       prev.neg_count, rec.neg_count)):
            cur = _PointData(u1.copy(), lam1, tau1.copy(), detsign,
                             rec.neg_count)
            bif = localize_bifurcation(problem, state, prev, cur, ds_eff,
                                       reporter)
            if bif is not None:
                state.bifpoints.append(bif)
                reporter.bifurcation(state, bif, len(state.bifpoints))
                brec = BranchRecord(step=state.step, lam=bif.lam, ds=0.0,
                                    neg_count=rec.neg_count, err=state.err,
                                    out=np.asarray(problem.out_fn(
                                        state.mesh, bif.u, bif.lam)),
                                    is_bif=True)
                state.branch.append(brec)
                reporter.accepted(state, brec)
        state._suppress_detection = False
        state._prev_point = _PointData(u1.copy(), lam1, tau1.copy(), detsign,
                                       rec.neg_count)

        new_ds = stepsize_control(s, state.ds, True, corr.iters, float(tau1[-1]))
        state.ds = new_ds

        due_amod = s.amod > 0 and taken % s.amod == 0
        due_err = s.errchecksw > 1 and state.err is not None \
            and state.err > s.errbound > 0
        if due_amod or due_err:
            _adapt_state(state, problem, reporter)
    return state


def _adapt_state(state, problem, reporter):
    """Interpolate (u, tau) to the base mesh and refine where E(K) is large."""
    s = state.settings
    lam = state.lam

    def est_fn(mesh, fields):
        return errcheck(problem, mesh, fields["u"], lam)

    n = state.n
    fields = {"u": state.u, "tau_u": state.tau[:n]}
    eb = s.errbound if (s.errchecksw > 1 and s.errbound > 0) else 0.0
    result = adapt(state.mesh, state.base_mesh, fields, est_fn,
                   maxt=s.maxt, ngen=s.ngen, eb=eb)
    if result.clamped:
        reporter.log("mesh adaption: some nodes fell outside the old mesh "
                     "(clamped to nearest triangle)")
    state.mesh = result.mesh
    state.u = result.fields["u"]
    tau = np.concatenate([result.fields["tau_u"], [state.tau[-1]]])
    nrm = xi_norm(tau, state.xi)
    state.tau = tau / nrm if nrm > 0 else tau
    state.err = result.estimate.err
    state.spectral = None
    state._prev_point = None
    state._suppress_detection = True  # det-sign jumps after adaption are spurious
    reporter.log(f"mesh adapted: {result.mesh.n_triangles} triangles, "
                 f"err={state.err:.3g}")


# -- bifurcation localization -----------------------------------------------------

def localize_bifurcation(problem, state, lo, hi, ds_ab, reporter=None):
    """Bisect the det-sign change between two accepted points.

    Returns a BifPoint at the final midpoint carrying kernel vectors and the
    branch-switching data, or None when localization is impossible.
    """
    reporter = reporter or NullReporter()
    s = state.settings
    mesh = state.mesh
    xi = state.xi
    M = mass_matrix(mesh, problem.neq)
    width = ds_ab
    z = lo
    mid = None
    degenerate = False
    for _ in range(max(1, s.bisecmax)):
        half = width / 2.0
        corr = corrector_arclength(problem, mesh, s, z.u, z.lam, z.tau, half, xi)
        if not corr.converged:
            width = half
            continue
        try:
            Gu, Glam = jacobian(problem, mesh, corr.u, corr.lam, s.jsw)
            tau_m = compute_tangent(problem, mesh, Gu, Glam, z.tau, xi,
                                    lam=corr.lam)
        except SingularSystemError:
            width = half
            continue
        try:
            sign_m, _ = bordered_det_sign(Gu, Glam, tau_m, M, s.neig)
        except DegenerateSpectrumError:
            mid = _PointData(corr.u.copy(), corr.lam, tau_m.copy(), None, None)
            degenerate = True
            break
        mid = _PointData(corr.u.copy(), corr.lam, tau_m.copy(), sign_m, None)
        if sign_m == lo.detsign:
            z = mid
        width = half
    if mid is None:
        reporter.log("bisection produced no midpoint; localization abandoned")
        return None
    bif = _branch_switch_data(problem, mesh, s, mid.u, mid.lam, mid.tau, M)
    bif.bracket = (lo.lam, hi.lam)
    bif.degenerate = bif.degenerate or degenerate
    reporter.log(f"bifurcation located at lam={bif.lam:.6g} "
                 f"(bracket [{lo.lam:.6g}, {hi.lam:.6g}])")
    return bif


def _branch_switch_data(problem, mesh, settings, u, lam, tau, M=None):
    """Kernel vectors and the quadratic branch-switching coefficients."""
    M = M if M is not None else mass_matrix(mesh, problem.neq)
    n = u.size
    Gu, Glam = jacobian(problem, mesh, u, lam, settings.jsw)
    kkern = min(6, Gu.shape[0])
    spec, vecs = eigs_near_zero(Gu, M, neig=kkern, return_vectors=True)
    phi1 = np.real(vecs[:, 0])
    phi1 /= np.linalg.norm(phi1)
    specT, vecsT = eigs_near_zero(Gu.T.tocsc(), M, neig=kkern, return_vectors=True)
    psi1 = np.real(vecsT[:, 0])
    bif = BifPoint(u=u.copy(), lam=lam, mesh=mesh, bracket=(lam, lam), phi1=phi1)
    denom = float(psi1 @ phi1)
    if abs(denom) < 1e-10:
        bif.degenerate = True
        bif.note = "left/right kernel vectors nearly orthogonal (non-simple?)"
        return bif
    psi1 = psi1 / denom
    bif.psi1 = psi1
    udot, lamdot = tau[:n], float(tau[n])
    alpha0 = lamdot
    alpha1 = float(psi1 @ udot)
    bif.alpha0, bif.alpha1 = alpha0, alpha1
    if abs(alpha0) < 1e-10:
        bif.degenerate = True
        bif.note = "lamdot = 0 at the bifurcation (pitchfork-through-fold case)"
        return bif
    phi0 = (udot - alpha1 * phi1) / alpha0
    delta = 1e-4 * (1.0 + float(np.abs(u).max()))
    Gu_d, Glam_d = jacobian(problem, mesh, u + delta * phi1, lam, settings.jsw)
    dG = Gu_d - Gu
    a1 = float(psi1 @ (dG @ phi1)) / delta
    b1 = float(psi1 @ (dG @ phi0 + (Glam_d - Glam))) / delta
    abar1 = -(a1 * alpha1 / alpha0 + 2.0 * b1)
    tau1 = np.concatenate([abar1 * phi1 + a1 * phi0, [a1]])
    bif.a1, bif.b1, bif.abar1, bif.tau1 = a1, b1, abar1, tau1
    return bif


def swibra(bifpoint, state, ds, xi=None):
    """New continuation state on the bifurcating branch.

    The tangent from the branch-switch coefficients is normalized with the
    given weight; the sign of ds selects the branch direction.  If the
    subsequent cont run falls back onto the known branch, change ds and/or xi.
    """
    if bifpoint.degenerate or bifpoint.tau1 is None:
        raise ValueError(f"branch switching not possible: {bifpoint.note or 'degenerate point'}")
    xi = xi if xi is not None else default_xi(bifpoint.mesh.n_points)
    nrm = xi_norm(bifpoint.tau1, xi)
    if nrm == 0.0:
        raise ValueError("degenerate branch-switch tangent")
    new = ContinuationState(
        mesh=bifpoint.mesh,
        u=bifpoint.u.copy(),
        lam=bifpoint.lam,
        settings=dataclasses.replace(state.settings),
        tau=bifpoint.tau1 / nrm,
        ds=ds,
        xi=xi,
        base_mesh=state.base_mesh,
        restart=False,
        problem_name=state.problem_name,
        problem_params=dict(state.problem_params),
    )
    return new


# -- findbif ------------------------------------------------------------------------

@dataclass
class FindBifResult:
    lo: _PointData
    hi: _PointData
    lo_count: int
    hi_count: int
    bifpoint: Optional[BifPoint]


def findbif(state, problem, nchange=1, reporter=None):
    """March along the branch until the unstable-eigenvalue count of G_u
    changes (the nchange-th time), bisect the change in s, and attempt the
    det-sign localization inside the tight bracket."""
    reporter = reporter or NullReporter()
    s = state.settings
    if state.restart or state.tau is None:
        init_step(state, problem, reporter)
    M = mass_matrix(state.mesh, problem.neq)

    def count_at(u, lam, Gu=None):
        Gu = Gu if Gu is not None else _jacobian_u(problem, state.mesh, u, lam, s.jsw)
        spec = spectrum_of(problem, state.mesh, Gu, M, s.neig)
        return spec.neg_count

    prev = state._prev_point
    if prev is None:
        raise ConvergenceError("findbif requires an initialized state")
    prev_count = state.branch[-1].neg_count
    if prev_count is None:
        prev_count = count_at(state.u, state.lam)
    changes = 0
    for _ in range(s.nsteps):
        ds_eff = _capped_ds(s, state.ds, float(state.tau[-1]))
        prev_point = _PointData(state.u.copy(), state.lam, state.tau.copy(),
                                None, prev_count)
        corr = corrector_arclength(problem, state.mesh, s, state.u, state.lam,
                                   state.tau, ds_eff, state.xi)
        if not corr.converged:
            new_ds = stepsize_control(s, state.ds, False, corr.iters,
                                      state.tau[-1])
            if new_ds is None:
                raise ConvergenceError("findbif: no convergence at dsmin")
            state.ds = new_ds
            continue
        Gu, Glam = jacobian(problem, state.mesh, corr.u, corr.lam, s.jsw)
        tau1 = compute_tangent(problem, state.mesh, Gu, Glam, state.tau, state.xi,
                               lam=corr.lam)
        state.u, state.lam, state.tau = corr.u, corr.lam, tau1
        rec, _ = _record(state, problem, reporter, corr.u, corr.lam, tau1, corr,
                         ds_used=ds_eff, Gu=Gu, Glam=Glam, make_prev=True)
        cur_count = rec.neg_count
        if cur_count is None:
            cur_count = count_at(corr.u, corr.lam, Gu)
        if cur_count != prev_count:
            changes += 1
            reporter.log(f"stability change {prev_count} -> {cur_count} "
                         f"near lam={corr.lam:.6g}")
            if changes >= nchange:
                cur_point = _PointData(corr.u.copy(), corr.lam, tau1.copy(),
                                       None, cur_count)
                return _bisect_count_change(problem, state, prev_point, cur_point,
                                            ds_eff, count_at, reporter)
        prev_count = cur_count
    raise BifurcationNotFound(
        f"no change in the unstable count within {s.nsteps} steps")


def _bisect_count_change(problem, state, lo, hi, ds_ab, count_at, reporter):
    s = state.settings
    width = ds_ab
    z = lo
    far = hi
    for _ in range(max(1, s.bisecmax)):
        half = width / 2.0
        corr = corrector_arclength(problem, state.mesh, s, z.u, z.lam, z.tau,
                                   half, state.xi)
        if not corr.converged:
            width = half
            continue
        Gu, Glam = jacobian(problem, state.mesh, corr.u, corr.lam, s.jsw)
        tau_m = compute_tangent(problem, state.mesh, Gu, Glam, z.tau, state.xi,
                                lam=corr.lam)
        c_m = count_at(corr.u, corr.lam, Gu)
        mid = _PointData(corr.u.copy(), corr.lam, tau_m.copy(), None, c_m)
        if c_m == lo.neg_count:
            z = mid
        else:
            far = mid
        width = half
    reporter.log(f"stability change bracketed in lam=[{z.lam:.6g}, {far.lam:.6g}]")
    bif = None
    M = mass_matrix(state.mesh, problem.neq)
    try:
        sign_lo = _detsign_at(problem, state, z, M)
        sign_hi = _detsign_at(problem, state, far, M)
        z.detsign, far.detsign = sign_lo, sign_hi
        if sign_lo != sign_hi:
            bif = localize_bifurcation(problem, state, z, far, width, reporter)
        else:
            reporter.log("det-sign does not flip inside the bracket "
                         "(even crossing); returning the bracket only")
    except DegenerateSpectrumError:
        reporter.log("degenerate det-sign inside the bracket")
    return FindBifResult(z, far, int(z.neg_count), int(far.neg_count), bif)


def _detsign_at(problem, state, point, M):
    Gu, Glam = jacobian(problem, state.mesh, point.u, point.lam,
                        state.settings.jsw)
    sign, _ = bordered_det_sign(Gu, Glam, point.tau, M, state.settings.neig)
    return sign


# -- pmcont -----------------------------------------------------------------------

def _pm_good(residuals, resfac, pmimax, converged):
    if not converged:
        return False
    for l in range(pmimax, len(residuals)):
        if residuals[l] > resfac * residuals[l - pmimax] + 1e-300:
            return False
    return True


def pmcont(state, problem, reporter=None):
    """Multi-predictor continuation: mst predictors per round, corrected
    independently; only correctors whose residuals contract by resfac per
    Newton step are accepted."""
    reporter = reporter or NullReporter()
    s = state.settings
    if state.restart or state.tau is None:
        init_step(state, problem, reporter)
    taken = 0
    while taken < s.nsteps:
        if not (s.lammin <= state.lam <= s.lammax):
            break
        due_amod = s.amod > 0 and state.step > 0 and taken > 0 \
            and taken % s.amod == 0
        if due_amod:
            _adapt_state(state, problem, reporter)
        ds_eff = _capped_ds(s, state.ds, float(state.tau[-1]))
        mst = max(1, s.mst)

        def correct_one(i):
            try:
                return corrector_arclength(problem, state.mesh, s, state.u,
                                           state.lam, state.tau,
                                           (i + 1) * ds_eff, state.xi)
            except SingularSystemError:
                return CorrectorResult(state.u, state.lam, s.imax, [np.inf], False)

        if s.pm_parallel and mst > 1:
            with ThreadPoolExecutor(max_workers=min(mst, 8)) as pool:
                results = list(pool.map(correct_one, range(mst)))
        else:
            results = [correct_one(i) for i in range(mst)]
        good = [r for r in results
                if _pm_good(r.residuals, s.resfac, s.pmimax, r.converged)]

        if not good:
            if abs(state.ds) > (1 + mst) * s.dsmin:
                state.ds = state.ds / (1 + mst)
                continue
            if s.pmimax < s.imax:
                s.pmimax += 1
                reporter.log(f"pmcont: relaxing contraction window to "
                             f"pmimax={s.pmimax}")
                continue
            raise ConvergenceError("pmcont: no good point at minimal stepsize "
                                   "and pmimax = imax")

        for corr in good:
            prev = state._prev_point
            try:
                Gu, Glam = jacobian(problem, state.mesh, corr.u, corr.lam, s.jsw)
                tau1 = compute_tangent(problem, state.mesh, Gu, Glam, state.tau,
                                       state.xi, lam=corr.lam)
            except SingularSystemError:
                break
            state.u, state.lam, state.tau = corr.u, corr.lam, tau1
            rec, detsign = _record(state, problem, reporter, corr.u, corr.lam,
                                   tau1, corr, ds_used=ds_eff, Gu=Gu, Glam=Glam)
            taken += 1
            if prev is not None and detect_bifurcation(
                    s.bifchecksw, prev.detsign, detsign,
                    prev.neg_count, rec.neg_count):
                cur = _PointData(corr.u.copy(), corr.lam, tau1.copy(),
                                 detsign, rec.neg_count)
                bif = localize_bifurcation(problem, state, prev, cur, ds_eff,
                                           reporter)
                if bif is not None:
                    state.bifpoints.append(bif)
                    reporter.bifurcation(state, bif, len(state.bifpoints))
            state._prev_point = _PointData(corr.u.copy(), corr.lam, tau1.copy(),
                                           detsign, rec.neg_count)
            if taken >= s.nsteps or not (s.lammin <= state.lam <= s.lammax):
                break

        if len(good) == mst and abs(state.ds) < s.dsmax / s.dsincfac:
            state.ds = state.ds * s.dsincfac
    return state


# -- time integration ----------------------------------------------------------------

def tint(state, problem, h, nsteps, reporter=None):
    """Semi-implicit Euler: u <- (M + h K(u))^{-1} (M u + h F(u)).

    K and F are reassembled at the current iterate every step; a stationary
    point of the residual is a fixed point of the map.
    """
    if h <= 0:
        raise ValueError("time step h must be positive")
    reporter = reporter or NullReporter()
    u = state.u.copy()
    for k in range(int(nsteps)):
        system = assemble_system(problem, state.mesh, u, state.lam)
        A = (system.M + h * system.K).tocsc()
        try:
            u = linalg.solve(A, system.M @ u + h * system.F)
        except SingularSystemError as exc:
            raise SingularSystemError(
                f"time step {k}: singular (M + h K): {exc}") from exc
    state.u = u
    state.tau = None
    state.restart = True
    return state

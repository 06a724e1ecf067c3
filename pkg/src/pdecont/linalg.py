"""Sparse direct solves, bordered systems, Sherman-Morrison updates, and
eigenvalue extraction near zero."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SingularSystemError(RuntimeError):
    """Factorization failed or produced non-finite results."""


class EigenConvergenceError(RuntimeError):
    """The iterative eigensolver did not converge within its iteration cap."""


class DegenerateSpectrumError(RuntimeError):
    """An eigenvalue real part is numerically zero; det sign is undecidable."""


def lu_factor(A):
    """SuperLU factorization with singular matrices reported as errors."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", spla.MatrixRankWarning)
            return spla.splu(sp.csc_matrix(A))
    except (RuntimeError, spla.MatrixRankWarning) as exc:
        raise SingularSystemError(str(exc)) from exc


def solve(Msys, r, lu=None):
    """Direct sparse solve Msys v = r."""
    lu = lu or lu_factor(Msys)
    v = lu.solve(np.asarray(r, dtype=float))
    if not np.all(np.isfinite(v)):
        raise SingularSystemError("non-finite solution (singular system)")
    return v


@dataclass
class RankOneCoupling:
    """Data for solving (K - lam * scale * nu eta^T) v = r without forming it."""
    nu: np.ndarray
    eta: np.ndarray
    scale: float = 1.0


def solve_rank_one(K, coupling, lam, r, lu=None):
    """Sherman-Morrison solve of (K - lam*scale * nu eta^T) v = r."""
    lam_eff = lam * coupling.scale
    lu = lu or lu_factor(K)
    y = lu.solve(np.asarray(r, dtype=float))
    if lam_eff == 0.0:
        return y
    z = lu.solve(coupling.nu)
    denom = 1.0 - lam_eff * (coupling.eta @ z)
    if abs(denom) < 1e-12:
        raise SingularSystemError("rank-one coupled system is singular "
                                  f"(denominator {denom:.3e})")
    alpha = lam_eff * (coupling.eta @ y) / denom
    v = y + alpha * z
    if not np.all(np.isfinite(v)):
        raise SingularSystemError("non-finite solution in rank-one solve")
    return v


@dataclass
class BorderedSystem:
    """(n+1) x (n+1) system [[Gu, Glam], [border_u, border_lam]]."""
    Gu: sp.spmatrix
    Glam: np.ndarray
    border_u: np.ndarray
    border_lam: float

    def matrix(self):
        n = self.Gu.shape[0]
        return sp.bmat([
            [self.Gu, sp.csc_matrix(self.Glam.reshape(n, 1))],
            [sp.csc_matrix(self.border_u.reshape(1, n)),
             sp.csc_matrix(np.array([[self.border_lam]]))],
        ], format="csc")


def solve_bordered(system, rhs_u, rhs_s, method="monolithic", coupling=None,
                   lam=0.0, lu=None):
    """Solve the bordered system for (du, dlam).

    method 'monolithic' factors the full (n+1) x (n+1) matrix; method 'block'
    eliminates via two solves with Gu (which must then be nonsingular).  An
    optional rank-one coupling is applied to the Gu block via Sherman-Morrison
    on the padded extended matrix.
    """
    n = system.Gu.shape[0]
    rhs_u = np.asarray(rhs_u, dtype=float)
    if method == "block":
        if coupling is None:
            lu_g = lu or lu_factor(system.Gu)
            z1 = lu_g.solve(system.Glam)
            z2 = lu_g.solve(rhs_u)
        else:
            z1 = solve_rank_one(system.Gu, coupling, lam, system.Glam, lu=lu)
            z2 = solve_rank_one(system.Gu, coupling, lam, rhs_u, lu=lu)
        denom = system.border_lam - system.border_u @ z1
        if abs(denom) < 1e-300:
            raise SingularSystemError("bordered elimination: zero pivot")
        dlam = (rhs_s - system.border_u @ z2) / denom
        du = z2 - dlam * z1
        return np.concatenate([du, [dlam]])
    if method != "monolithic":
        raise ValueError(f"unknown bordered method {method!r}")
    A = system.matrix()
    rhs = np.concatenate([rhs_u, [rhs_s]])
    if coupling is None:
        return solve(A, rhs, lu=lu)
    padded = RankOneCoupling(np.concatenate([coupling.nu, [0.0]]),
                             np.concatenate([coupling.eta, [0.0]]),
                             coupling.scale)
    return solve_rank_one(A, padded, lam, rhs, lu=lu)


@dataclass
class SpectralData:
    """Eigenvalues closest to zero, sorted by modulus."""
    eigenvalues: np.ndarray      # complex, ascending |mu|
    neg_count: int               # eigenvalues with Re < 0 within the window
    window_warning: bool         # |mu_1| > |mu_neig| / 2

    @property
    def neig(self):
        return self.eigenvalues.size


def _finish_spectrum(vals, vecs=None):
    order = np.argsort(np.abs(vals), kind="stable")
    vals = vals[order]
    neg = int(np.sum(vals.real < 0))
    warn = bool(vals.size and abs(vals[0]) > abs(vals[-1]) / 2.0)
    spec = SpectralData(vals, neg, warn)
    if vecs is None:
        return spec
    vecs = vecs[:, order]
    # deterministic phase: largest-magnitude entry made real positive
    for k in range(vecs.shape[1]):
        v = vecs[:, k]
        j = int(np.argmax(np.abs(v)))
        if v[j] != 0:
            v /= v[j] / abs(v[j])
        nrm = np.linalg.norm(v)
        if nrm > 0:
            v /= nrm
        vecs[:, k] = v
    return spec, vecs


def eigs_near_zero(Gu, M, neig=50, return_vectors=False, maxiter=None):
    """Eigenvalues of the generalized problem Gu phi = mu M phi closest to zero.

    Uses shift-invert at zero with the deterministic all-ones start vector and
    a small fallback shift when the factorization at zero fails.  For systems
    too small for ARPACK the dense generalized eigenproblem is solved instead.
    """
    n = Gu.shape[0]
    k = min(int(neig), n)
    dense_needed = k >= n - 1
    if dense_needed:
        import scipy.linalg as sla
        Md = M.toarray() if sp.issparse(M) else np.asarray(M, dtype=float)
        Gd = Gu.toarray() if sp.issparse(Gu) else np.asarray(Gu, dtype=float)
        vals, vecs = sla.eig(Gd, Md)
        order = np.argsort(np.abs(vals), kind="stable")[:k]
        vals, vecs = vals[order], vecs[:, order]
        out = _finish_spectrum(vals, vecs if return_vectors else None)
        return out
    v0 = np.ones(n)
    sigma = 0.0
    for attempt in range(2):
        try:
            vals, vecs = spla.eigs(Gu, k=k, M=M, sigma=sigma, which="LM", v0=v0,
                                   maxiter=maxiter)
            break
        except SingularSystemError:
            raise
        except spla.ArpackNoConvergence as exc:
            raise EigenConvergenceError(str(exc)) from exc
        except (RuntimeError, ValueError) as exc:
            if attempt == 1:
                raise SingularSystemError(f"shift-invert failed: {exc}") from exc
            diag = Gu.diagonal() if sp.issparse(Gu) else np.diag(Gu)
            sigma = 1e-6 * (np.mean(np.abs(diag)) + 1.0)
    return _finish_spectrum(vals, vecs if return_vectors else None)


def det_sign(spec):
    """sign(det) = sign(prod Re mu_i) over the spectral window.

    Complex eigenvalues represent conjugate pairs and contribute +1 to the
    product regardless of whether ARPACK returned both members, so the parity
    is decided by the real eigenvalues alone.  A numerically zero real part is
    reported as degenerate so the caller can bisect further or give up.
    """
    vals = spec.eigenvalues
    re = vals.real
    if np.any(np.abs(re) < 1e-14):
        raise DegenerateSpectrumError("eigenvalue real part is numerically zero")
    is_real = np.abs(vals.imag) <= 1e-12 * (1.0 + np.abs(vals))
    neg_real = int(np.sum(re[is_real] < 0))
    return -1 if neg_real % 2 else 1

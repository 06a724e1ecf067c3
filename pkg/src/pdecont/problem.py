"""Problem definitions and residual/Jacobian evaluation.

A problem is data plus pure functions: a coefficient function, an optional
Jacobian-coefficient function, a boundary-condition function, a branch-output
function, and named parameters.  The Jacobian switch jsw selects between
assembled and finite-difference derivatives:

    0: Gu and Glam assembled        1: Gu assembled, Glam by differences
    2: Gu by differences, Glam assembled        3: both by differences
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp

from . import assembly as asm
from . import linalg
from .assembly import JacobianCoefficients
from .mesh import triint

FD_STEP = 1e-6


class SparsityError(RuntimeError):
    """A finite-difference column has entries outside the mesh adjacency
    pattern: the residual depends nonlocally on u."""


def default_branch_output(mesh, u, lam):
    """Max norm and L2 norm of the first component."""
    n_p = mesh.n_points
    u1 = np.asarray(u)[:n_p]
    l2 = float(np.sqrt(max(triint(mesh, u1 * u1), 0.0)))
    return np.array([float(np.abs(u1).max()), l2])


@dataclass
class ProblemDef:
    """User problem: coefficients, boundary conditions, optional Jacobian."""
    name: str
    neq: int
    coeff_fn: Callable
    bc_fn: Callable
    jac_fn: Optional[Callable] = None
    out_fn: Callable = default_branch_output
    params: dict = field(default_factory=dict)
    coupling_fn: Optional[Callable] = None  # mesh -> RankOneCoupling

    def coupling(self, mesh):
        return self.coupling_fn(mesh) if self.coupling_fn is not None else None

    def jac_coeffs(self, mesh, u, lam):
        if self.jac_fn is None:
            raise ValueError(f"problem {self.name!r} provides no Jacobian "
                             "coefficients (use jsw >= 2)")
        jc = self.jac_fn(mesh, u, lam)
        if not isinstance(jc, JacobianCoefficients):
            jc = JacobianCoefficients.from_user(self.neq, mesh.n_triangles, *jc)
        return jc


def residual(problem, mesh, u, lam, system=None):
    """r = K(u, lam) u - F(u, lam)."""
    system = system or asm.assemble_system(problem, mesh, u, lam)
    return system.K @ u - system.F


# -- finite-difference machinery ----------------------------------------------

def adjacency_pattern(mesh, N):
    """Node-adjacency sparsity (including self) expanded over N components."""
    tri = mesh.triangles
    n_p = mesh.n_points
    rows = np.concatenate([tri[:, p] for p in range(3) for _ in range(3)])
    cols = np.concatenate([tri[:, q] for _ in range(3) for q in range(3)])
    S1 = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n_p, n_p)).tocsr()
    S1.data[:] = 1.0
    if N == 1:
        return S1
    return sp.kron(np.ones((N, N)), S1, format="csr")


def color_columns(mesh, N):
    """Group columns so columns in a group share no pattern rows.

    Nodes at mesh-graph distance <= 2 conflict; the N component columns of one
    node always conflict with each other.  Greedy coloring in node order.
    """
    S1 = adjacency_pattern(mesh, 1)
    conflict = (S1.T @ S1).tocsr()
    n_p = mesh.n_points
    color = -np.ones(n_p, dtype=int)
    for node in range(n_p):
        nbrs = conflict.indices[conflict.indptr[node]:conflict.indptr[node + 1]]
        used = {color[m] for m in nbrs if color[m] >= 0}
        c = 0
        while c in used:
            c += 1
        color[node] = c
    ncolors = color.max() + 1
    groups = [[] for _ in range(ncolors * N)]
    for comp in range(N):
        for node in range(n_p):
            groups[color[node] * N + comp].append(comp * n_p + node)
    return [np.array(g, dtype=int) for g in groups if g]


def fd_jacobian_u(problem, mesh, u, lam, r0=None, check_sparsity=True):
    """Columnwise finite-difference Gu restricted to the adjacency pattern."""
    N = problem.neq
    n = N * mesh.n_points
    u = np.asarray(u, dtype=float)
    r0 = residual(problem, mesh, u, lam) if r0 is None else r0
    S = adjacency_pattern(mesh, N).tocsc()
    groups = color_columns(mesh, N)
    data = np.zeros_like(S.data)
    deltas = FD_STEP * (1.0 + np.abs(u))
    for group in groups:
        up = u.copy()
        up[group] += deltas[group]
        diff = residual(problem, mesh, up, lam) - r0
        for j in group:
            rows = S.indices[S.indptr[j]:S.indptr[j + 1]]
            data[S.indptr[j]:S.indptr[j + 1]] = diff[rows] / deltas[j]
    Gu = sp.csc_matrix((data, S.indices.copy(), S.indptr.copy()), shape=(n, n))
    if check_sparsity:
        j = n // 2
        up = u.copy()
        up[j] += deltas[j]
        col = (residual(problem, mesh, up, lam) - r0) / deltas[j]
        mask = np.ones(n, dtype=bool)
        mask[S.indices[S.indptr[j]:S.indptr[j + 1]]] = False
        outside = np.abs(col[mask])
        scale = max(np.abs(col).max(), 1.0)
        if outside.size and outside.max() > 1e-8 * scale:
            raise SparsityError(
                "residual depends on u outside the node-adjacency pattern "
                f"(max stray entry {outside.max():.3e}); use a rank-one "
                "coupling or a dense Jacobian")
    return Gu.tocsr()


def fd_glam(problem, mesh, u, lam, r0=None):
    r0 = residual(problem, mesh, u, lam) if r0 is None else r0
    dlam = FD_STEP * (1.0 + abs(lam))
    return (residual(problem, mesh, u, lam + dlam) - r0) / dlam


def assembled_jacobian_u(problem, mesh, u, lam, jc=None):
    """Gu = K_c + K_q - B - (mass-assembled fu) from Jacobian coefficients."""
    jc = jc or problem.jac_coeffs(mesh, u, lam)
    N = problem.neq
    bc = problem.bc_fn(mesh, u, lam)
    Kc = asm.assemble_stiffness(mesh, jc.c, N)
    Kq, _ = asm.assemble_bc(mesh, bc, u, lam)
    B = asm.assemble_advection(mesh, jc.b, N)
    Afu = asm.assemble_a_term(mesh, jc.fu, N)
    return (Kc + Kq - B - Afu).tocsr()


def assembled_glam(problem, mesh, u, lam, jc=None):
    jc = jc or problem.jac_coeffs(mesh, u, lam)
    return -asm.assemble_load(mesh, jc.flam, problem.neq)


def jacobian(problem, mesh, u, lam, jsw=0, check_sparsity=False):
    """(Gu, Glam) according to the derivative switch jsw."""
    if jsw in (0, 1):
        jc = problem.jac_coeffs(mesh, u, lam)
        Gu = assembled_jacobian_u(problem, mesh, u, lam, jc)
        if jsw == 0:
            Glam = assembled_glam(problem, mesh, u, lam, jc)
        else:
            Glam = fd_glam(problem, mesh, u, lam)
    elif jsw in (2, 3):
        r0 = residual(problem, mesh, u, lam)
        Gu = fd_jacobian_u(problem, mesh, u, lam, r0=r0,
                           check_sparsity=check_sparsity)
        if jsw == 2:
            Glam = assembled_glam(problem, mesh, u, lam)
        else:
            Glam = fd_glam(problem, mesh, u, lam, r0=r0)
    else:
        raise ValueError(f"jsw must be 0..3, got {jsw}")
    return Gu, Glam


@dataclass
class JacCheckReport:
    rel_error: float
    norm_fd: float
    time_assembled: float
    time_fd: float
    Gu_assembled: sp.spmatrix
    Gu_fd: sp.spmatrix

    def __str__(self):
        return (f"assembled vs FD Jacobian: rel error {self.rel_error:.4e} "
                f"(assembled {self.time_assembled * 1e3:.1f} ms, "
                f"FD {self.time_fd * 1e3:.1f} ms)")


def jac_check(problem, mesh, u, lam):
    """Frobenius-norm comparison of assembled and finite-difference Gu."""
    t0 = time.perf_counter()
    Gua = assembled_jacobian_u(problem, mesh, u, lam)
    t1 = time.perf_counter()
    Gun = fd_jacobian_u(problem, mesh, u, lam, check_sparsity=False)
    t2 = time.perf_counter()
    norm_fd = sp.linalg.norm(Gun, "fro")
    rel = sp.linalg.norm(Gun - Gua, "fro") / norm_fd
    return JacCheckReport(rel_error=float(rel), norm_fd=float(norm_fd),
                          time_assembled=t1 - t0, time_fd=t2 - t1,
                          Gu_assembled=Gua, Gu_fd=Gun)


def solve_linearized(problem, mesh, Gu, rhs, lam, lu=None):
    """Linear solve dispatch: plain sparse solve, or the Sherman-Morrison
    variant when the problem carries a rank-one coupling."""
    coupling = problem.coupling(mesh)
    if coupling is None:
        return linalg.solve(Gu, rhs, lu=lu)
    return linalg.solve_rank_one(Gu, coupling, lam, rhs, lu=lu)

"""P1 finite element assembly for systems -div(c grad u) + a u - b.grad u - f = 0.

Coefficient storage follows the row layouts used throughout the problem
definitions (all indices 1-based in the formulas, rows 0-based in code):

    c_ijkl in row 4N(j-1) + 4i + 2l + k - 6     (4 N^2 rows)
    a_ij   in row  N(j-1) + i                   (N^2 rows)
    b_ijk  in row 2N(j-1) + 2i + k - 2          (2 N^2 rows)
    f_i    in row i                             (N rows)

Each array has one column (constants) or n_t columns (per-triangle values at
the centroids).  One-point centroid quadrature is used for all u-dependent
coefficients; the mass matrix and the a-term geometry factor are exact.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import gradients


class LayoutError(ValueError):
    """Raised when a coefficient array has an invalid shape for its layout."""


def c_row(i, j, k, l, N):
    """0-based row of c_ijkl (arguments 1-based)."""
    return 4 * N * (j - 1) + 4 * i + 2 * l + k - 7


def a_row(i, j, N):
    return N * (j - 1) + i - 1


def b_row(i, j, k, N):
    return 2 * N * (j - 1) + 2 * i + k - 3


def c_row_decode(row, N):
    """Inverse of c_row; returns (i, j, k, l), all 1-based."""
    j = row // (4 * N) + 1
    rem = row - 4 * N * (j - 1) + 7
    i = (rem - 3) // 4  # rem = 4i + 2l + k with 2l+k in 3..6
    s = rem - 4 * i
    l = (s - 1) // 2
    k = s - 2 * l
    return i, j, k, l


def _normalize(arr, rows, n_t, name):
    """Coerce user input to the (rows, m) layout with m in {1, n_t}."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 0:
        raise LayoutError(f"{name}: scalar must be expanded before normalization")
    if a.ndim == 1:
        if a.size == rows:
            a = a.reshape(rows, 1)
        elif rows == 1 and a.size == n_t:
            a = a.reshape(1, n_t)
        else:
            raise LayoutError(f"{name}: cannot interpret 1-d array of length {a.size} "
                              f"(expected {rows} rows)")
    if a.shape[0] != rows or a.shape[1] not in (1, n_t):
        raise LayoutError(f"{name}: expected shape ({rows}, 1 or {n_t}), got {a.shape}")
    return a


def expand_c(c, N, n_t):
    """Accept scalar (isotropic identity), the isotropic N x N-of-scalars
    encoding, or the full 4N^2 layout."""
    c = np.asarray(c, dtype=float)
    if c.ndim == 0 or (c.ndim == 1 and c.size == n_t and N >= 1 and c.size != 4 * N * N):
        vals = np.atleast_1d(c)
        m = vals.size
        out = np.zeros((4 * N * N, m))
        for i in range(1, N + 1):
            out[c_row(i, i, 1, 1, N)] = vals
            out[c_row(i, i, 2, 2, N)] = vals
        return out
    if c.ndim in (2, 3) and c.shape[0] == N and c.shape[1] == N:
        return isotropic_c(c, N, n_t)
    return _normalize(c, 4 * N * N, n_t, "c")


def isotropic_c(sigma, N, n_t):
    """Expand sigma_ij (each entry meaning sigma_ij * I_2) to the full c layout."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        sigma = sigma[:, :, None]
    if sigma.shape[:2] != (N, N) or sigma.shape[2] not in (1, n_t):
        raise LayoutError(f"isotropic c: expected ({N},{N},1|{n_t}), got {sigma.shape}")
    m = sigma.shape[2]
    out = np.zeros((4 * N * N, m))
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            out[c_row(i, j, 1, 1, N)] = sigma[i - 1, j - 1]
            out[c_row(i, j, 2, 2, N)] = sigma[i - 1, j - 1]
    return out


def expand_a(a, N, n_t):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        out = np.zeros((N * N, 1))
        for i in range(1, N + 1):
            out[a_row(i, i, N)] = float(a)
        return out
    if a.ndim in (2, 3) and a.shape[0] == N and a.shape[1] == N and N * N != a.shape[0]:
        if a.ndim == 2:
            a = a[:, :, None]
        out = np.zeros((N * N, a.shape[2]))
        for i in range(1, N + 1):
            for j in range(1, N + 1):
                out[a_row(i, j, N)] = a[i - 1, j - 1]
        return out
    return _normalize(a, N * N, n_t, "a")


def expand_b(b, N, n_t):
    b = np.asarray(b, dtype=float)
    if b.ndim == 0:
        if float(b) != 0.0:
            raise LayoutError("scalar b must be 0")
        return np.zeros((2 * N * N, 1))
    return _normalize(b, 2 * N * N, n_t, "b")


def expand_f(f, N, n_t):
    f = np.asarray(f, dtype=float)
    if f.ndim == 0:
        return np.full((N, 1), float(f))
    return _normalize(f, N, n_t, "f")


@dataclass
class CoefficientSet:
    """(c, a, f, b) fields in the exact row layouts above."""
    N: int
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    f: np.ndarray

    @classmethod
    def from_user(cls, N, n_t, c, a, f, b):
        return cls(N, expand_c(c, N, n_t), expand_a(a, N, n_t),
                   expand_b(b, N, n_t), expand_f(f, N, n_t))

    def validate(self, n_t):
        N = self.N
        for name, arr, rows in (("c", self.c, 4 * N * N), ("a", self.a, N * N),
                                ("b", self.b, 2 * N * N), ("f", self.f, N)):
            if arr.shape[0] != rows or arr.shape[1] not in (1, n_t):
                raise LayoutError(f"{name}: bad shape {arr.shape} for N={N}, n_t={n_t}")
        return self

    def dump(self, path):
        """Debug dump: row-major text arrays in the exact layouts."""
        with open(path, "w") as fh:
            fh.write(f"N {self.N}\n")
            for name in ("c", "a", "b", "f"):
                arr = getattr(self, name)
                fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
                for row in arr:
                    fh.write(" ".join(repr(v) for v in row) + "\n")


@dataclass
class JacobianCoefficients:
    """Jacobian data in the convention 'compute fu as if a were 0'."""
    N: int
    c: np.ndarray
    fu: np.ndarray     # N^2 rows, layout of a
    flam: np.ndarray   # N rows, layout of f
    b: np.ndarray

    @classmethod
    def from_user(cls, N, n_t, c, fu, flam, b):
        return cls(N, expand_c(c, N, n_t), expand_a(fu, N, n_t),
                   expand_f(flam, N, n_t), expand_b(b, N, n_t))


@dataclass
class BoundaryConditionSet:
    """Per-segment (q, g) pairs for n.(c grad u) + q u = g.

    Entries are constants (shapes (N, N) and (N,)) or callables
    fn(x, y, u, ux, uy, lam) returning arrays broadcastable to
    (N, N, m) resp. (N, m) at the m edge midpoints of the segment.
    """
    N: int
    entries: list  # length segment_count, items (q, g)

    def entry(self, label):
        if not (1 <= label <= len(self.entries)):
            raise LayoutError(f"no boundary condition for segment {label}")
        return self.entries[label - 1]


def neumann_bc(N, segment_count):
    """Zero-flux boundary: q = 0, g = 0 on every segment."""
    return BoundaryConditionSet(N, [(np.zeros((N, N)), np.zeros(N))] * segment_count)


def stiff_spring_dirichlet(N, segment_count, qs, g=None):
    """Robin approximation of Dirichlet data: q = qs*I, load qs*g."""
    q = qs * np.eye(N)
    entries = []
    for _ in range(segment_count):
        if g is None:
            entries.append((q, np.zeros(N)))
        elif callable(g):
            entries.append((q, g))
        else:
            entries.append((q, qs * np.asarray(g, dtype=float)))
    return BoundaryConditionSet(N, entries)


@dataclass
class AssembledSystem:
    K: sp.csr_matrix
    M: sp.csr_matrix
    F: np.ndarray
    B: sp.csr_matrix


# -- assemblers ---------------------------------------------------------------

_MASS_PATTERN = np.array([[2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]]) / 12.0


def _coo_to_csr(rows, cols, vals, n):
    m = sp.coo_matrix((np.concatenate(vals),
                       (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
    return m.tocsr()


def assemble_mass(mesh, N=1):
    """Exact P1 mass matrix, block-diagonal over components."""
    n_p = mesh.n_points
    tri = mesh.triangles
    rows, cols, vals = [], [], []
    for p in range(3):
        for q in range(3):
            rows.append(tri[:, p])
            cols.append(tri[:, q])
            vals.append(mesh.areas * _MASS_PATTERN[p, q])
    M1 = _coo_to_csr(rows, cols, vals, n_p)
    if N == 1:
        return M1
    return sp.block_diag([M1] * N, format="csr")


def _col(arr, row, n_t):
    v = arr[row]
    return v if v.size == n_t else v[0]


def assemble_stiffness(mesh, c, N=None):
    """Entries int grad phi_p . (c_ij.. grad phi_q) with c at the centroids."""
    if N is None:
        c = np.asarray(c, dtype=float)
        if c.ndim == 0:
            N = 1
        else:
            N = int(round((c.shape[0] / 4) ** 0.5)) or 1
    n_t = mesh.n_triangles
    c = expand_c(c, N, n_t)
    n_p = mesh.n_points
    g = mesh.basis_gradients
    area = mesh.areas
    tri = mesh.triangles
    rows, cols, vals = [], [], []
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            c11 = _col(c, c_row(i, j, 1, 1, N), n_t)
            c12 = _col(c, c_row(i, j, 1, 2, N), n_t)
            c21 = _col(c, c_row(i, j, 2, 1, N), n_t)
            c22 = _col(c, c_row(i, j, 2, 2, N), n_t)
            if (np.all(c11 == 0) and np.all(c12 == 0)
                    and np.all(c21 == 0) and np.all(c22 == 0)):
                continue
            ri = (i - 1) * n_p
            rj = (j - 1) * n_p
            for p in range(3):
                mx = c11 * g[:, p, 0] + c21 * g[:, p, 1]
                my = c12 * g[:, p, 0] + c22 * g[:, p, 1]
                for q in range(3):
                    rows.append(ri + tri[:, p])
                    cols.append(rj + tri[:, q])
                    vals.append(area * (mx * g[:, q, 0] + my * g[:, q, 1]))
    if not rows:
        return sp.csr_matrix((N * n_p, N * n_p))
    return _coo_to_csr(rows, cols, vals, N * n_p)


def assemble_a_term(mesh, a, N):
    """a-term matrix: a at centroids times the exact element mass matrix."""
    n_t = mesh.n_triangles
    a = expand_a(a, N, n_t)
    n_p = mesh.n_points
    tri = mesh.triangles
    area = mesh.areas
    rows, cols, vals = [], [], []
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            aij = _col(a, a_row(i, j, N), n_t)
            if np.all(aij == 0):
                continue
            ri = (i - 1) * n_p
            rj = (j - 1) * n_p
            for p in range(3):
                for q in range(3):
                    rows.append(ri + tri[:, p])
                    cols.append(rj + tri[:, q])
                    vals.append(area * aij * _MASS_PATTERN[p, q])
    if not rows:
        return sp.csr_matrix((N * n_p, N * n_p))
    return _coo_to_csr(rows, cols, vals, N * n_p)


def assemble_advection(mesh, b, N=None):
    """Entries int phi_p (b_ij . grad phi_q) with b at the centroids."""
    b = np.asarray(b, dtype=float)
    if N is None:
        N = 1 if b.ndim == 0 else int(round((b.shape[0] / 2) ** 0.5)) or 1
    n_t = mesh.n_triangles
    b = expand_b(b, N, n_t)
    n_p = mesh.n_points
    tri = mesh.triangles
    area = mesh.areas
    rows, cols, vals = [], [], []
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            b1 = _col(b, b_row(i, j, 1, N), n_t)
            b2 = _col(b, b_row(i, j, 2, N), n_t)
            if np.all(b1 == 0) and np.all(b2 == 0):
                continue
            ri = (i - 1) * n_p
            rj = (j - 1) * n_p
            g = mesh.basis_gradients
            for q in range(3):
                bq = (area / 3.0) * (b1 * g[:, q, 0] + b2 * g[:, q, 1])
                for p in range(3):
                    rows.append(ri + tri[:, p])
                    cols.append(rj + tri[:, q])
                    vals.append(bq)
    if not rows:
        return sp.csr_matrix((N * n_p, N * n_p))
    return _coo_to_csr(rows, cols, vals, N * n_p)


def assemble_load(mesh, f, N=None):
    """Load vector: centroid value times area/3 to each vertex, per component."""
    f = np.asarray(f, dtype=float)
    if N is None:
        N = 1 if f.ndim <= 1 else f.shape[0]
    n_t = mesh.n_triangles
    f = expand_f(f, N, n_t)
    n_p = mesh.n_points
    F = np.zeros(N * n_p)
    for i in range(N):
        contrib = (mesh.areas / 3.0) * _col(f, i, n_t)
        for p in range(3):
            np.add.at(F, i * n_p + mesh.triangles[:, p], contrib)
    return F


def _eval_bc_entry(entry, N, x, y, u_mid, ux_mid, uy_mid, lam, shape):
    if callable(entry):
        val = np.asarray(entry(x, y, u_mid, ux_mid, uy_mid, lam), dtype=float)
    else:
        val = np.asarray(entry, dtype=float)
    target = shape + (x.size,)
    if val.shape == target:
        return val
    if val.shape == shape:  # constant per midpoint
        return np.broadcast_to(val[..., None], target)
    try:
        return np.broadcast_to(val, target)
    except ValueError as exc:
        raise LayoutError(f"boundary entry with shape {val.shape} does not fit "
                          f"{target}") from exc


def assemble_bc(mesh, bcset, u=None, lam=0.0):
    """Boundary contributions of the generalized Neumann condition.

    Returns (K_q, G_g): 1-d edge mass weighted by q at the edge midpoints plus
    the load h/2 * g at the edge nodes.  Formula entries receive x, y, u and
    grad u interpolated to the midpoints, and lam.
    """
    N = bcset.N
    n_p = mesh.n_points
    n = N * n_p
    if u is None:
        u = np.zeros(n)
    ucomp = np.asarray(u, dtype=float).reshape(N, n_p)
    ux, uy = gradients(mesh, u)
    rows, cols, vals = [], [], []
    G = np.zeros(n)
    labels = mesh.edges[:, 2]
    for lbl in range(1, mesh.segment_count + 1):
        sel = np.nonzero(labels == lbl)[0]
        if sel.size == 0:
            continue
        a = mesh.edges[sel, 0]
        b = mesh.edges[sel, 1]
        pa, pb = mesh.points[a], mesh.points[b]
        h = np.hypot(*(pb - pa).T)
        mid = 0.5 * (pa + pb)
        owner = mesh.boundary_edge_tri[sel]
        u_mid = 0.5 * (ucomp[:, a] + ucomp[:, b])
        ux_mid, uy_mid = ux[:, owner], uy[:, owner]
        q_ent, g_ent = bcset.entry(lbl)
        qv = _eval_bc_entry(q_ent, N, mid[:, 0], mid[:, 1], u_mid, ux_mid, uy_mid,
                            lam, (N, N))
        gv = _eval_bc_entry(g_ent, N, mid[:, 0], mid[:, 1], u_mid, ux_mid, uy_mid,
                            lam, (N,))
        edge_mass = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
        nodes = (a, b)
        for i in range(N):
            for j in range(N):
                qij = qv[i, j]
                if np.all(qij == 0):
                    continue
                for p in range(2):
                    for r in range(2):
                        rows.append(i * n_p + nodes[p])
                        cols.append(j * n_p + nodes[r])
                        vals.append(h * qij * edge_mass[p, r])
            gi = gv[i]
            np.add.at(G, i * n_p + a, 0.5 * h * gi)
            np.add.at(G, i * n_p + b, 0.5 * h * gi)
    if rows:
        Kq = _coo_to_csr(rows, cols, vals, n)
    else:
        Kq = sp.csr_matrix((n, n))
    return Kq, G


def assemble_system(problem, mesh, u, lam):
    """Full assembled system: K = K_c + K_a + K_q - B and F = F_f + G_g."""
    n_t = mesh.n_triangles
    cs = problem.coeff_fn(mesh, u, lam)
    if not isinstance(cs, CoefficientSet):
        cs = CoefficientSet.from_user(problem.neq, n_t, *cs)
    cs.validate(n_t)
    N = cs.N
    bc = problem.bc_fn(mesh, u, lam)
    Kc = assemble_stiffness(mesh, cs.c, N)
    Ka = assemble_a_term(mesh, cs.a, N)
    B = assemble_advection(mesh, cs.b, N)
    Kq, Gg = assemble_bc(mesh, bc, u, lam)
    K = (Kc + Ka + Kq - B).tocsr()
    F = assemble_load(mesh, cs.f, N) + Gg
    M = assemble_mass(mesh, N)
    return AssembledSystem(K=K, M=M, F=F, B=B.tocsr())

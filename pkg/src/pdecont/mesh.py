"""Triangular P1 meshes: construction, interpolation, refinement, error indicator.

Conventions: node coordinates are float64 (n_p, 2); triangles are 0-based CCW
index triples (n_t, 3); boundary edges are rows (node_a, node_b, label) with
1-based segment labels.  All per-component nodal fields are stored flat, with
component k occupying entries [k*n_p, (k+1)*n_p).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


class MeshError(ValueError):
    """Raised for invalid mesh data (orientation, incidence, labels)."""


def _as_components(u, n_p):
    u = np.asarray(u, dtype=float).ravel()
    if u.size % n_p != 0:
        raise MeshError(f"field length {u.size} is not a multiple of n_p={n_p}")
    return u.reshape(u.size // n_p, n_p)


class Mesh:
    """Immutable triangulation of a planar domain.

    Geometry helpers (areas, basis gradients, edge tables) are cached on first
    use; instances must not be mutated after construction.
    """

    def __init__(self, points, edges, triangles, segment_count=None, validate=True):
        self.points = np.ascontiguousarray(points, dtype=float)
        self.edges = np.ascontiguousarray(edges, dtype=np.int64)
        self.triangles = np.ascontiguousarray(triangles, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[1] != 2:
            raise MeshError("points must have shape (n_p, 2)")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise MeshError("triangles must have shape (n_t, 3)")
        if self.edges.ndim != 2 or self.edges.shape[1] != 3:
            raise MeshError("edges must have shape (n_e, 3)")
        if segment_count is None:
            segment_count = int(self.edges[:, 2].max()) if len(self.edges) else 0
        self.segment_count = int(segment_count)
        if validate:
            self._validate()

    @property
    def n_points(self):
        return self.points.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    @property
    def n_edges(self):
        return self.edges.shape[0]

    # -- cached geometry ---------------------------------------------------

    @cached_property
    def signed_areas(self):
        p = self.points
        a, b, c = (p[self.triangles[:, k]] for k in range(3))
        return 0.5 * ((b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1])
                      - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0]))

    @cached_property
    def areas(self):
        return np.abs(self.signed_areas)

    @cached_property
    def centroids(self):
        return self.points[self.triangles].mean(axis=1)

    @cached_property
    def basis_gradients(self):
        """Gradients of the three P1 hat functions per triangle, shape (n_t, 3, 2)."""
        p = self.points
        tri = self.triangles
        g = np.empty((self.n_triangles, 3, 2))
        two_a = 2.0 * self.signed_areas
        for k in range(3):
            q = p[tri[:, (k + 1) % 3]]
            r = p[tri[:, (k + 2) % 3]]
            g[:, k, 0] = (q[:, 1] - r[:, 1]) / two_a
            g[:, k, 1] = (r[:, 0] - q[:, 0]) / two_a
        return g

    @cached_property
    def longest_edge(self):
        p = self.points
        tri = self.triangles
        h = np.zeros(self.n_triangles)
        for k in range(3):
            d = p[tri[:, (k + 1) % 3]] - p[tri[:, k]]
            h = np.maximum(h, np.hypot(d[:, 0], d[:, 1]))
        return h

    @cached_property
    def _edge_incidence(self):
        """Map sorted node pair -> list of incident triangle indices."""
        table: dict[tuple[int, int], list[int]] = {}
        for t, (a, b, c) in enumerate(self.triangles):
            for u, v in ((a, b), (b, c), (c, a)):
                key = (u, v) if u < v else (v, u)
                table.setdefault(key, []).append(t)
        return table

    @cached_property
    def interior_edges(self):
        """Interior edges as rows (a, b, tri_left, tri_right)."""
        rows = [(a, b, ts[0], ts[1])
                for (a, b), ts in sorted(self._edge_incidence.items()) if len(ts) == 2]
        return np.array(rows, dtype=np.int64).reshape(-1, 4)

    @cached_property
    def boundary_edge_tri(self):
        """Owning triangle index for every listed boundary edge."""
        out = np.empty(self.n_edges, dtype=np.int64)
        for i, (a, b, _lbl) in enumerate(self.edges):
            key = (a, b) if a < b else (b, a)
            out[i] = self._edge_incidence[key][0]
        return out

    @cached_property
    def node_triangles(self):
        """CSR-style adjacency: (indptr, tri_indices) of triangles incident to each node."""
        counts = np.bincount(self.triangles.ravel(), minlength=self.n_points)
        indptr = np.concatenate(([0], np.cumsum(counts)))
        order = np.argsort(self.triangles.ravel(), kind="stable")
        return indptr, order // 3

    def _validate(self):
        n_p = self.n_points
        if (self.triangles < 0).any() or (self.triangles >= n_p).any():
            raise MeshError("triangle node index out of range")
        if (self.signed_areas <= 0).any():
            bad = int(np.argmax(self.signed_areas <= 0))
            raise MeshError(f"triangle {bad} has non-positive (negative area) orientation")
        counts = {k: len(v) for k, v in self._edge_incidence.items()}
        if any(c > 2 for c in counts.values()):
            raise MeshError("edge shared by more than two triangles")
        boundary = {k for k, c in counts.items() if c == 1}
        listed = set()
        for a, b, lbl in self.edges:
            key = (int(a), int(b)) if a < b else (int(b), int(a))
            if key not in counts:
                raise MeshError(f"dangling edge {key}: not an edge of any triangle")
            if key not in boundary:
                raise MeshError(f"edge {key} is interior but listed as boundary")
            if key in listed:
                raise MeshError(f"boundary edge {key} listed twice")
            listed.add(key)
            if not (1 <= lbl <= self.segment_count):
                raise MeshError(f"edge label {lbl} outside 1..{self.segment_count}")
        missing = boundary - listed
        if missing:
            raise MeshError(f"{len(missing)} boundary edges carry no segment label")


def make_rect_mesh(lx, ly, nx, ny):
    """Structured mesh of [-lx, lx] x [-ly, ly] with nx*ny grid points.

    Every cell is split along the same (lower-left to upper-right) diagonal;
    boundary segments are labeled 1..4 counterclockwise starting at the bottom.
    """
    if nx < 2 or ny < 2:
        raise MeshError("make_rect_mesh requires nx >= 2 and ny >= 2")
    xs = np.linspace(-lx, lx, nx)
    ys = np.linspace(-ly, ly, ny)
    X, Y = np.meshgrid(xs, ys)  # row j = constant y
    points = np.column_stack([X.ravel(), Y.ravel()])

    def nid(i, j):
        return j * nx + i

    tris = []
    for j in range(ny - 1):
        for i in range(nx - 1):
            p00, p10 = nid(i, j), nid(i + 1, j)
            p01, p11 = nid(i, j + 1), nid(i + 1, j + 1)
            tris.append((p00, p10, p11))
            tris.append((p00, p11, p01))

    edges = []
    for i in range(nx - 1):  # bottom, left to right
        edges.append((nid(i, 0), nid(i + 1, 0), 1))
    for j in range(ny - 1):  # right, bottom to top
        edges.append((nid(nx - 1, j), nid(nx - 1, j + 1), 2))
    for i in range(nx - 1, 0, -1):  # top, right to left
        edges.append((nid(i, ny - 1), nid(i - 1, ny - 1), 3))
    for j in range(ny - 1, 0, -1):  # left, top to bottom
        edges.append((nid(0, j), nid(0, j - 1), 4))

    return Mesh(points, np.array(edges), np.array(tris), segment_count=4)


def export_mesh(mesh, path):
    """Write the documented text format: header 'n_p n_t n_e', then points,
    1-based triangles, and labeled boundary edges."""
    lines = [f"{mesh.n_points} {mesh.n_triangles} {mesh.n_edges}"]
    for x, y in mesh.points:
        lines.append(f"{float(x)!r} {float(y)!r}")
    for i, j, k in mesh.triangles:
        lines.append(f"{i + 1} {j + 1} {k + 1}")
    for a, b, lbl in mesh.edges:
        lines.append(f"{a + 1} {b + 1} {lbl}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def import_mesh(path):
    """Read the text format written by export_mesh and validate the result."""
    with open(path) as fh:
        tokens = fh.read().split()
    try:
        n_p, n_t, n_e = (int(t) for t in tokens[:3])
        need = 3 + 2 * n_p + 3 * n_t + 3 * n_e
        if len(tokens) < need:
            raise ValueError(f"expected {need} tokens, found {len(tokens)}")
        pos = 3
        pts = np.array(tokens[pos:pos + 2 * n_p], dtype=float).reshape(n_p, 2)
        pos += 2 * n_p
        tris = np.array(tokens[pos:pos + 3 * n_t], dtype=int).reshape(n_t, 3) - 1
        pos += 3 * n_t
        edges = np.array(tokens[pos:pos + 3 * n_e], dtype=int).reshape(n_e, 3)
        edges[:, :2] -= 1
    except ValueError as exc:
        raise MeshError(f"cannot parse mesh file {path}: {exc}") from exc
    return Mesh(pts, edges, tris)


# -- nodal / per-triangle transfer ------------------------------------------

def interp_node_to_tri(mesh, u_nodal):
    """Centroid values (mean of the three vertices) per component, shape (N, n_t)."""
    u = _as_components(u_nodal, mesh.n_points)
    return u[:, mesh.triangles].mean(axis=2)


def interp_tri_to_node(mesh, v_tri):
    """Area-weighted average of adjacent triangle values to nodes."""
    v = np.atleast_2d(np.asarray(v_tri, dtype=float))
    if v.shape[1] != mesh.n_triangles:
        raise MeshError(f"expected {mesh.n_triangles} triangle columns, got {v.shape[1]}")
    areas = mesh.areas
    den = np.zeros(mesh.n_points)
    num = np.zeros((v.shape[0], mesh.n_points))
    for k in range(3):
        idx = mesh.triangles[:, k]
        np.add.at(den, idx, areas)
        for comp in range(v.shape[0]):
            np.add.at(num[comp], idx, areas * v[comp])
    out = num / den
    return out[0] if np.asarray(v_tri).ndim == 1 else out


def gradients(mesh, u_nodal):
    """Constant P1 gradient per triangle: (ux, uy), each of shape (N, n_t)."""
    u = _as_components(u_nodal, mesh.n_points)
    vals = u[:, mesh.triangles]  # (N, n_t, 3)
    g = mesh.basis_gradients
    ux = np.einsum("ntk,tk->nt", vals, g[:, :, 0])
    uy = np.einsum("ntk,tk->nt", vals, g[:, :, 1])
    return ux, uy


def triint(mesh, u_nodal):
    """Riemann sum: sum of area * centroid value, per component."""
    vals = interp_node_to_tri(mesh, u_nodal)
    out = vals @ mesh.areas
    return float(out[0]) if out.shape[0] == 1 else out


# -- cross-mesh interpolation ------------------------------------------------

def locate_points(mesh, query, clamp=True):
    """Find containing triangles and barycentric weights for query points.

    Points outside the mesh are clamped to the nearest triangle (by centroid)
    with weights clipped and renormalized; clamped entries are flagged.
    """
    from matplotlib.tri import Triangulation

    query = np.asarray(query, dtype=float).reshape(-1, 2)
    tri = Triangulation(mesh.points[:, 0], mesh.points[:, 1], mesh.triangles)
    finder = tri.get_trifinder()
    idx = np.asarray(finder(query[:, 0], query[:, 1]), dtype=np.int64)
    outside = idx < 0
    if outside.any():
        if not clamp:
            raise MeshError(f"{int(outside.sum())} query points outside the mesh")
        cent = mesh.centroids
        for k in np.nonzero(outside)[0]:
            d = np.hypot(cent[:, 0] - query[k, 0], cent[:, 1] - query[k, 1])
            idx[k] = int(np.argmin(d))
    corners = mesh.points[mesh.triangles[idx]]  # (m, 3, 2)
    v0 = corners[:, 1] - corners[:, 0]
    v1 = corners[:, 2] - corners[:, 0]
    vq = query - corners[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    w1 = (vq[:, 0] * v1[:, 1] - vq[:, 1] * v1[:, 0]) / det
    w2 = (v0[:, 0] * vq[:, 1] - v0[:, 1] * vq[:, 0]) / det
    bary = np.column_stack([1.0 - w1 - w2, w1, w2])
    if outside.any():
        bary[outside] = np.clip(bary[outside], 0.0, None)
        bary[outside] /= bary[outside].sum(axis=1, keepdims=True)
    return idx, bary, outside


def interpolate_to_points(mesh, u_nodal, query):
    """Evaluate the P1 interpolant of a nodal field at arbitrary points.

    Returns (values flat over components, clamped flag array).
    """
    u = _as_components(u_nodal, mesh.n_points)
    idx, bary, outside = locate_points(mesh, query)
    nodes = mesh.triangles[idx]  # (m, 3)
    vals = np.einsum("cmk,mk->cm", u[:, nodes], bary)
    return vals.ravel(), outside


# -- error indicator ---------------------------------------------------------

@dataclass
class ErrorEstimate:
    """Per-triangle indicator values with the max as global error measure."""
    per_triangle: np.ndarray
    err: float
    alpha: float
    beta: float
    edge_jumps: np.ndarray = field(default=None, repr=False)  # h_tau^2 (jump)^2 per interior edge

    @property
    def n_triangles(self):
        return self.per_triangle.size


def error_indicator(mesh, coeffs, u_nodal, alpha=0.15, beta=0.15):
    """Residual/flux-jump indicator per triangle.

    E(K) = alpha * ||h (f - a u)||_K + beta * (0.5 sum_edges h^2 (jump n.c grad u)^2)^(1/2)
    with the advection term folded into f (f_eff = f + b grad u) and boundary
    edges contributing no jump.
    """
    N = coeffs.N
    n_t = mesh.n_triangles
    utri = interp_node_to_tri(mesh, u_nodal)
    ux, uy = gradients(mesh, u_nodal)

    def cval(i, j, k, l):
        from .assembly import c_row
        row = coeffs.c[c_row(i, j, k, l, N)]
        return row if row.size == n_t else np.full(n_t, row[0])

    def aval(i, j):
        from .assembly import a_row
        row = coeffs.a[a_row(i, j, N)]
        return row if row.size == n_t else np.full(n_t, row[0])

    def bval(i, j, k):
        from .assembly import b_row
        row = coeffs.b[b_row(i, j, k, N)]
        return row if row.size == n_t else np.full(n_t, row[0])

    f = coeffs.f if coeffs.f.shape[1] == n_t else np.repeat(coeffs.f, n_t, axis=1)
    # residual term with b grad u folded into f
    resid2 = np.zeros(n_t)
    for i in range(1, N + 1):
        r = f[i - 1].copy()
        for j in range(1, N + 1):
            r += bval(i, j, 1) * ux[j - 1] + bval(i, j, 2) * uy[j - 1]
            r -= aval(i, j) * utri[j - 1]
        resid2 += r * r
    term1 = mesh.longest_edge * np.sqrt(mesh.areas) * np.sqrt(resid2)

    # flux per triangle and component: (N, 2, n_t)
    flux = np.zeros((N, 2, n_t))
    for i in range(1, N + 1):
        for j in range(1, N + 1):
            flux[i - 1, 0] += cval(i, j, 1, 1) * ux[j - 1] + cval(i, j, 1, 2) * uy[j - 1]
            flux[i - 1, 1] += cval(i, j, 2, 1) * ux[j - 1] + cval(i, j, 2, 2) * uy[j - 1]

    jump_sq = np.zeros(n_t)
    iedges = mesh.interior_edges
    edge_terms = np.zeros(len(iedges))
    if len(iedges):
        a, b, tl, tr = iedges.T
        d = mesh.points[b] - mesh.points[a]
        h_e = np.hypot(d[:, 0], d[:, 1])
        n_e = np.column_stack([d[:, 1], -d[:, 0]]) / h_e[:, None]
        jump2 = np.zeros(len(iedges))
        for i in range(N):
            jl = n_e[:, 0] * flux[i, 0, tl] + n_e[:, 1] * flux[i, 1, tl]
            jr = n_e[:, 0] * flux[i, 0, tr] + n_e[:, 1] * flux[i, 1, tr]
            jump2 += (jl - jr) ** 2
        edge_terms = h_e ** 2 * jump2
        np.add.at(jump_sq, tl, edge_terms)
        np.add.at(jump_sq, tr, edge_terms)

    per_tri = alpha * term1 + beta * np.sqrt(0.5 * jump_sq)
    return ErrorEstimate(per_tri, float(per_tri.max()) if n_t else 0.0, alpha, beta, edge_terms)


# -- refinement ---------------------------------------------------------------

@dataclass
class RefinementMap:
    """Barycentric provenance of new-mesh nodes inside the old mesh."""
    n_old: int
    n_new: int
    parent_tri: np.ndarray    # (n_new,) triangle of the old mesh
    weights: np.ndarray       # (n_new, 3) barycentric weights, nonnegative, sum 1

    def attach(self, old_triangles):
        self._old_triangles = np.asarray(old_triangles)
        return self

    def interpolate(self, u_nodal):
        """Push a (possibly multi-component) nodal field through the map."""
        u = _as_components(u_nodal, self.n_old)
        nodes = self._old_triangles[self.parent_tri]  # (n_new, 3)
        vals = np.einsum("cmk,mk->cm", u[:, nodes], self.weights)
        return vals.ravel()


def refine(mesh, marked):
    """Red refinement of marked triangles with green closure for conformity.

    Returns (new Mesh, RefinementMap).  Unmarked triangles adjacent to split
    edges are bisected (green) or promoted to red when two or more of their
    edges got split.
    """
    if mesh.n_triangles == 0:
        raise MeshError("cannot refine an empty mesh")
    marked = np.asarray(sorted(set(int(m) for m in marked)), dtype=int)
    if marked.size and (marked.min() < 0 or marked.max() >= mesh.n_triangles):
        raise MeshError("marked triangle index out of range")
    red = np.zeros(mesh.n_triangles, dtype=bool)
    red[marked] = True

    def tri_edges(t):
        a, b, c = mesh.triangles[t]
        return [tuple(sorted((a, b))), tuple(sorted((b, c))), tuple(sorted((c, a)))]

    split: set[tuple[int, int]] = set()
    while True:
        for t in np.nonzero(red)[0]:
            split.update(tri_edges(t))
        changed = False
        for t in np.nonzero(~red)[0]:
            if sum(e in split for e in tri_edges(t)) >= 2:
                red[t] = True
                changed = True
        if not changed:
            break

    if not split:
        identity = RefinementMap(
            mesh.n_points, mesh.n_points,
            parent_tri=_node_owner_tris(mesh),
            weights=_node_owner_weights(mesh),
        ).attach(mesh.triangles)
        return mesh, identity

    n_old = mesh.n_points
    midpoint: dict[tuple[int, int], int] = {}
    new_points = [mesh.points]
    for e in sorted(split):
        midpoint[e] = n_old + len(midpoint)
        new_points.append(0.5 * (mesh.points[e[0]] + mesh.points[e[1]])[None, :])
    points = np.vstack(new_points)

    tris = []
    for t in range(mesh.n_triangles):
        a, b, c = mesh.triangles[t]
        es = tri_edges(t)
        mids = [midpoint.get(e) for e in es]
        n_split = sum(m is not None for m in mids)
        if red[t]:
            mab, mbc, mca = mids
            tris += [(a, mab, mca), (mab, b, mbc), (mca, mbc, c), (mab, mbc, mca)]
        elif n_split == 0:
            tris.append((a, b, c))
        else:  # green bisection across the single split edge
            k = next(i for i, m in enumerate(mids) if m is not None)
            v = (a, b, c)
            p, q, r = v[k], v[(k + 1) % 3], v[(k + 2) % 3]
            m = mids[k]
            tris += [(p, m, r), (m, q, r)]
    tris = np.array(tris, dtype=np.int64)

    edges = []
    for a, b, lbl in mesh.edges:
        key = (int(a), int(b)) if a < b else (int(b), int(a))
        m = midpoint.get(key)
        if m is None:
            edges.append((a, b, lbl))
        else:
            edges.append((a, m, lbl))
            edges.append((m, b, lbl))
    edges = np.array(edges, dtype=np.int64)

    parent = np.empty(len(points), dtype=np.int64)
    weights = np.zeros((len(points), 3))
    parent[:n_old] = _node_owner_tris(mesh)
    weights[:n_old] = _node_owner_weights(mesh)
    for (ea, eb), m in midpoint.items():
        t = mesh._edge_incidence[(ea, eb)][0]
        parent[m] = t
        loc = list(mesh.triangles[t])
        weights[m, loc.index(ea)] = 0.5
        weights[m, loc.index(eb)] = 0.5
    rmap = RefinementMap(n_old, len(points), parent, weights).attach(mesh.triangles)
    return Mesh(points, edges, tris, segment_count=mesh.segment_count), rmap


def _node_owner_tris(mesh):
    indptr, tri_idx = mesh.node_triangles
    return tri_idx[indptr[:-1]]


def _node_owner_weights(mesh):
    owners = _node_owner_tris(mesh)
    w = np.zeros((mesh.n_points, 3))
    for node in range(mesh.n_points):
        loc = list(mesh.triangles[owners[node]])
        w[node, loc.index(node)] = 1.0
    return w


def mark_by_error(est, strategy="max_fraction", theta=0.5, maxt=None):
    """Select triangles to refine.

    strategy "max_fraction": all K with E(K) >= theta * max E (ties included).
    strategy "budget": largest-E triangles first until the projected triangle
    count (3 new per marked triangle) reaches maxt.
    """
    e = est.per_triangle
    if strategy == "max_fraction":
        if e.size == 0 or e.max() == 0.0:
            return np.arange(e.size)
        return np.nonzero(e >= theta * e.max())[0]
    if strategy == "budget":
        if maxt is None:
            raise ValueError("budget strategy requires maxt")
        n_t = e.size
        n_mark = max(0, int((maxt - n_t) // 3))
        if n_mark == 0:
            return np.array([], dtype=int)
        order = np.argsort(-e, kind="stable")
        return np.sort(order[:n_mark])
    raise ValueError(f"unknown marking strategy {strategy!r}")


@dataclass
class AdaptResult:
    mesh: "Mesh"
    fields: dict
    estimate: ErrorEstimate | None
    clamped: bool
    passes: int


def adapt(mesh, base_mesh, fields, est_fn, maxt=100000, ngen=3, eb=np.inf):
    """Coarsen-by-interpolation to the base mesh, then refine where E(K) is large.

    fields maps name -> flat nodal array (length multiple of n_p); every field
    is carried through interpolation and refinement.  est_fn(mesh, fields)
    must return an ErrorEstimate for the primary field.  Refinement stops when
    err <= eb/2, after ngen passes, or at the triangle budget maxt.
    """
    clamped = False
    if base_mesh is not mesh:
        new_fields = {}
        for name, u in fields.items():
            vals, outside = interpolate_to_points(mesh, u, base_mesh.points)
            clamped = clamped or bool(outside.any())
            new_fields[name] = vals
        fields = new_fields
        mesh = base_mesh

    est = est_fn(mesh, fields)
    passes = 0
    while passes < int(ngen) and est.err > eb / 2.0 and mesh.n_triangles < maxt:
        marked = mark_by_error(est, "budget", maxt=min(maxt, 4 * mesh.n_triangles))
        if marked.size == 0:
            marked = mark_by_error(est, "max_fraction", theta=0.5)
        if marked.size == 0:
            break
        mesh, rmap = refine(mesh, marked)
        fields = {name: rmap.interpolate(u) for name, u in fields.items()}
        passes += 1
        est = est_fn(mesh, fields)
    return AdaptResult(mesh, fields, est, clamped, passes)

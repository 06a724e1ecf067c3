import numpy as np
import pytest

from pdecont.assembly import CoefficientSet
from pdecont.mesh import (Mesh, MeshError, adapt, error_indicator, export_mesh,
                          gradients, import_mesh, interp_node_to_tri,
                          interp_tri_to_node, interpolate_to_points,
                          make_rect_mesh, mark_by_error, refine, triint)


def test_make_rect_mesh_smallest():
    m = make_rect_mesh(0.5, 0.5, 2, 2)
    assert m.n_points == 4
    assert m.n_triangles == 2
    assert m.areas.sum() == pytest.approx(1.0)


def test_make_rect_mesh_800_triangles():
    m = make_rect_mesh(0.5, 0.5, 21, 21)
    assert m.n_points == 21 * 21
    assert m.n_triangles == 800
    assert m.segment_count == 4


def test_make_rect_mesh_area():
    m = make_rect_mesh(1.0, 0.9, 5, 5)
    assert m.areas.sum() == pytest.approx(3.6)


def test_make_rect_mesh_rejects_degenerate():
    with pytest.raises(MeshError):
        make_rect_mesh(1.0, 1.0, 1, 5)


def test_boundary_segments_counterclockwise():
    m = make_rect_mesh(1.0, 1.0, 3, 3)
    mid = 0.5 * (m.points[m.edges[:, 0]] + m.points[m.edges[:, 1]])
    labels = m.edges[:, 2]
    assert np.all(mid[labels == 1][:, 1] == -1.0)  # bottom
    assert np.all(mid[labels == 2][:, 0] == 1.0)   # right
    assert np.all(mid[labels == 3][:, 1] == 1.0)   # top
    assert np.all(mid[labels == 4][:, 0] == -1.0)  # left


def test_import_export_round_trip(tmp_path):
    m = make_rect_mesh(0.3, 0.7, 5, 4)
    path = tmp_path / "mesh.txt"
    export_mesh(m, path)
    m2 = import_mesh(path)
    assert np.array_equal(m.points, m2.points)
    assert np.array_equal(m.triangles, m2.triangles)
    assert np.array_equal(m.edges, m2.edges)


def test_import_rejects_clockwise(tmp_path):
    path = tmp_path / "bad.txt"
    path.write_text("3 1 3\n0 0\n1 0\n0 1\n1 3 2\n1 3 1\n3 2 1\n2 1 1\n")
    with pytest.raises(MeshError, match="area"):
        import_mesh(path)


def test_import_hand_written_square(tmp_path, unit_square_2):
    path = tmp_path / "square.txt"
    export_mesh(unit_square_2, path)
    m = import_mesh(path)
    # hand computation: both triangles have area 1/2
    assert m.areas == pytest.approx([0.5, 0.5])
    assert m.areas.sum() == pytest.approx(1.0)


def test_import_rejects_dangling_edge(tmp_path):
    path = tmp_path / "dangling.txt"
    path.write_text("4 1 2\n0 0\n1 0\n0 1\n2 2\n1 2 3\n1 2 1\n1 4 1\n")
    with pytest.raises(MeshError, match="dangling"):
        import_mesh(path)


# -- interpolation -------------------------------------------------------------

def test_interp_node_to_tri_linear():
    m = make_rect_mesh(0.5, 0.5, 7, 6)
    x, y = m.points.T
    vals = interp_node_to_tri(m, x + y)
    assert np.allclose(vals[0], m.centroids.sum(axis=1))


def test_interp_node_to_tri_constant():
    m = make_rect_mesh(0.5, 0.5, 4, 4)
    assert np.all(interp_node_to_tri(m, 7.0 * np.ones(m.n_points)) == 7.0)


def test_interp_node_to_tri_two_components():
    m = make_rect_mesh(0.5, 0.5, 4, 4)
    u1 = m.points[:, 0]
    u2 = 3.0 * np.ones(m.n_points)
    out = interp_node_to_tri(m, np.concatenate([u1, u2]))
    assert out.shape == (2, m.n_triangles)
    assert np.allclose(out[0], interp_node_to_tri(m, u1)[0])
    assert np.all(out[1] == 3.0)


def test_interp_node_to_tri_length_mismatch():
    m = make_rect_mesh(0.5, 0.5, 4, 4)
    with pytest.raises(MeshError):
        interp_node_to_tri(m, np.ones(m.n_points + 1))


def test_interp_tri_to_node_constant():
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    out = interp_tri_to_node(m, 4.25 * np.ones(m.n_triangles))
    assert np.allclose(out, 4.25)


def test_interp_tri_to_node_equal_area_mean():
    # four equal triangles around one interior node
    pts = [[0, 0], [1, 0], [1, 1], [0, 1], [0.5, 0.5]]
    tris = [[0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]]
    edges = [[0, 1, 1], [1, 2, 2], [2, 3, 3], [3, 0, 4]]
    m = Mesh(pts, edges, tris, segment_count=4)
    out = interp_tri_to_node(m, np.array([1.0, 2.0, 3.0, 4.0]))
    assert out[4] == pytest.approx(2.5)


def test_interp_round_trip_linear_interior():
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    x, y = m.points.T
    u = 2.0 * x - 3.0 * y + 0.25
    back = interp_tri_to_node(m, interp_node_to_tri(m, u)[0])
    interior = ((np.abs(x) < 0.5 - 1e-12) & (np.abs(y) < 0.5 - 1e-12))
    assert np.abs(back[interior] - u[interior]).max() <= 1e-12


# -- gradients and integration ----------------------------------------------------

def test_gradients_linear_exact():
    m = make_rect_mesh(0.5, 0.5, 6, 7)
    x, y = m.points.T
    gx, gy = gradients(m, 2.0 * x + 3.0 * y)
    assert np.allclose(gx, 2.0) and np.allclose(gy, 3.0)


def test_gradients_constant_zero():
    m = make_rect_mesh(0.5, 0.5, 4, 4)
    gx, gy = gradients(m, np.full(m.n_points, 5.5))
    assert np.abs(gx).max() == 0.0 and np.abs(gy).max() == 0.0


def test_gradients_hand_assembly_one_triangle():
    # P1 gradient of u = x^2 on one listed triangle, against the plane through
    # its three vertices computed independently
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    u = m.points[:, 0] ** 2
    t = 7
    nodes = m.triangles[t]
    A = np.column_stack([m.points[nodes], np.ones(3)])
    coef = np.linalg.solve(A, u[nodes])  # plane a x + b y + c
    gx, gy = gradients(m, u)
    assert gx[0, t] == pytest.approx(coef[0], abs=1e-12)
    assert gy[0, t] == pytest.approx(coef[1], abs=1e-12)


def test_triint_constant():
    m = make_rect_mesh(np.pi / 2, np.pi / 2, 9, 9)
    assert triint(m, np.ones(m.n_points)) == pytest.approx(np.pi ** 2)


def test_triint_odd_function():
    m = make_rect_mesh(0.5, 0.5, 8, 8)
    assert triint(m, m.points[:, 0]) == pytest.approx(0.0, abs=1e-14)


def test_triint_linear_two_triangle_square(unit_square_2):
    x, y = unit_square_2.points.T
    assert triint(unit_square_2, x + y) == pytest.approx(1.0)


# -- error indicator ---------------------------------------------------------------

def _coeffs(mesh, c=1.0, a=0.0, f=0.0, b=0.0):
    return CoefficientSet.from_user(1, mesh.n_triangles, c, a, f, b)


def test_error_indicator_zero_for_linear():
    m = make_rect_mesh(0.5, 0.5, 6, 6)
    x, y = m.points.T
    est = error_indicator(m, _coeffs(m), 1.2 * x - 0.7 * y + 2.0)
    assert est.err <= 1e-13
    assert np.all(est.per_triangle <= 1e-13)


def test_error_indicator_homogeneous_in_alpha_beta():
    m = make_rect_mesh(0.5, 0.5, 6, 6)
    x, y = m.points.T
    u = np.sin(3 * x) * y
    cs = _coeffs(m, f=1.5)
    e1 = error_indicator(m, cs, u, alpha=0.15, beta=0.15)
    e2 = error_indicator(m, cs, u, alpha=0.45, beta=0.45)
    assert np.allclose(3.0 * e1.per_triangle, e2.per_triangle)


def test_error_indicator_decreases_under_refinement():
    m = make_rect_mesh(0.5, 0.5, 8, 8)
    x, y = m.points.T
    u = np.sin(2 * np.pi * x) * np.cos(np.pi * y)
    est = error_indicator(m, _coeffs(m, f=1.0), u)
    m2, rmap = refine(m, range(m.n_triangles))
    u2 = rmap.interpolate(u)
    est2 = error_indicator(m2, _coeffs(m2, f=1.0), u2)
    assert m2.longest_edge.max() == pytest.approx(m.longest_edge.max() / 2)
    assert est2.err < est.err


def test_error_indicator_folds_advection_into_f():
    # with u = x, c = 1: flux jumps vanish; f + b.grad u = f + b1 must enter
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    u = m.points[:, 0].copy()
    est_plain = error_indicator(m, _coeffs(m, f=-1.0, b=np.array([1.0, 0.0])), u)
    assert est_plain.err <= 1e-13  # f - (-b grad u) cancels
    est_off = error_indicator(m, _coeffs(m, f=-1.0), u)
    assert est_off.err > 1e-3


# -- refinement ----------------------------------------------------------------------

def test_refine_all_red(unit_square_2):
    m2, _ = refine(unit_square_2, [0, 1])
    assert m2.n_triangles == 8
    assert m2.areas.sum() == pytest.approx(1.0, abs=1e-12)


def test_refine_none_is_identity(unit_square_2):
    m2, rmap = refine(unit_square_2, [])
    assert m2 is unit_square_2
    u = np.array([1.0, 2.0, 3.0, 4.0])
    assert np.array_equal(rmap.interpolate(u), u)


def test_refine_one_marked_conforming():
    m = make_rect_mesh(0.5, 0.5, 4, 4)
    m2, _ = refine(m, [5])
    # Mesh validation (run in the constructor) checks edge incidence
    Mesh(m2.points, m2.edges, m2.triangles, m2.segment_count)
    assert m2.areas.sum() == pytest.approx(m.areas.sum())


def test_refinement_map_linear_exactness():
    m = make_rect_mesh(0.5, 0.5, 6, 5)
    x, y = m.points.T
    u = 0.7 * x - 1.3 * y + 0.1
    m2, rmap = refine(m, [0, 3, 11, 17])
    u2 = rmap.interpolate(u)
    expect = 0.7 * m2.points[:, 0] - 1.3 * m2.points[:, 1] + 0.1
    assert np.abs(u2 - expect).max() <= 1e-12
    assert np.all(rmap.weights >= 0)
    assert np.allclose(rmap.weights.sum(axis=1), 1.0)


def test_refine_preserves_boundary_labels():
    m = make_rect_mesh(0.5, 0.5, 3, 3)
    m2, _ = refine(m, range(m.n_triangles))
    assert set(np.unique(m2.edges[:, 2])) == {1, 2, 3, 4}


# -- marking --------------------------------------------------------------------------

def _est(values):
    from pdecont.mesh import ErrorEstimate
    values = np.asarray(values, dtype=float)
    return ErrorEstimate(values, float(values.max()), 0.15, 0.15)


def test_mark_all_on_ties():
    marked = mark_by_error(_est([2.0, 2.0, 2.0]), "max_fraction", theta=0.5)
    assert list(marked) == [0, 1, 2]


def test_mark_max_fraction():
    marked = mark_by_error(_est([1.0, 0.0, 0.0, 0.0]), "max_fraction", theta=0.5)
    assert list(marked) == [0]


def test_mark_budget_below_current():
    marked = mark_by_error(_est([1.0, 2.0, 3.0]), "budget", maxt=2)
    assert marked.size == 0


# -- adapt ----------------------------------------------------------------------------

def _sin_est_fn(c=1.0):
    def est_fn(mesh, fields):
        cs = CoefficientSet.from_user(1, mesh.n_triangles, c, 0.0, 1.0, 0.0)
        return error_indicator(mesh, cs, fields["u"])
    return est_fn


def test_adapt_noop_when_base_is_current():
    m = make_rect_mesh(0.5, 0.5, 6, 6)
    u = np.sin(m.points[:, 0])
    res = adapt(m, m, {"u": u}, _sin_est_fn(), eb=np.inf)
    assert res.mesh is m
    assert np.array_equal(res.fields["u"], u)
    assert res.passes == 0


def test_adapt_ngen0_pure_coarsening():
    fine = make_rect_mesh(0.5, 0.5, 9, 9)
    base = make_rect_mesh(0.5, 0.5, 5, 5)
    u = fine.points[:, 0] + 2.0 * fine.points[:, 1]
    res = adapt(fine, base, {"u": u}, _sin_est_fn(), ngen=0)
    assert res.mesh.n_triangles == base.n_triangles
    expect = base.points[:, 0] + 2.0 * base.points[:, 1]
    assert np.abs(res.fields["u"] - expect).max() <= 1e-12


def test_interpolate_to_points_clamps_outside():
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    u = m.points[:, 0]
    vals, outside = interpolate_to_points(m, u, np.array([[0.0, 0.0], [2.0, 0.0]]))
    assert not outside[0] and outside[1]
    assert vals[0] == pytest.approx(0.0, abs=1e-12)


# -- invariants ------------------------------------------------------------------------

def test_conformity_after_random_refinement():
    rng = np.random.default_rng(7)
    m = make_rect_mesh(0.5, 0.5, 5, 5)
    for _ in range(3):
        marked = rng.choice(m.n_triangles, size=max(1, m.n_triangles // 5),
                            replace=False)
        m, _ = refine(m, marked)
    counts = {}
    for tri in m.triangles:
        for e in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            key = tuple(sorted(e))
            counts[key] = counts.get(key, 0) + 1
    boundary = sum(1 for c in counts.values() if c == 1)
    assert boundary == m.n_edges
    assert all(c <= 2 for c in counts.values())
    assert m.areas.sum() == pytest.approx(1.0, rel=1e-12)

import itertools

import networkx as nx
import numpy as np
import pytest
from shapely.geometry import Point

from mdlod.geometry import load_geometry
from mdlod.mesh import (MeshError, agglomerate, build_hierarchy, grid_assignment, mesh_pair, staircase_polyline)


def test_counts_cross(cross):
    # 16 coarse / 64 fine squares correspond to 4 coarse elements per unit length
    h = build_hierarchy(cross, 4, 2)
    assert (h.coarse.n_cells, h.coarse.n_iface) == (16, 8)
    assert (h.fine.n_cells, h.fine.n_iface) == (64, 16)
    assert (h.n_bulk, h.n_iface) == (16, 8)


def test_counts_square():
    h = build_hierarchy(load_geometry("square"), 1, 4)
    assert (h.n_bulk, h.n_iface, h.fine.n_cells) == (1, 0, 16)


def test_counts_vertical():
    h = build_hierarchy(load_geometry("vertical"), 4, 2)
    assert (h.n_bulk, h.n_iface) == (16, 4)
    assert np.all(h.n_of == 2)
    assert np.all(h.fine.n_of == 2)


def test_refinement_factor_checked(cross):
    with pytest.raises(MeshError):
        build_hierarchy(cross, 4, 1)


def test_unresolved_interface_rejected():
    with pytest.raises(MeshError):
        mesh_pair(load_geometry("oblique"), 8)
    with pytest.raises(MeshError):
        mesh_pair(load_geometry("cross"), 3)


def test_face_map_compatibility(cross):
    m = mesh_pair(cross, 8)
    xy = m.node_xy
    on_iface = set()
    for c in range(m.n_cells):
        nodes = m.cell_nodes[c]
        for a, b in zip(nodes, np.roll(nodes, -1)):
            mid = 0.5 * (xy[a] + xy[b])
            if any(cross.geometry(j).distance(Point(mid)) < 1e-12 for j in cross.ids(1)):
                on_iface.add((c, tuple(sorted((a, b)))))
    fm = m.face_map
    # every bulk face on an interface resolves to exactly one interface element and back
    assert len(on_iface) == 2 * m.n_iface
    for c, edge in on_iface:
        t = [t for t in range(m.n_iface) if tuple(sorted(m.if_nodes[t])) == edge]
        assert len(t) == 1 and c in m.if_sides[t[0]]
    assert len(fm) > 0


def test_refinement_consistency(cross):
    h = build_hierarchy(cross, 4, 3)
    vol = np.bincount(h.bulk_parent) * h.fine.size ** 2
    np.testing.assert_allclose(vol, h.coarse.size ** 2, rtol=1e-12)


def test_interior_and_corner_patch():
    h = build_hierarchy(load_geometry("square"), 4, 2)
    p = h.patch(5, 1)
    assert len(p.bulk) == 9 and len(p.iface) == 0
    assert len(h.patch(0, 1).bulk) == 4


def test_patch_saturation(small_cross):
    ell = small_cross.diameter()
    for T in range(small_cross.n_coarse):
        p = small_cross.patch(T, ell)
        assert len(p.bulk) == small_cross.n_bulk and len(p.iface) == small_cross.n_iface
        assert len(p.multipliers) == small_cross.n_coarse


def _element_graph(h):
    """Coarse bulk and interface elements joined when their closures meet (shared fine node)."""
    g = nx.Graph()
    f = h.fine
    nodes_of = {}
    for c in range(f.n_cells):
        nodes_of.setdefault(("b", h.bulk_parent[c]), set()).update(f.cell_nodes[c].tolist())
    for t in range(f.n_iface):
        nodes_of.setdefault(("i", h.iface_parent[t]), set()).update(f.if_nodes[t].tolist())
    keys = list(nodes_of)
    g.add_nodes_from(keys)
    for a, b in itertools.combinations(keys, 2):
        if nodes_of[a] & nodes_of[b]:
            g.add_edge(a, b)
    return g


@pytest.mark.parametrize("name, nH", [("cross", 4), ("vertical", 4), ("square", 5)])
def test_patch_matches_bfs(name, nH):
    h = build_hierarchy(load_geometry(name), nH, 2)
    g = _element_graph(h)
    for T in range(h.n_bulk):
        seed = {("b", T)} | {("i", t) for t in h.faces[T]}
        for ell in range(0, 4):
            dist = nx.multi_source_dijkstra_path_length(g, seed)
            want = {k for k, d in dist.items() if d <= ell}
            p = h.patch(T, ell)
            got = {("b", b) for b in p.bulk} | {("i", i) for i in p.iface}
            assert got == want
            if ell:
                assert set(h.patch(T, ell - 1).bulk) <= set(p.bulk)


def test_patch_recursion(small_cross):
    for T in range(small_cross.n_bulk):
        for ell in (1, 2):
            prev = small_cross.patch(T, ell - 1)
            b, i = np.zeros(small_cross.n_bulk), np.zeros(small_cross.n_iface)
            b[prev.bulk], i[prev.iface] = 1, 1
            b, i = small_cross._grow(b, i, 1)
            p = small_cross.patch(T, ell)
            assert np.array_equal(np.flatnonzero(b), p.bulk) and np.array_equal(np.flatnonzero(i), p.iface)


def test_agglomerate_uniform_squares(cross):
    h = build_hierarchy(cross, 4, 2)
    hier, rep = agglomerate(h.fine, h.bulk_parent, 0.3, 0.8, H=h.coarse.size)
    H = h.coarse.size
    for a in rep.agglomerates:
        assert a.R == pytest.approx(H / 2, rel=1e-9)
        assert a.R_prime == pytest.approx(H / np.sqrt(2), rel=1e-9)
    assert rep.ok
    assert np.array_equal(hier.n_of, h.n_of)


def _lattice_inscribed_radius(cells, h, n=200):
    """Brute force: best centre on a dense lattice, radius = distance to the polygon boundary."""
    from shapely.geometry import Point, box
    from shapely.ops import unary_union
    poly = unary_union([box(*c) for c in cells])
    x0, y0, x1, y1 = poly.bounds
    best = 0.0
    for x in np.linspace(x0, x1, n):
        for y in np.linspace(y0, y1, n):
            p = Point(x, y)
            if poly.contains(p):
                best = max(best, poly.exterior.distance(p))
    return best


def test_tromino_radii():
    sq = load_geometry("square")
    fine = mesh_pair(sq, 4)
    labels = np.arange(fine.n_cells) + 10
    labels[[0, 1, 4]] = 0   # L-shaped tromino in the lower-left corner
    hier, rep = agglomerate(fine, labels, 0.1, 2.0, H=0.5)
    tro = next(a for a in rep.agglomerates if a.label == 0)
    h = fine.size
    R_ref = _lattice_inscribed_radius([fine.cell_box(c).bounds for c in (0, 1, 4)], h)
    assert tro.R == pytest.approx(R_ref, abs=2 * h / 200)
    assert tro.R <= tro.R_prime <= 3 * tro.R


def test_neck_flagged():
    sq = load_geometry("square")
    fine = mesh_pair(sq, 8)
    ij = [(i, j) for i in range(3) for j in range(3)] + [(3, 1)] + [(i, j) for i in range(4, 7) for j in range(3)]
    labels = np.arange(fine.n_cells) + 100
    for i, j in ij:
        labels[i + 8 * j] = 0
    _, rep = agglomerate(fine, labels, 0.3, 1.0, H=7 / 8)
    flagged = [a.label for a in rep.violations]
    assert 0 in flagged
    assert not rep.ok


def test_agglomerate_rejects_bad_sets(cross):
    fine = mesh_pair(cross, 4)
    labels = np.arange(fine.n_cells)
    labels[[0, 2]] = 0
    with pytest.raises(MeshError):
        agglomerate(fine, labels, 0.1, 1.0)      # disconnected
    labels = np.arange(fine.n_cells)
    labels[[1, 2]] = 1
    with pytest.raises(MeshError):
        agglomerate(fine, labels, 0.1, 1.0)      # straddles x = 1/2
    sq = mesh_pair(load_geometry("square"), 4)
    labels = np.full(sq.n_cells, 3)
    labels[[0, 1, 2, 4, 6, 8, 9, 10]] = 0    # ring around cell 5
    labels[5] = 1
    with pytest.raises(MeshError):
        agglomerate(sq, labels, 0.1, 1.0)


def test_staircase_geometry_and_grid_assignment():
    h = 1 / 16
    pts = staircase_polyline((0, 0.25), (1, 0.75), h)
    assert all(abs(a[0] - b[0]) < 1e-12 or abs(a[1] - b[1]) < 1e-12 for a, b in zip(pts, pts[1:]))
    from mdlod.geometry import build_domain, validate_domain
    d = build_domain((0, 0, 1, 1), [pts])
    assert validate_domain(d) == []
    fine = mesh_pair(d, 16)
    labels = grid_assignment(fine, 4)
    hier, rep = agglomerate(fine, labels, 0.1, 1.25, H=0.25)
    assert rep.ok
    # no agglomerate crosses the staircase
    for a in rep.agglomerates:
        assert len(np.unique(fine.cell_segment[a.cells])) == 1
    assert hier.n_iface > 0 and np.all(hier.n_of >= 1)

import numpy as np
import pytest
from shapely.geometry import Point

from mdlod.geometry import (AdjacencyGraph, GeometryError, MixedDomain, SegmentId, build_domain, domain_polylines,
                            load_geometry, parse_geometry, validate_domain)


def flood_fill_components(interfaces, n=64):
    """Count connected regions of a pixel grid cut by axis-aligned or oblique lines."""
    from shapely.geometry import LineString

    lines = [LineString(pl) for pl in interfaces]
    h = 1.0 / n
    label = -np.ones((n, n), dtype=int)

    def blocked(a, b):
        seg = LineString([a, b])
        return any(seg.intersects(line) for line in lines)

    k = 0
    for i in range(n):
        for j in range(n):
            if label[i, j] >= 0:
                continue
            stack = [(i, j)]
            label[i, j] = k
            while stack:
                a, b = stack.pop()
                c = ((a + 0.5) * h, (b + 0.5) * h)
                for da, db in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    p, q = a + da, b + db
                    if 0 <= p < n and 0 <= q < n and label[p, q] < 0:
                        if not blocked(c, ((p + 0.5) * h, (q + 0.5) * h)):
                            label[p, q] = k
                            stack.append((p, q))
            k += 1
    return k


@pytest.mark.parametrize("name, counts", [("square", (1, 0, 0)), ("vertical", (2, 1, 0)), ("cross", (4, 4, 1)),
                                          ("oblique", (3, 3, 1))])
def test_builtin_counts(name, counts):
    d = load_geometry(name)
    assert d.counts() == counts
    assert validate_domain(d) == []


def test_cross_bulk_count_matches_flood_fill():
    lines = [[[0.5, 0], [0.5, 1]], [[0, 0.5], [1, 0.5]]]
    d = build_domain((0, 0, 1, 1), lines)
    assert len(d.bulk_segments) == flood_fill_components(lines, n=16)


def test_oblique_bulk_count_matches_flood_fill():
    lines = [[[0, 0.2], [1, 0.8]], [[0.4, 1], [0.5, 0.5]]]
    d = build_domain((0, 0, 1, 1), lines)
    assert len(d.bulk_segments) == flood_fill_components(lines, n=40)


def test_partition_area():
    for name in ("square", "vertical", "cross", "oblique"):
        d = load_geometry(name)
        assert abs(sum(p.area for p in d.bulk_segments) - d.area) <= 1e-12 * d.area


def test_adjacency_points_lie_on_bulk_boundary():
    d = load_geometry("oblique")
    for i, j in d.adjacency.E0:
        poly, line = d.geometry(i), d.geometry(j)
        for t in np.linspace(0, 1, 33):
            pt = line.interpolate(t, normalized=True)
            assert poly.boundary.distance(pt) < 1e-9


def test_cross_adjacency_structure(cross):
    adj = cross.adjacency
    for b in cross.ids(0):
        assert len(adj.interfaces_of(b)) == 2
    for j in cross.ids(1):
        assert len(adj.bulk_of(j)) == 2
        assert adj.junctions_of(j) == [SegmentId(2, 0)]


def test_split_idempotent():
    for name in ("cross", "oblique"):
        d = load_geometry(name)
        again = build_domain(d.bounds, domain_polylines(d))
        assert again.counts() == d.counts()
        assert again.adjacency == d.adjacency


def test_kink_becomes_junction():
    d = build_domain((0, 0, 1, 1), [[[0, 0.25], [0.5, 0.25], [0.5, 1]]])
    assert d.counts() == (2, 2, 1)
    assert validate_domain(d) == []


def test_collinear_vertices_merge():
    d = build_domain((0, 0, 1, 1), [[[0.5, 0], [0.5, 0.3], [0.5, 1]]])
    assert d.counts() == (2, 1, 0)


def test_dangling_interface_flagged():
    # one bulk region on each side, but the interface stops in the middle of the domain
    left = load_geometry("vertical")
    from shapely.geometry import LineString
    line = LineString([(0.5, 0), (0.5, 0.5)])
    d = MixedDomain(left.bounds, left.bulk_segments, (line,), (),
                    AdjacencyGraph(frozenset({(SegmentId(0, 0), SegmentId(1, 0)), (SegmentId(0, 1), SegmentId(1, 0))})))
    kinds = [v.kind for v in validate_domain(d)]
    assert kinds.count("dangling interface") == 1


def test_dangling_rejected_by_builder():
    with pytest.raises(GeometryError):
        build_domain((0, 0, 1, 1), [[[0.5, 0], [0.5, 0.5]]])


def test_spurious_adjacency_flagged(cross):
    # claim the bottom-left quadrant touches an interface on the right half
    bl = cross.locate_bulk(0.25, 0.25)
    far = next(j for j in cross.ids(1)
               if cross.geometry(j).centroid.x > 0.6)
    bad = MixedDomain(cross.bounds, cross.bulk_segments, cross.interface_segments, cross.junction_points,
                      AdjacencyGraph(cross.adjacency.E0 | {(SegmentId(0, bl), far)}, cross.adjacency.E1))
    v = validate_domain(bad)
    assert [x.kind for x in v] == ["adjacency"]
    assert v[0].segments == (SegmentId(0, bl), far)


def test_overlapping_interfaces_rejected():
    with pytest.raises(GeometryError):
        build_domain((0, 0, 1, 1), [[[0.5, 0], [0.5, 1]], [[0.5, 0.2], [0.5, 0.6]]])


def test_parser_rejects_unknown_keys():
    with pytest.raises(GeometryError):
        parse_geometry({"domain": [0, 0, 1, 1], "interfaces": [], "colour": "red"})


def test_load_geometry_file(tmp_path):
    p = tmp_path / "g.toml"
    p.write_text('domain = [0, 0, 2, 1]\ninterfaces = [[[1, 0], [1, 1]]]\n')
    d = load_geometry(p)
    assert d.counts() == (2, 1, 0)
    assert d.locate_bulk(0.5, 0.5) != d.locate_bulk(1.5, 0.5)


def test_segment_id():
    assert str(SegmentId(1, 3)) == "1:3"
    with pytest.raises(ValueError):
        SegmentId(3, 0)
    with pytest.raises(ValueError):
        SegmentId(0, -1)


def test_on_boundary(cross):
    assert cross.on_boundary((0.0, 0.3))
    assert not cross.on_boundary((0.5, 0.5))
    assert cross.geometry(SegmentId(2, 0)).distance(Point(0.5, 0.5)) < 1e-12

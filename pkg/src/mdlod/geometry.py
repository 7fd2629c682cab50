"""Mixed-dimensional geometry: bulk regions, interface segments and junctions.

A domain is declared as a rectangle plus a list of interface polylines.  Bulk
segments, interface segments and junction points are derived from that
declaration, so the adjacency relations never have to be written by hand.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import shapely
from shapely.geometry import LineString, MultiLineString, Point, Polygon, box
from shapely.ops import polygonize, unary_union

try:  # Python 3.11+
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

TOL = 1e-10


class GeometryError(ValueError):
    """Raised when a geometry declaration cannot be turned into a valid domain."""


@dataclass(frozen=True, order=True)
class SegmentId:
    codim: int
    index: int

    def __post_init__(self):
        if self.codim not in (0, 1, 2):
            raise ValueError(f"codimension must be 0, 1 or 2, got {self.codim}")
        if self.index < 0:
            raise ValueError("segment index must be nonnegative")

    def __str__(self):
        return f"{self.codim}:{self.index}"


@dataclass(frozen=True)
class AdjacencyGraph:
    """Pairs (bulk, interface) in ``E0`` and (interface, junction) in ``E1``."""

    E0: frozenset = frozenset()
    E1: frozenset = frozenset()

    def interfaces_of(self, bulk: SegmentId) -> list[SegmentId]:
        return sorted(j for i, j in self.E0 if i == bulk)

    def bulk_of(self, interface: SegmentId) -> list[SegmentId]:
        return sorted(i for i, j in self.E0 if j == interface)

    def junctions_of(self, interface: SegmentId) -> list[SegmentId]:
        return sorted(k for j, k in self.E1 if j == interface)


@dataclass(frozen=True)
class Violation:
    kind: str
    segments: tuple
    message: str

    def __str__(self):
        names = ", ".join(str(s) for s in self.segments)
        return f"[{self.kind}] {names}: {self.message}"


@dataclass(frozen=True)
class MixedDomain:
    """Rectangle ``bounds = (x0, y0, x1, y1)`` partitioned into segments.

    Segment ``SegmentId(c, i)`` refers to entry ``i`` of ``bulk_segments``,
    ``interface_segments`` or ``junction_points`` for ``c = 0, 1, 2``.
    Instances are immutable once built.
    """

    bounds: tuple
    bulk_segments: tuple
    interface_segments: tuple
    junction_points: tuple
    adjacency: AdjacencyGraph = field(default_factory=AdjacencyGraph)

    @property
    def box(self) -> Polygon:
        return box(*self.bounds)

    @property
    def area(self) -> float:
        x0, y0, x1, y1 = self.bounds
        return (x1 - x0) * (y1 - y0)

    def ids(self, codim: int) -> list[SegmentId]:
        n = (len(self.bulk_segments), len(self.interface_segments), len(self.junction_points))[codim]
        return [SegmentId(codim, i) for i in range(n)]

    def geometry(self, sid: SegmentId):
        return (self.bulk_segments, self.interface_segments, self.junction_points)[sid.codim][sid.index]

    def on_boundary(self, pt, tol: float = TOL) -> bool:
        return self.box.exterior.distance(Point(pt)) <= tol

    def locate_bulk(self, x: float, y: float) -> int:
        """Index of the bulk segment containing the point (interior points only)."""
        p = Point(x, y)
        for i, poly in enumerate(self.bulk_segments):
            if poly.contains(p):
                return i
        raise GeometryError(f"point ({x}, {y}) lies in no bulk segment")

    def counts(self) -> tuple[int, int, int]:
        return len(self.bulk_segments), len(self.interface_segments), len(self.junction_points)


# -- construction -----------------------------------------------------------


def _straight_pieces(line: LineString, tol: float) -> list[LineString]:
    """Split a polyline at its kinks; collinear interior vertices are dropped."""
    coords = list(line.coords)
    pieces, start = [], 0
    for k in range(1, len(coords) - 1):
        ax, ay = coords[start]
        bx, by = coords[k]
        cx, cy = coords[k + 1]
        cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx)
        scale = math.hypot(bx - ax, by - ay) * math.hypot(cx - bx, cy - by)
        if abs(cross) > tol * max(scale, tol):
            pieces.append(LineString([coords[start], coords[k]]))
            start = k
    pieces.append(LineString([coords[start], coords[-1]]))
    return pieces


def _key(pt) -> tuple:
    return (round(pt[0], 9), round(pt[1], 9))


def _sort_key_line(line: LineString) -> tuple:
    a, b = sorted(_key(c) for c in (line.coords[0], line.coords[-1]))
    return a + b


def _sort_key_poly(poly: Polygon) -> tuple:
    p = poly.representative_point()
    return (round(p.y, 9), round(p.x, 9))


def build_domain(bounds: Sequence[float], interfaces: Iterable[Sequence[Sequence[float]]],
                 tol: float = TOL) -> MixedDomain:
    """Derive all segments of a 2D mixed-dimensional domain.

    ``interfaces`` is a list of polylines given as coordinate lists.  They are
    noded at mutual intersections, split at kinks and merged through
    collinear degree-2 vertices.  Junction points are the vertices shared by
    two or more interface segments.
    """
    x0, y0, x1, y1 = map(float, bounds)
    if not (x1 > x0 and y1 > y0):
        raise GeometryError(f"degenerate bounding box {bounds}")
    omega = box(x0, y0, x1, y1)
    grown = omega.buffer(tol)

    lines = []
    for n, pl in enumerate(interfaces):
        pts = [tuple(map(float, p)) for p in pl]
        if len(pts) < 2:
            raise GeometryError(f"interface {n} needs at least two points")
        line = LineString(pts)
        if line.length <= tol:
            raise GeometryError(f"interface {n} has zero length")
        if not grown.contains(line):
            raise GeometryError(f"interface {n} leaves the domain {tuple(bounds)}")
        if line.difference(omega.exterior.buffer(tol)).length <= tol:
            raise GeometryError(f"interface {n} lies on the outer boundary")
        if not line.is_simple:
            raise GeometryError(f"interface {n} overlaps itself")
        lines.append(line)

    for (a, la), (b, lb) in itertools.combinations(enumerate(lines), 2):
        if la.intersection(lb).length > tol:
            raise GeometryError(f"interfaces {a} and {b} overlap")

    pieces: list[LineString] = []
    if lines:
        merged = shapely.line_merge(unary_union(lines))
        parts = merged.geoms if isinstance(merged, MultiLineString) else [merged]
        for part in parts:
            pieces.extend(_straight_pieces(part, tol))
    pieces.sort(key=_sort_key_line)

    degree: dict[tuple, int] = {}
    coord_of: dict[tuple, tuple] = {}
    for p in pieces:
        for c in (p.coords[0], p.coords[-1]):
            k = _key(c)
            degree[k] = degree.get(k, 0) + 1
            coord_of[k] = c
    junction_keys = sorted(k for k, d in degree.items() if d >= 2)
    for k, d in degree.items():
        if d == 1 and omega.exterior.distance(Point(coord_of[k])) > tol:
            raise GeometryError(f"interface endpoint {coord_of[k]} dangles inside the bulk")

    faces = unary_union([omega.exterior] + pieces)
    polys = sorted((p for p in polygonize(faces) if p.area > tol), key=_sort_key_poly)
    if abs(sum(p.area for p in polys) - omega.area) > 1e-12 * omega.area:
        raise GeometryError("bulk segments do not tile the domain")

    junctions = tuple(Point(coord_of[k]) for k in junction_keys)
    jindex = {k: n for n, k in enumerate(junction_keys)}

    E0 = set()
    for i, poly in enumerate(polys):
        ring = poly.boundary.buffer(tol)
        for j, piece in enumerate(pieces):
            if ring.contains(piece):
                E0.add((SegmentId(0, i), SegmentId(1, j)))
    E1 = set()
    for j, piece in enumerate(pieces):
        for c in (piece.coords[0], piece.coords[-1]):
            k = _key(c)
            if k in jindex:
                E1.add((SegmentId(1, j), SegmentId(2, jindex[k])))

    dom = MixedDomain((x0, y0, x1, y1), tuple(polys), tuple(pieces), junctions,
                      AdjacencyGraph(frozenset(E0), frozenset(E1)))
    for j in dom.ids(1):
        if not dom.adjacency.bulk_of(j):
            raise GeometryError(f"interface {j} borders no bulk segment")
    return dom


def domain_polylines(d: MixedDomain) -> list[list[tuple]]:
    """Interface segments as a polyline list accepted by :func:`build_domain`."""
    return [list(seg.coords) for seg in d.interface_segments]


# -- validation -------------------------------------------------------------


def _open_touches(line: LineString, region, tol: float) -> bool:
    """Whether the relative interior of ``line`` meets the closed set ``region``."""
    inter = line.intersection(region)
    if inter.is_empty:
        return False
    if inter.length > tol:
        return True
    ends = [Point(line.coords[0]), Point(line.coords[-1])]
    geoms = getattr(inter, "geoms", [inter])
    for g in geoms:
        for c in g.coords:
            if all(Point(c).distance(e) > tol for e in ends):
                return True
    return False


def _is_straight(line: LineString, tol: float) -> bool:
    coords = list(line.coords)
    (ax, ay), (bx, by) = coords[0], coords[-1]
    length = math.hypot(bx - ax, by - ay)
    if length <= tol:
        return False
    return all(abs((bx - ax) * (cy - ay) - (by - ay) * (cx - ax)) / length <= tol for cx, cy in coords[1:-1])


def validate_domain(d: MixedDomain, tol: float = TOL) -> list[Violation]:
    """List every broken domain invariant; an empty list means valid."""
    out: list[Violation] = []
    omega = d.box
    E0, E1 = d.adjacency.E0, d.adjacency.E1
    bulk_ids, if_ids, j_ids = d.ids(0), d.ids(1), d.ids(2)

    for a, b in itertools.combinations(bulk_ids, 2):
        if d.geometry(a).intersection(d.geometry(b)).area > tol:
            out.append(Violation("overlap", (a, b), "bulk segments overlap"))
    covered = sum(p.area for p in d.bulk_segments)
    if abs(covered - omega.area) > 1e-12 * omega.area or not omega.buffer(tol).contains(
            unary_union(list(d.bulk_segments)) if d.bulk_segments else Point(0, 0)):
        out.append(Violation("coverage", tuple(bulk_ids),
                             f"bulk area {covered!r} differs from domain area {omega.area!r}"))

    for j in if_ids:
        line = d.geometry(j)
        if not _is_straight(line, tol):
            out.append(Violation("not straight", (j,), "interface segment is not a straight line"))
        if not any(jj == j for _, jj in E0):
            out.append(Violation("orphan interface", (j,), "no adjacent bulk segment"))
        for i in bulk_ids:
            poly = d.geometry(i)
            contained = poly.boundary.buffer(tol).contains(line)
            claimed = (i, j) in E0
            if claimed and not contained:
                out.append(Violation("adjacency", (i, j), "claimed adjacent but interface is not on the bulk boundary"))
            elif not claimed and contained:
                out.append(Violation("missing adjacency", (i, j), "interface lies on the bulk boundary but is not in E0"))
            elif not claimed and _open_touches(line, poly, tol):
                out.append(Violation("partial contact", (i, j), "interface neither on the bulk boundary nor disjoint from it"))
        ends = [Point(line.coords[0]), Point(line.coords[-1])]
        for k in j_ids:
            pt = d.geometry(k)
            is_end = any(pt.distance(e) <= tol for e in ends)
            claimed = (j, k) in E1
            if claimed and not is_end:
                out.append(Violation("adjacency", (j, k), "claimed adjacent but junction is not an interface endpoint"))
            elif not claimed and is_end:
                out.append(Violation("missing adjacency", (j, k), "junction is an endpoint but is not in E1"))
            elif not claimed and line.distance(pt) <= tol:
                out.append(Violation("partial contact", (j, k), "junction lies inside the interface segment"))
        for e in ends:
            at_junction = any((j, k) in E1 and d.geometry(k).distance(e) <= tol for k in j_ids)
            if not at_junction and omega.exterior.distance(e) > tol:
                out.append(Violation("dangling interface", (j,),
                                     f"endpoint ({e.x:g}, {e.y:g}) is neither a junction nor on the boundary"))
    return out


# -- geometry spec files ----------------------------------------------------

_GEOMETRY_KEYS = {"domain", "interfaces"}

BUILTIN_GEOMETRIES = {
    "square": {"domain": [0, 0, 1, 1], "interfaces": []},
    "vertical": {"domain": [0, 0, 1, 1], "interfaces": [[[0.5, 0], [0.5, 1]]]},
    "cross": {"domain": [0, 0, 1, 1], "interfaces": [[[0.5, 0], [0.5, 1]], [[0, 0.5], [1, 0.5]]]},
    "oblique": {"domain": [0, 0, 1, 1], "interfaces": [[[0, 0.2], [1, 0.8]], [[0.4, 1], [0.5, 0.5]]]},
}


def parse_geometry(data: dict) -> MixedDomain:
    unknown = set(data) - _GEOMETRY_KEYS
    if unknown:
        raise GeometryError(f"unknown geometry keys: {sorted(unknown)}")
    if "domain" not in data:
        raise GeometryError("geometry spec needs a 'domain' entry")
    dom = data["domain"]
    if len(dom) != 4:
        raise GeometryError("'domain' must be [x0, y0, x1, y1]")
    return build_domain(dom, data.get("interfaces", []))


def load_geometry(source: str | Path) -> MixedDomain:
    """Load a geometry from a TOML file, or by builtin name (``cross`` etc.)."""
    if str(source) in BUILTIN_GEOMETRIES:
        return parse_geometry(BUILTIN_GEOMETRIES[str(source)])
    with open(source, "rb") as fh:
        return parse_geometry(tomllib.load(fh))

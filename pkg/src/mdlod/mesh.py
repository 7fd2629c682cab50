"""Structured bulk/interface meshes, coarse hierarchies, patches and agglomerates.

Bulk elements are axis-aligned squares on a uniform grid; interface elements
are grid edges lying on an interface segment.  A coarse mesh is described by
parent maps from fine bulk/interface elements to coarse element labels, so
uniform coarse squares and agglomerated (staircase) elements share all of the
patch machinery.

Coarse elements are numbered like the quantities of interest: bulk elements
``0 .. n_bulk-1`` first, then interface elements ``n_bulk .. n_bulk+n_iface-1``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp
import shapely
from scipy.sparse.csgraph import connected_components
from shapely.geometry import LineString, Polygon, box
from shapely.ops import unary_union

from .geometry import GeometryError, MixedDomain

log = logging.getLogger(__name__)


class MeshError(ValueError):
    pass


def _grid_count(length: float, n: float) -> int:
    m = length * n
    k = int(round(m))
    if k < 1 or abs(m - k) > 1e-9:
        raise MeshError(f"side length {length} is not a multiple of the element size 1/{n}")
    return k


@dataclass(frozen=True, eq=False)
class MeshPair:
    """Uniform square bulk mesh with its compatible interface mesh.

    Nodes are numbered ``g = i + (nx + 1) * j`` and cells ``e = i + nx * j``.
    Interface element ``t`` runs between ``if_nodes[t]`` and has bulk cells
    ``if_sides[t]`` on either side (``-1`` where there is none).
    """

    origin: tuple
    nx: int
    ny: int
    size: float
    cell_segment: np.ndarray
    if_nodes: np.ndarray
    if_segment: np.ndarray
    if_sides: np.ndarray

    @property
    def n_cells(self) -> int:
        return self.nx * self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_iface(self) -> int:
        return len(self.if_nodes)

    @cached_property
    def n_of(self) -> np.ndarray:
        """Number of bulk elements sharing each interface element."""
        return (self.if_sides >= 0).sum(axis=1)

    @cached_property
    def node_xy(self) -> np.ndarray:
        i, j = np.meshgrid(np.arange(self.nx + 1), np.arange(self.ny + 1))
        return np.column_stack([self.origin[0] + i.ravel() * self.size,
                                self.origin[1] + j.ravel() * self.size])

    @cached_property
    def cell_nodes(self) -> np.ndarray:
        """Counter-clockwise corner nodes of every cell, starting bottom-left."""
        i, j = np.meshgrid(np.arange(self.nx), np.arange(self.ny))
        g = (i + (self.nx + 1) * j).ravel()
        return np.column_stack([g, g + 1, g + self.nx + 2, g + self.nx + 1])

    @cached_property
    def cell_center(self) -> np.ndarray:
        return self.node_xy[self.cell_nodes[:, 0]] + 0.5 * self.size

    @cached_property
    def boundary_node(self) -> np.ndarray:
        i = np.arange(self.n_nodes) % (self.nx + 1)
        j = np.arange(self.n_nodes) // (self.nx + 1)
        return (i == 0) | (i == self.nx) | (j == 0) | (j == self.ny)

    @cached_property
    def face_map(self) -> dict:
        """``(cell, local face) -> interface element``; local faces are bottom, right, top, left."""
        out = {}
        nodes = self.cell_nodes
        for t, (a, b) in enumerate(self.if_nodes):
            for c in self.if_sides[t]:
                if c < 0:
                    continue
                ring = list(nodes[c]) + [nodes[c][0]]
                for f in range(4):
                    if {ring[f], ring[f + 1]} == {a, b}:
                        out[(int(c), f)] = t
        return out

    def cell_box(self, c: int) -> Polygon:
        x, y = self.node_xy[self.cell_nodes[c, 0]]
        return box(x, y, x + self.size, y + self.size)


def mesh_pair(d: MixedDomain, n: float) -> MeshPair:
    """Uniform mesh with ``n`` elements per unit length fitted to ``d``."""
    x0, y0, x1, y1 = d.bounds
    nx, ny = _grid_count(x1 - x0, n), _grid_count(y1 - y0, n)
    h = (x1 - x0) / nx
    if abs((y1 - y0) / ny - h) > 1e-12 * max(1.0, h):
        raise MeshError("elements must be square")

    ci, cj = np.meshgrid(np.arange(nx), np.arange(ny))
    cx = x0 + (ci.ravel() + 0.5) * h
    cy = y0 + (cj.ravel() + 0.5) * h
    cell_segment = np.full(nx * ny, -1, dtype=np.int64)
    for s, poly in enumerate(d.bulk_segments):
        cell_segment[shapely.contains_xy(poly, cx, cy)] = s
    if (cell_segment < 0).any():
        raise MeshError("some cells are not inside any bulk segment")

    # candidate grid edges: horizontal then vertical, as (node_a, node_b, mid_x, mid_y)
    g = lambda i, j: i + (nx + 1) * j  # noqa: E731
    hi, hj = np.meshgrid(np.arange(nx), np.arange(ny + 1))
    vi, vj = np.meshgrid(np.arange(nx + 1), np.arange(ny))
    hi, hj, vi, vj = hi.ravel(), hj.ravel(), vi.ravel(), vj.ravel()
    ea = np.concatenate([g(hi, hj), g(vi, vj)])
    eb = np.concatenate([g(hi + 1, hj), g(vi, vj + 1)])
    mx = np.concatenate([x0 + (hi + 0.5) * h, x0 + vi * h])
    my = np.concatenate([y0 + hj * h, y0 + (vj + 0.5) * h])
    horizontal = np.arange(len(ea)) < len(hi)
    # cells below/left and above/right of each edge
    side_a = np.concatenate([np.where(hj > 0, hi + nx * (hj - 1), -1), np.where(vi > 0, vi - 1 + nx * vj, -1)])
    side_b = np.concatenate([np.where(hj < ny, hi + nx * hj, -1), np.where(vi < nx, vi + nx * vj, -1)])

    tol = 1e-9 * h
    rows = []
    for s, seg in enumerate(d.interface_segments):
        on = shapely.distance(seg, shapely.points(mx, my)) <= tol
        (ax, ay), (bx, by) = seg.coords[0], seg.coords[-1]
        ok_dir = np.where(horizontal, abs(ay - by) <= tol, abs(ax - bx) <= tol)
        hit = np.flatnonzero(on & ok_dir)
        if abs(len(hit) * h - seg.length) > 1e-9 * max(seg.length, 1.0):
            raise MeshError(f"interface segment {s} is not resolved by the grid with h = {h:g}")
        rows.extend((min(ea[k], eb[k]), max(ea[k], eb[k]), s, side_a[k], side_b[k]) for k in hit)
    rows.sort(key=lambda r: (r[2], r[0], r[1]))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 5)
    return MeshPair(origin=(x0, y0), nx=nx, ny=ny, size=h, cell_segment=cell_segment,
                    if_nodes=arr[:, :2].copy(), if_segment=arr[:, 2].copy(), if_sides=arr[:, 3:].copy())


@dataclass(frozen=True)
class Patch:
    level: int
    seed: int
    bulk: np.ndarray
    iface: np.ndarray
    multipliers: np.ndarray

    def __contains__(self, T) -> bool:
        return bool(np.isin(T, self.multipliers))


@dataclass(frozen=True)
class CoarseAgglomerate:
    label: int
    cells: np.ndarray
    center: tuple
    R: float
    R_prime: float


@dataclass(frozen=True)
class RegularityReport:
    H: float
    rho0: float
    rho1: float
    agglomerates: tuple

    @property
    def violations(self) -> list[CoarseAgglomerate]:
        lo, hi = self.rho0 * self.H, self.rho1 * self.H
        eps = 1e-12 * self.H
        return [a for a in self.agglomerates
                if not (lo - eps <= a.R <= a.R_prime + eps and a.R_prime <= hi + eps)]

    @property
    def ok(self) -> bool:
        return not self.violations

    def summary(self) -> str:
        R = [a.R / self.H for a in self.agglomerates]
        Rp = [a.R_prime / self.H for a in self.agglomerates]
        return (f"{len(self.agglomerates)} agglomerates, R/H in [{min(R):.3f}, {max(R):.3f}], "
                f"R'/H in [{min(Rp):.3f}, {max(Rp):.3f}], bounds [{self.rho0}, {self.rho1}], "
                f"{len(self.violations)} flagged")


@dataclass(frozen=True, eq=False)
class MeshHierarchy:
    """Fine mesh pair plus a coarse partition given by parent maps.

    ``coarse`` is the uniform coarse mesh pair when the hierarchy comes from
    uniform refinement, and ``None`` for agglomerated coarse meshes.
    """

    fine: MeshPair
    bulk_parent: np.ndarray
    iface_parent: np.ndarray
    H: float
    coarse: MeshPair | None = None
    refinement_factor: int | None = None
    agglomerates: tuple | None = field(default=None, repr=False)

    @property
    def n_bulk(self) -> int:
        return int(self.bulk_parent.max()) + 1 if len(self.bulk_parent) else 0

    @property
    def n_iface(self) -> int:
        return int(self.iface_parent.max()) + 1 if len(self.iface_parent) else 0

    @property
    def n_coarse(self) -> int:
        return self.n_bulk + self.n_iface

    @property
    def parent_map(self) -> np.ndarray:
        return self.bulk_parent

    @cached_property
    def bulk_volume(self) -> np.ndarray:
        return np.bincount(self.bulk_parent, minlength=self.n_bulk) * self.fine.size ** 2

    @cached_property
    def iface_length(self) -> np.ndarray:
        return np.bincount(self.iface_parent, minlength=self.n_iface) * self.fine.size

    @cached_property
    def bulk_segment(self) -> np.ndarray:
        seg = np.full(self.n_bulk, -1)
        seg[self.bulk_parent] = self.fine.cell_segment
        return seg

    @cached_property
    def _bulk_incidence(self) -> sp.csr_matrix:
        f = self.fine
        rows = np.repeat(self.bulk_parent, 4)
        m = sp.csr_matrix((np.ones(len(rows)), (rows, f.cell_nodes.ravel())), shape=(self.n_bulk, f.n_nodes))
        m.data[:] = 1.0
        m.sum_duplicates()
        m.data[:] = 1.0
        return m

    @cached_property
    def _iface_incidence(self) -> sp.csr_matrix:
        f = self.fine
        rows = np.repeat(self.iface_parent, 2)
        m = sp.csr_matrix((np.ones(len(rows)), (rows, f.if_nodes.ravel())), shape=(self.n_iface, f.n_nodes))
        m.sum_duplicates()
        m.data[:] = 1.0
        return m

    @cached_property
    def owners(self) -> tuple:
        """Coarse bulk elements sharing each coarse interface element."""
        sides = self.fine.if_sides
        out = []
        for t in range(self.n_iface):
            s = sides[self.iface_parent == t].ravel()
            out.append(np.unique(self.bulk_parent[s[s >= 0]]))
        return tuple(out)

    @cached_property
    def n_of(self) -> np.ndarray:
        return np.array([len(o) for o in self.owners], dtype=np.int64)

    @cached_property
    def faces(self) -> tuple:
        """Coarse interface elements on the boundary of each coarse bulk element."""
        out = [[] for _ in range(self.n_bulk)]
        for t, own in enumerate(self.owners):
            for k in own:
                out[k].append(t)
        return tuple(np.array(v, dtype=np.int64) for v in out)

    def _grow(self, bulk: np.ndarray, iface: np.ndarray, steps: int):
        Cb, Ci = self._bulk_incidence, self._iface_incidence
        for _ in range(steps):
            nodes = (Cb.T @ bulk + Ci.T @ iface) > 0
            bulk = (Cb @ nodes > 0).astype(float)
            iface = (Ci @ nodes > 0).astype(float)
        return bulk, iface

    def patch(self, T: int, ell: int) -> Patch:
        """``ell``-th order patch around coarse element ``T``.

        A bulk seed carries its interface faces along.  Each layer adds every
        bulk or interface element whose closure meets the closure of the
        current patch.
        """
        if ell < 0:
            raise ValueError("patch order must be nonnegative")
        if not 0 <= T < self.n_coarse:
            raise IndexError(f"coarse element {T} out of range")
        bulk = np.zeros(self.n_bulk)
        iface = np.zeros(self.n_iface)
        if T < self.n_bulk:
            bulk[T] = 1.0
            iface[self.faces[T]] = 1.0
        else:
            iface[T - self.n_bulk] = 1.0
        bulk, iface = self._grow(bulk, iface, ell)
        b, i = np.flatnonzero(bulk), np.flatnonzero(iface)
        return Patch(level=ell, seed=T, bulk=b, iface=i, multipliers=np.concatenate([b, i + self.n_bulk]))

    def first_order_cover(self, T: int) -> Patch:
        """First-order patch of ``T`` within its own mesh (bulk or interface only)."""
        if T < self.n_bulk:
            nodes = self._bulk_incidence[T].toarray().ravel() > 0
            b = np.flatnonzero(self._bulk_incidence @ nodes > 0)
            return Patch(1, T, b, np.zeros(0, dtype=np.int64), b)
        nodes = self._iface_incidence[T - self.n_bulk].toarray().ravel() > 0
        i = np.flatnonzero(self._iface_incidence @ nodes > 0)
        return Patch(1, T, np.zeros(0, dtype=np.int64), i, i + self.n_bulk)

    def diameter(self) -> int:
        """Smallest ``ell`` for which every patch is the whole coarse mesh."""
        ell = 0
        for T in range(self.n_coarse):
            p = self.patch(T, 0)
            b, i = np.zeros(self.n_bulk), np.zeros(self.n_iface)
            b[p.bulk], i[p.iface] = 1, 1
            k = 0
            while b.sum() < self.n_bulk or i.sum() < self.n_iface:
                b, i = self._grow(b, i, 1)
                k += 1
            ell = max(ell, k)
        return ell


def build_hierarchy(d: MixedDomain, nH: float, r: int) -> MeshHierarchy:
    """Uniform coarse mesh with ``nH`` elements per unit length, refined ``r`` times."""
    if int(r) != r or r < 2:
        raise MeshError(f"refinement factor must be an integer >= 2, got {r}")
    r = int(r)
    coarse = mesh_pair(d, nH)
    fine = mesh_pair(d, nH * r)
    fi = np.arange(fine.n_cells) % fine.nx
    fj = np.arange(fine.n_cells) // fine.nx
    bulk_parent = fi // r + coarse.nx * (fj // r)

    key = {}
    for t, (a, b) in enumerate(coarse.if_nodes):
        key[(a, b)] = t
    iface_parent = np.empty(fine.n_iface, dtype=np.int64)
    cxy, fxy = coarse.node_xy, fine.node_xy
    H = coarse.size
    for t, (a, b) in enumerate(fine.if_nodes):
        mid = 0.5 * (fxy[a] + fxy[b])
        rel = (mid - np.asarray(coarse.origin)) / H
        horizontal = abs(fxy[a][1] - fxy[b][1]) < 1e-12
        if horizontal:
            i0, j0 = int(np.floor(rel[0])), int(round(rel[1]))
            ca, cb = i0 + (coarse.nx + 1) * j0, i0 + 1 + (coarse.nx + 1) * j0
        else:
            i0, j0 = int(round(rel[0])), int(np.floor(rel[1]))
            ca, cb = i0 + (coarse.nx + 1) * j0, i0 + (coarse.nx + 1) * (j0 + 1)
        if (ca, cb) not in key:
            raise MeshError("fine interface element does not lie on a coarse interface element")
        iface_parent[t] = key[(ca, cb)]
    if not np.array_equal(coarse.cell_segment[bulk_parent], fine.cell_segment):
        raise MeshError("fine cells disagree with their coarse parent about the bulk segment")
    return MeshHierarchy(fine=fine, bulk_parent=bulk_parent, iface_parent=iface_parent, H=H,
                         coarse=coarse, refinement_factor=r)


# -- agglomeration ----------------------------------------------------------


def _cell_adjacency(fine: MeshPair) -> sp.csr_matrix:
    """Edge-neighbour graph of the fine cells (not crossing interfaces)."""
    nx, ny = fine.nx, fine.ny
    c = np.arange(fine.n_cells)
    right = c[(c % nx) < nx - 1]
    up = c[c < nx * (ny - 1)]
    rows = np.concatenate([right, up])
    cols = np.concatenate([right + 1, up + nx])
    keep = fine.cell_segment[rows] == fine.cell_segment[cols]
    rows, cols = rows[keep], cols[keep]
    a = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(fine.n_cells,) * 2)
    return (a + a.T).tocsr()


def _group_interface(fine: MeshPair, labels: np.ndarray) -> np.ndarray:
    """Group fine interface elements into connected runs with the same neighbouring agglomerates."""
    n = fine.n_iface
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    sides = fine.if_sides
    own = [tuple(sorted(labels[s] for s in row if s >= 0)) for row in sides]
    by_node: dict[int, list[int]] = {}
    for t, (a, b) in enumerate(fine.if_nodes):
        by_node.setdefault(a, []).append(t)
        by_node.setdefault(b, []).append(t)
    rows, cols = [], []
    for ts in by_node.values():
        for p in ts:
            for q in ts:
                if p < q and own[p] == own[q]:
                    rows.append(p)
                    cols.append(q)
    g = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, comp = connected_components(g, directed=False)
    # renumber components by first appearance
    order = {}
    out = np.empty(n, dtype=np.int64)
    for t, c in enumerate(comp):
        out[t] = order.setdefault(c, len(order))
    return out


def _radii(poly: Polygon, h: float) -> tuple[tuple, float, float]:
    line = shapely.maximum_inscribed_circle(poly, tolerance=h * 1e-3)
    cx, cy = line.coords[0]
    R = float(line.length)
    verts = np.asarray(poly.exterior.coords)
    Rp = float(np.max(np.hypot(verts[:, 0] - cx, verts[:, 1] - cy)))
    return (cx, cy), R, Rp


def agglomerate(fine: MeshPair, assignment, rho0: float, rho1: float, H: float | None = None,
                iface_assignment=None) -> tuple[MeshHierarchy, RegularityReport]:
    """Coarse mesh whose elements are unions of fine cells.

    ``assignment`` maps each fine cell to a coarse label.  Each label must be a
    connected, simply connected set of cells inside one bulk segment.  The
    regularity report compares inscribed radius ``R`` and circumscribed radius
    ``R'`` (both around the centre of the largest inscribed ball) against
    ``rho0 * H`` and ``rho1 * H``.  ``H`` defaults to the largest
    circumscribed diameter.
    """
    labels_in = np.asarray(assignment)
    if labels_in.shape != (fine.n_cells,):
        raise MeshError("assignment must give one label per fine cell")
    uniq, labels = np.unique(labels_in, return_inverse=True)
    labels = labels.astype(np.int64)

    adj = _cell_adjacency(fine)
    aggs = []
    h = fine.size
    for k in range(len(uniq)):
        cells = np.flatnonzero(labels == k)
        if len(np.unique(fine.cell_segment[cells])) != 1:
            raise MeshError(f"agglomerate {uniq[k]} straddles an interface")
        sub = adj[cells][:, cells]
        ncomp, _ = connected_components(sub, directed=False)
        if ncomp != 1:
            raise MeshError(f"agglomerate {uniq[k]} is not connected")
        poly = unary_union([fine.cell_box(c) for c in cells]).buffer(0)
        if not isinstance(poly, Polygon) or len(poly.interiors) > 0:
            raise MeshError(f"agglomerate {uniq[k]} is not simply connected")
        center, R, Rp = _radii(poly, h)
        aggs.append(CoarseAgglomerate(label=int(uniq[k]), cells=cells, center=center, R=R, R_prime=Rp))

    if iface_assignment is None:
        iface_parent = _group_interface(fine, labels)
    else:
        _, iface_parent = np.unique(np.asarray(iface_assignment), return_inverse=True)
    if H is None:
        H = 2.0 * max(a.R_prime for a in aggs)
    hier = MeshHierarchy(fine=fine, bulk_parent=labels, iface_parent=np.asarray(iface_parent, dtype=np.int64),
                         H=float(H), coarse=None, refinement_factor=None, agglomerates=tuple(aggs))
    report = RegularityReport(H=float(H), rho0=rho0, rho1=rho1, agglomerates=tuple(aggs))
    return hier, report


def grid_assignment(fine: MeshPair, nH: float, min_fraction: float = 0.25) -> np.ndarray:
    """Coarse labels from a uniform ``1/nH`` grid, split along interfaces.

    Cells of one grid square that fall into different bulk segments become
    separate agglomerates; pieces smaller than ``min_fraction`` of a full
    square are merged into the neighbouring piece (same segment) they share
    the most edges with.
    """
    x0, y0 = fine.origin
    H = 1.0 / nH
    c = fine.cell_center
    gi = np.floor((c[:, 0] - x0) / H + 1e-12).astype(np.int64)
    gj = np.floor((c[:, 1] - y0) / H + 1e-12).astype(np.int64)
    ncx = int(gi.max()) + 1
    base = gi + ncx * gj
    adj = _cell_adjacency(fine).tocoo()
    # connected pieces of each (grid square, segment)
    same = base[adj.row] == base[adj.col]
    g = sp.coo_matrix((np.ones(same.sum()), (adj.row[same], adj.col[same])), shape=(fine.n_cells,) * 2)
    _, labels = connected_components(g, directed=False)
    full = (H / fine.size) ** 2
    while True:
        sizes = np.bincount(labels)
        small = [k for k in np.unique(labels) if sizes[k] < min_fraction * full]
        if not small:
            break
        k = min(small, key=lambda k: (sizes[k], k))
        mask = labels[adj.row] == k
        nbr = labels[adj.col[mask]]
        nbr = nbr[nbr != k]
        if len(nbr) == 0:
            break
        counts = np.bincount(nbr)
        labels[labels == k] = int(np.argmax(counts))
    _, labels = np.unique(labels, return_inverse=True)
    return labels.astype(np.int64)


def staircase_polyline(p0, p1, h: float) -> list[tuple]:
    """Grid-following staircase path from ``p0`` to ``p1`` (both grid nodes)."""
    (x0, y0), (x1, y1) = p0, p1
    nx = int(round((x1 - x0) / h))
    ny = int(round((y1 - y0) / h))
    steps = max(abs(nx), abs(ny))
    pts = [(x0, y0)]
    i = j = 0
    for k in range(1, steps + 1):
        ti = int(round(k * nx / steps)) if steps else 0
        tj = int(round(k * ny / steps)) if steps else 0
        if ti != i:
            i = ti
            pts.append((x0 + i * h, y0 + j * h))
        if tj != j:
            j = tj
            pts.append((x0 + i * h, y0 + j * h))
    return pts

"""Fitted finite elements on the broken bulk / junction-continuous interface space.

Bulk unknowns live on (node, bulk segment) pairs, so nodes on interfaces carry
one copy per adjacent bulk segment.  Interface unknowns live on interface
nodes and are shared by all interface segments meeting at a junction.
Vectors come in two flavours: *full* (one entry per DOF, including the
Dirichlet ones) and *free* (Dirichlet DOFs dropped); most functions accept
either and tell them apart by length.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .geometry import MixedDomain
from .mesh import MeshPair

log = logging.getLogger(__name__)

# reference bilinear stiffness on a square, independent of its size
_KQ = np.array([[4.0, -1.0, -2.0, -1.0],
                [-1.0, 4.0, -1.0, -2.0],
                [-2.0, -1.0, 4.0, -1.0],
                [-1.0, -2.0, -1.0, 4.0]]) / 6.0
_K1 = np.array([[1.0, -1.0], [-1.0, 1.0]])
_M1 = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0


class FactorizationError(RuntimeError):
    pass


class CoefficientError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DofMap:
    mesh: MeshPair
    n_bulk_dofs: int
    n_iface_dofs: int
    cell_dofs: np.ndarray      # (n_cells, 4) bulk dofs, counter-clockwise
    iface_dofs: np.ndarray     # (n_iface, 2) interface dofs
    trace_dofs: np.ndarray     # (n_iface, 2, 2) bulk dofs of each side's trace, -1 if no side
    dof_node: np.ndarray       # geometric node of every dof
    dof_segment: np.ndarray    # segment index (bulk segment for bulk dofs, interface segment otherwise)
    dirichlet: np.ndarray      # bool mask over all dofs

    @property
    def n_dofs(self) -> int:
        return self.n_bulk_dofs + self.n_iface_dofs

    @cached_property
    def free(self) -> np.ndarray:
        return np.flatnonzero(~self.dirichlet)

    @property
    def n_free(self) -> int:
        return len(self.free)

    @cached_property
    def free_index(self) -> np.ndarray:
        """Position of each dof among the free dofs, ``-1`` for Dirichlet dofs."""
        idx = np.full(self.n_dofs, -1, dtype=np.int64)
        idx[self.free] = np.arange(self.n_free)
        return idx

    @cached_property
    def dof_xy(self) -> np.ndarray:
        return self.mesh.node_xy[self.dof_node]

    def is_bulk(self) -> np.ndarray:
        return np.arange(self.n_dofs) < self.n_bulk_dofs

    def full(self, v: np.ndarray) -> np.ndarray:
        """Expand a free vector (or block of column vectors) by zeros."""
        v = np.asarray(v)
        if v.shape[0] == self.n_dofs:
            return v
        if v.shape[0] != self.n_free:
            raise ValueError(f"vector of length {v.shape[0]} matches neither {self.n_dofs} nor {self.n_free} dofs")
        out = np.zeros((self.n_dofs,) + v.shape[1:], dtype=v.dtype)
        out[self.free] = v
        return out

    def restrict(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        return v[self.free] if v.shape[0] == self.n_dofs else v

    @cached_property
    def cell_incidence(self) -> sp.csr_matrix:
        """Fine cells x dofs, 1 where the cell touches the dof."""
        m = self.mesh
        rows = np.repeat(np.arange(m.n_cells), 4)
        a = sp.csr_matrix((np.ones(4 * m.n_cells), (rows, self.cell_dofs.ravel())), shape=(m.n_cells, self.n_dofs))
        a.sum_duplicates()
        return a

    @cached_property
    def iface_incidence(self) -> sp.csr_matrix:
        m = self.mesh
        rows = np.repeat(np.arange(m.n_iface), 2)
        a = sp.csr_matrix((np.ones(2 * m.n_iface), (rows, self.iface_dofs.ravel())),
                          shape=(m.n_iface, self.n_dofs))
        a.sum_duplicates()
        return a


def build_space(m: MeshPair, d: MixedDomain | None = None) -> DofMap:
    """DOF map of the fine space; ordering is by segment, then node number."""
    if d is not None:
        nb, ni, _ = d.counts()
        if m.cell_segment.max(initial=-1) >= nb or m.if_segment.max(initial=-1) >= ni:
            raise ValueError("mesh refers to segments the domain does not have")
        x0, y0, x1, y1 = d.bounds
        if (abs(m.origin[0] - x0) > 1e-12 or abs(m.origin[1] - y0) > 1e-12
                or abs(m.origin[0] + m.nx * m.size - x1) > 1e-9 or abs(m.origin[1] + m.ny * m.size - y1) > 1e-9):
            raise ValueError("mesh does not cover the domain")

    nodes = m.cell_nodes
    seg = np.repeat(m.cell_segment, 4)
    pairs = np.column_stack([seg, nodes.ravel()])
    uniq, inv = np.unique(pairs, axis=0, return_inverse=True)   # sorted by (segment, node)
    inv = inv.ravel()
    cell_dofs = inv.reshape(-1, 4)
    n_bulk = len(uniq)
    dof_node = [uniq[:, 1]]
    dof_segment = [uniq[:, 0]]

    n_iface = 0
    iface_dofs = np.zeros((0, 2), dtype=np.int64)
    trace = np.full((m.n_iface, 2, 2), -1, dtype=np.int64)
    if m.n_iface:
        inode = m.if_nodes.ravel()
        iseg = np.repeat(m.if_segment, 2)
        first_seg = {}
        for g, s in zip(inode, iseg):
            first_seg[g] = min(first_seg.get(g, s), s)
        keys = sorted(first_seg, key=lambda g: (first_seg[g], g))
        index = {g: n_bulk + k for k, g in enumerate(keys)}
        iface_dofs = np.vectorize(index.__getitem__, otypes=[np.int64])(m.if_nodes)
        n_iface = len(keys)
        dof_node.append(np.array(keys, dtype=np.int64))
        dof_segment.append(np.array([first_seg[g] for g in keys], dtype=np.int64))
        for t, (a, b) in enumerate(m.if_nodes):
            for s, c in enumerate(m.if_sides[t]):
                if c < 0:
                    continue
                loc = list(nodes[c])
                trace[t, s, 0] = cell_dofs[c, loc.index(a)]
                trace[t, s, 1] = cell_dofs[c, loc.index(b)]

    dof_node = np.concatenate(dof_node)
    dirichlet = m.boundary_node[dof_node]
    return DofMap(mesh=m, n_bulk_dofs=n_bulk, n_iface_dofs=n_iface, cell_dofs=cell_dofs, iface_dofs=iface_dofs,
                  trace_dofs=trace, dof_node=dof_node, dof_segment=np.concatenate(dof_segment), dirichlet=dirichlet)


# -- coefficients -----------------------------------------------------------

Field = float | np.ndarray | Callable


def _sample(value, xy: np.ndarray, name: str) -> np.ndarray:
    if callable(value):
        out = np.asarray(value(xy[:, 0], xy[:, 1]), dtype=float)
        out = np.broadcast_to(out, (len(xy),)).copy()
    elif np.ndim(value) == 0:
        out = np.full(len(xy), float(value))
    else:
        out = np.asarray(value, dtype=float)
        if out.shape != (len(xy),):
            raise CoefficientError(f"{name}: expected {len(xy)} element values, got shape {out.shape}")
    return out


@dataclass(frozen=True)
class CoefficientSet:
    """Diffusivities ``A0`` (bulk), ``A1`` (interface) and Robin transfer ``B1``.

    Each entry is a constant, an array of per-element values, or a function
    ``f(x, y)`` sampled at element midpoints.
    """

    A0: Field = 1.0
    A1: Field = 1.0
    B1: Field = 1.0

    def sample(self, m: MeshPair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a0 = _sample(self.A0, m.cell_center, "A0")
        mid = 0.5 * (m.node_xy[m.if_nodes[:, 0]] + m.node_xy[m.if_nodes[:, 1]]) if m.n_iface else np.zeros((0, 2))
        a1 = _sample(self.A1, mid, "A1")
        b1 = _sample(self.B1, mid, "B1")
        for name, arr in (("A0", a0), ("A1", a1), ("B1", b1)):
            if arr.size and (not np.all(np.isfinite(arr)) or arr.min() <= 0):
                raise CoefficientError(f"{name} must be positive and bounded, min = {arr.min()!r}")
        return a0, a1, b1


# -- assembly ---------------------------------------------------------------


def _triplets(s: DofMap, w_bulk, w_stiff, w_couple):
    """COO triplets of the energy form with per-element weights.

    ``w_bulk`` multiplies the stiffness of each fine cell, ``w_stiff`` the
    tangential stiffness of each interface element and ``w_couple[t, side]``
    the Robin coupling of interface element ``t`` with one bulk side.
    Zero-weight elements are skipped.
    """
    h = s.mesh.size
    rows, cols, vals = [], [], []

    c = np.flatnonzero(w_bulk)
    if len(c):
        dofs = s.cell_dofs[c]
        rows.append(np.repeat(dofs, 4, axis=1).ravel())
        cols.append(np.tile(dofs, (1, 4)).ravel())
        vals.append((w_bulk[c, None, None] * _KQ).ravel())

    t = np.flatnonzero(w_stiff)
    if len(t):
        dofs = s.iface_dofs[t]
        rows.append(np.repeat(dofs, 2, axis=1).ravel())
        cols.append(np.tile(dofs, (1, 2)).ravel())
        vals.append((w_stiff[t, None, None] / h * _K1).ravel())

    for side in (0, 1):
        t = np.flatnonzero(w_couple[:, side])
        if not len(t):
            continue
        dofs = np.concatenate([s.trace_dofs[t, side, :], s.iface_dofs[t]], axis=1)
        m = h * _M1
        local = np.block([[m, -m], [-m, m]])
        rows.append(np.repeat(dofs, 4, axis=1).ravel())
        cols.append(np.tile(dofs, (1, 4)).ravel())
        vals.append((w_couple[t, side, None, None] * local).ravel())

    if not rows:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble_weighted(s: DofMap, w_bulk, w_stiff, w_couple) -> sp.csr_matrix:
    """Full (Dirichlet dofs included) matrix of the weighted energy form."""
    r, c, v = _triplets(s, np.asarray(w_bulk, float), np.asarray(w_stiff, float), np.asarray(w_couple, float))
    return sp.csr_matrix((v, (r, c)), shape=(s.n_dofs, s.n_dofs))


def _parallel_assemble(s: DofMap, w_bulk, w_stiff, w_couple, threads: int) -> sp.csr_matrix:
    w_bulk, w_stiff, w_couple = (np.asarray(w, float) for w in (w_bulk, w_stiff, w_couple))
    if threads <= 1 or s.mesh.n_cells < 4 * threads:
        return assemble_weighted(s, w_bulk, w_stiff, w_couple)
    # cell blocks in parallel; concatenating in block order reproduces the serial triplet stream
    blocks = np.array_split(np.arange(s.mesh.n_cells), threads)
    zs, zc = np.zeros_like(w_stiff), np.zeros_like(w_couple)

    def part(k):
        wb = np.zeros_like(w_bulk)
        wb[blocks[k]] = w_bulk[blocks[k]]
        return _triplets(s, wb, zs, zc)

    with ThreadPoolExecutor(threads) as pool:
        parts = list(pool.map(part, range(threads)))
    parts.append(_triplets(s, np.zeros_like(w_bulk), w_stiff, w_couple))
    r, c, v = (np.concatenate(x) for x in zip(*parts))
    return sp.csr_matrix((v, (r, c)), shape=(s.n_dofs, s.n_dofs))


@dataclass(frozen=True, eq=False)
class EnergyOperator:
    """Energy form restricted to the free dofs, with the full matrix alongside."""

    space: DofMap
    matrix: sp.csr_matrix
    full: sp.csr_matrix

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, v):
        return self.matrix @ v

    def energy(self, v, w=None) -> float:
        v = self.space.restrict(v)
        w = v if w is None else self.space.restrict(w)
        return float(v @ (self.matrix @ w))


def coefficient_weights(s: DofMap, c: CoefficientSet):
    a0, a1, b1 = c.sample(s.mesh)
    couple = np.where(s.mesh.if_sides >= 0, b1[:, None], 0.0) if s.mesh.n_iface else np.zeros((0, 2))
    return a0, a1, couple


def restricted_weights(s: DofMap, weights, hierarchy, T0: int):
    """Per-element weights of the energy form restricted to coarse bulk element ``T0``.

    Bulk stiffness on the cells of ``T0``, interface stiffness on the faces of
    ``T0`` divided by the number of coarse bulk elements sharing the face, and
    the coupling on those faces seen from the ``T0`` side only.
    """
    a0, a1, couple = weights
    if not 0 <= T0 < hierarchy.n_bulk:
        raise IndexError(f"{T0} is not a coarse bulk element")
    wb = np.where(hierarchy.bulk_parent == T0, a0, 0.0)
    faces = hierarchy.faces[T0]
    on_face = np.isin(hierarchy.iface_parent, faces)
    ws = np.where(on_face, a1 / hierarchy.n_of[hierarchy.iface_parent], 0.0) if len(a1) else a1
    sides = s.mesh.if_sides
    side_in = np.where(sides >= 0, hierarchy.bulk_parent[np.maximum(sides, 0)] == T0, False)
    wc = np.where(side_in & on_face[:, None], couple, 0.0) if len(couple) else couple
    return wb, ws, wc


def assemble_operator(s: DofMap, c: CoefficientSet, restriction: int | None = None, hierarchy=None,
                      threads: int = 1) -> EnergyOperator:
    """Energy operator ``a``, or its restriction ``a_T0`` to one coarse bulk element."""
    weights = coefficient_weights(s, c)
    if restriction is not None:
        if hierarchy is None:
            raise ValueError("a restricted operator needs the mesh hierarchy")
        weights = restricted_weights(s, weights, hierarchy, restriction)
    full = _parallel_assemble(s, *weights, threads=threads)
    free = s.free
    return EnergyOperator(space=s, matrix=full[free][:, free].tocsr(), full=full)


# -- loads ------------------------------------------------------------------


def _gauss(n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def assemble_load(s: DofMap, f0=0.0, f1=0.0, order: int = 5) -> np.ndarray:
    """Free-dof load vector of ``F(w) = (f0, w0) + (f1, w1)``.

    Sources are constants or functions ``f(x, y)``; they are integrated with
    ``order``-point Gauss rules per direction.
    """
    m = s.mesh
    h = m.size
    F = np.zeros(s.n_dofs)
    xg, wg = _gauss(order)

    if callable(f0) or f0 != 0:
        X, Y = np.meshgrid(xg, xg, indexing="ij")
        W = np.outer(wg, wg).ravel()
        X, Y = X.ravel(), Y.ravel()
        shape = np.column_stack([(1 - X) * (1 - Y), X * (1 - Y), X * Y, (1 - X) * Y])   # (q, 4)
        corner = m.node_xy[m.cell_nodes[:, 0]]
        px = corner[:, 0, None] + h * X[None, :]
        py = corner[:, 1, None] + h * Y[None, :]
        fv = f0(px, py) if callable(f0) else np.full(px.shape, float(f0))
        local = (np.asarray(fv) * W[None, :]) @ shape * h * h
        np.add.at(F, s.cell_dofs.ravel(), local.ravel())

    if m.n_iface and (callable(f1) or f1 != 0):
        a = m.node_xy[m.if_nodes[:, 0]]
        b = m.node_xy[m.if_nodes[:, 1]]
        px = a[:, 0, None] + (b - a)[:, 0, None] * xg[None, :]
        py = a[:, 1, None] + (b - a)[:, 1, None] * xg[None, :]
        fv = f1(px, py) if callable(f1) else np.full(px.shape, float(f1))
        shape = np.column_stack([1 - xg, xg])
        local = (np.asarray(fv) * wg[None, :]) @ shape * h
        np.add.at(F, s.iface_dofs.ravel(), local.ravel())
    return F[s.free]


# -- solvers and norms ------------------------------------------------------


def factorize_spd(A: sp.spmatrix):
    """Sparse LU with diagonal pivoting; fails unless every pivot is positive."""
    A = sp.csc_matrix(A)
    try:
        lu = spla.splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                       options=dict(SymmetricMode=True))
    except RuntimeError as err:
        raise FactorizationError(f"factorization failed: {err}") from err
    pivots = lu.U.diagonal()
    if not np.all(pivots > 0):
        raise FactorizationError(f"operator is not positive definite (min pivot {pivots.min():.3e})")
    return lu


def factorize_saddle(K: sp.spmatrix):
    try:
        return spla.splu(sp.csc_matrix(K))
    except RuntimeError as err:
        raise FactorizationError(f"saddle point factorization failed: {err}") from err


def solve_dirichlet(A: EnergyOperator | sp.spmatrix, F: np.ndarray) -> np.ndarray:
    M = A.matrix if isinstance(A, EnergyOperator) else A
    F = np.asarray(F, dtype=float)
    if M.shape[0] == 0:
        return np.zeros(0)
    return factorize_spd(M).solve(F)


def energy_norm(A: EnergyOperator | sp.spmatrix, v: np.ndarray) -> float:
    M = A.matrix if isinstance(A, EnergyOperator) else A
    if isinstance(A, EnergyOperator):
        v = A.space.restrict(v)
    v = np.asarray(v, dtype=float)
    scale = float(np.abs(v).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    # normalise first so tiny or huge vectors neither underflow nor overflow
    w = v / scale
    Mw = M @ w
    q = float(w @ Mw)
    if q < -1e-12 * max(1.0, float(np.linalg.norm(w) * np.linalg.norm(Mw))):
        raise ValueError(f"negative energy {q * scale ** 2!r}: operator is not positive semidefinite")
    return scale * float(np.sqrt(max(q, 0.0)))


# -- transfer between nested fine spaces -----------------------------------


def prolongation_matrix(src: DofMap, dst: DofMap) -> sp.csr_matrix:
    """Interpolation from the full dofs of ``src`` to the full dofs of the nested finer ``dst``.

    Exact for nested grids, where the coarser bilinear/linear space is a
    subspace of the finer one.  Each bulk copy is interpolated within its own
    segment, each interface dof along the coarse interface edge containing it.
    """
    ms, md = src.mesh, dst.mesh
    xy = dst.dof_xy
    nb = dst.n_bulk_dofs

    # every destination bulk dof through one destination cell touching it
    cell_of = np.empty(nb, dtype=np.int64)
    cell_of[dst.cell_dofs.ravel()] = np.repeat(np.arange(md.n_cells), 4)
    cc = md.cell_center[cell_of]
    si = np.clip(np.floor((cc[:, 0] - ms.origin[0]) / ms.size).astype(int), 0, ms.nx - 1)
    sj = np.clip(np.floor((cc[:, 1] - ms.origin[1]) / ms.size).astype(int), 0, ms.ny - 1)
    sc = si + ms.nx * sj
    if not np.array_equal(ms.cell_segment[sc], md.cell_segment[cell_of]):
        raise ValueError("spaces are not nested: fine cells change segment under their coarse parent")
    corner = ms.node_xy[ms.cell_nodes[sc, 0]]
    X = (xy[:nb, 0] - corner[:, 0]) / ms.size
    Y = (xy[:nb, 1] - corner[:, 1]) / ms.size
    sh = np.column_stack([(1 - X) * (1 - Y), X * (1 - Y), X * Y, (1 - X) * Y])
    rows = [np.repeat(np.arange(nb), 4)]
    cols = [src.cell_dofs[sc].ravel()]
    vals = [sh.ravel()]

    if dst.n_iface_dofs:
        edge_of = np.empty(dst.n_dofs, dtype=np.int64)
        edge_of[dst.iface_dofs.ravel()] = np.repeat(np.arange(md.n_iface), 2)
        sa, sb = ms.node_xy[ms.if_nodes[:, 0]], ms.node_xy[ms.if_nodes[:, 1]]
        for k in range(nb, dst.n_dofs):
            a, b = md.node_xy[md.if_nodes[edge_of[k]]]
            mid = 0.5 * (a + b)
            d = sb - sa
            L2 = np.einsum("ij,ij->i", d, d)
            lam_mid = np.einsum("ij,ij->i", mid - sa, d) / L2
            off = np.abs(d[:, 0] * (mid - sa)[:, 1] - d[:, 1] * (mid - sa)[:, 0]) / np.sqrt(L2)
            hit = np.flatnonzero((lam_mid >= 0) & (lam_mid <= 1) & (off <= 1e-9 * ms.size))
            if not len(hit):
                raise ValueError("spaces are not nested: fine interface edge off the coarse interface")
            e = hit[0]
            lam = float(np.dot(xy[k] - sa[e], d[e]) / L2[e])
            da, db = src.iface_dofs[e]
            rows.append(np.array([k, k]))
            cols.append(np.array([da, db]))
            vals.append(np.array([1 - lam, lam]))
    P = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(dst.n_dofs, src.n_dofs))
    P.eliminate_zeros()
    return P


def prolongate(src: DofMap, dst: DofMap, v: np.ndarray) -> np.ndarray:
    """Interpolate a (full or free) vector on ``src`` into the nested finer space ``dst``."""
    return prolongation_matrix(src, dst) @ src.full(v)


def field_to_csv(s: DofMap, v: np.ndarray, path) -> None:
    """Write a field as rows ``x, y, segment, value`` (segment as ``codim:index``)."""
    v = s.full(v)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "segment", "value"])
        for k in range(s.n_dofs):
            codim = 0 if k < s.n_bulk_dofs else 1
            x, y = s.dof_xy[k]
            w.writerow([repr(float(x)), repr(float(y)), f"{codim}:{s.dof_segment[k]}", repr(float(v[k]))])

"""Localized orthogonal decomposition on the mixed-dimensional fine space.

Coarse elements are numbered bulk first, then interface.  Everything that
enters a corrector depends on its argument only through the coarse
averages, so correctors are keyed by QOI vectors rather than by functions.
"""
from __future__ import annotations

import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .fem import (CoefficientSet, DofMap, EnergyOperator, FactorizationError, assemble_weighted,
                  build_space, coefficient_weights, factorize_saddle, prolongation_matrix, restricted_weights)
from .mesh import MeshHierarchy, Patch

log = logging.getLogger(__name__)

VARIANTS = ("global", "stabilized", "naive")


class BasisError(RuntimeError):
    pass


# -- quantities of interest -------------------------------------------------


def assemble_constraints(s: DofMap, h: MeshHierarchy, free: bool = True) -> sp.csr_matrix:
    """Matrix ``B`` with ``B v = qoi(v)``: one row per coarse element.

    A bilinear hat integrates to ``h^2 / 4`` over each fine cell it touches
    and a linear hat to ``h / 2`` over each fine interface edge.
    """
    m = s.mesh
    if m is not h.fine:
        raise ValueError("space and hierarchy use different fine meshes")
    hh = m.size
    rows = [np.repeat(h.bulk_parent, 4)]
    cols = [s.cell_dofs.ravel()]
    vals = [np.repeat(hh * hh / 4.0 / h.bulk_volume[h.bulk_parent], 4)]
    if m.n_iface:
        rows.append(np.repeat(h.iface_parent + h.n_bulk, 2))
        cols.append(s.iface_dofs.ravel())
        vals.append(np.repeat(hh / 2.0 / h.iface_length[h.iface_parent], 2))
    B = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(h.n_coarse, s.n_dofs))
    return B[:, s.free].tocsr() if free else B


def qoi(s: DofMap, h: MeshHierarchy, v: np.ndarray) -> np.ndarray:
    """Coarse-element averages of ``v`` (bulk elements, then interface elements)."""
    B = assemble_constraints(s, h, free=False)
    return B @ s.full(v)


def constraint_weights(h: MeshHierarchy, T0: int) -> np.ndarray:
    """Row weights of ``b_T0``: 1 on ``T0``, ``1/n(T1)`` on its interface faces."""
    w = np.zeros(h.n_coarse)
    w[T0] = 1.0
    faces = h.faces[T0]
    w[faces + h.n_bulk] = 1.0 / h.n_of[faces]
    return w


# -- quasi-interpolation ----------------------------------------------------


def _nodal_interpolation(s: DofMap, h: MeshHierarchy) -> sp.csr_matrix:
    if h.coarse is None:
        raise ValueError("nodal interpolation needs a uniform coarse mesh; use mode='pou'")
    cs = build_space(h.coarse)
    cm = h.coarse
    # coarse dof value = mean of the QOIs of its segment copy's coarse elements at that node
    rows = [cs.cell_dofs.ravel()]
    cols = [np.repeat(np.arange(cm.n_cells), 4)]
    if cm.n_iface:
        rows.append(cs.iface_dofs.ravel())
        cols.append(np.repeat(np.arange(cm.n_iface) + h.n_bulk, 2))
    Q = sp.csr_matrix((np.ones(sum(len(r) for r in rows)), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(cs.n_dofs, h.n_coarse))
    Q.sum_duplicates()
    Q.data[:] = 1.0
    count = np.asarray(Q.sum(axis=1)).ravel()
    scale = np.where(cs.dirichlet, 0.0, 1.0 / np.maximum(count, 1))
    Q = sp.diags(scale) @ Q
    return (prolongation_matrix(cs, s) @ Q).tocsr()


def _dijkstra(n: int, adj: list[list[tuple[int, float]]], sources) -> np.ndarray:
    dist = np.full(n, np.inf)
    heap = []
    for k in sources:
        dist[k] = 0.0
        heap.append((0.0, int(k)))
    heapq.heapify(heap)
    while heap:
        d, k = heapq.heappop(heap)
        if d > dist[k]:
            continue
        for j, w in adj[k]:
            nd = d + w
            if nd < dist[j]:
                dist[j] = nd
                heapq.heappush(heap, (nd, j))
    return dist


def _intrinsic_distance(s: DofMap, elem_dofs: np.ndarray, elem_in: np.ndarray, incidence: sp.csr_matrix,
                        boundary_node: np.ndarray) -> np.ndarray:
    """Graph distance to the boundary of the cover, for the dofs inside it.

    ``elem_dofs`` lists the dofs of each fine element (cell or edge) and
    ``elem_in`` flags the cover's elements.  Edges join dofs of a common
    element with Euclidean weights, so paths stay in one bulk segment copy
    (or on the interface network).  Dofs outside the cover get 0, as do dofs
    the boundary cannot reach.
    """
    xy = s.dof_xy
    inside = np.asarray(incidence[elem_in].sum(axis=0)).ravel()
    total = np.asarray(incidence.sum(axis=0)).ravel()
    in_cover = inside > 0
    # on the boundary: touches an element outside the cover (in any segment) or lies on the outer boundary
    node_total = np.bincount(s.dof_node, weights=total, minlength=s.mesh.n_nodes)
    node_inside = np.bincount(s.dof_node, weights=inside, minlength=s.mesh.n_nodes)
    # bulk dofs at one node are all copies: compare elements touching the node in any segment
    on_bnd = in_cover & ((node_inside[s.dof_node] < node_total[s.dof_node]) | boundary_node[s.dof_node])

    idx = np.flatnonzero(in_cover)
    local = {int(k): i for i, k in enumerate(idx)}
    adj: list[list[tuple[int, float]]] = [[] for _ in idx]
    for e in np.flatnonzero(elem_in):
        dofs = elem_dofs[e]
        for a in range(len(dofs)):
            for b in range(a + 1, len(dofs)):
                ia, ib = local[int(dofs[a])], local[int(dofs[b])]
                w = float(np.hypot(*(xy[dofs[a]] - xy[dofs[b]])))
                adj[ia].append((ib, w))
                adj[ib].append((ia, w))
    dist = _dijkstra(len(idx), adj, [local[int(k)] for k in np.flatnonzero(on_bnd)])
    dist[~np.isfinite(dist)] = 0.0
    out = np.zeros(s.n_dofs)
    out[idx] = dist
    return out


def _pou_interpolation(s: DofMap, h: MeshHierarchy) -> sp.csr_matrix:
    m = s.mesh
    lam = np.zeros((s.n_dofs, h.n_coarse))
    for T in range(h.n_coarse):
        cover = h.first_order_cover(T)
        if T < h.n_bulk:
            cells = np.isin(h.bulk_parent, cover.bulk)
            lam[:, T] = _intrinsic_distance(s, s.cell_dofs, cells, s.cell_incidence, m.boundary_node)
        else:
            edges = np.isin(h.iface_parent, cover.iface)
            lam[:, T] = _intrinsic_distance(s, s.iface_dofs, edges, s.iface_incidence, m.boundary_node)
    lam[s.dirichlet] = 0.0
    bulk = s.is_bulk()
    lam[bulk, h.n_bulk:] = 0.0
    lam[~bulk, :h.n_bulk] = 0.0
    den = lam.sum(axis=1)
    bad = (den <= 0) & ~s.dirichlet
    if bad.any():
        raise BasisError(f"partition of unity degenerates at {int(bad.sum())} free dofs; the cover is broken")
    lam[~s.dirichlet] /= den[~s.dirichlet, None]
    return sp.csr_matrix(lam)


def interpolation_matrix(s: DofMap, h: MeshHierarchy, mode: str = "nodal") -> sp.csr_matrix:
    """Matrix ``P`` (free dofs x coarse elements) with ``I_H v = P qoi(v)``."""
    if mode == "nodal":
        P = _nodal_interpolation(s, h)
    elif mode == "pou":
        P = _pou_interpolation(s, h)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    return P[s.free].tocsr()


def quasi_interpolate(s: DofMap, h: MeshHierarchy, q: np.ndarray, mode: str = "nodal") -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.shape[0] != h.n_coarse:
        raise ValueError(f"expected {h.n_coarse} coarse values, got {q.shape[0]}")
    return interpolation_matrix(s, h, mode) @ q


# -- problem setup ----------------------------------------------------------


@dataclass(eq=False)
class LodProblem:
    """Fine space, operators and interpolation shared by all LOD computations."""

    hierarchy: MeshHierarchy
    space: DofMap
    coefficients: CoefficientSet
    mode: str = "nodal"
    threads: int = 1
    _restricted: dict = field(default_factory=dict, repr=False)

    @cached_property
    def weights(self):
        return coefficient_weights(self.space, self.coefficients)

    @cached_property
    def A(self) -> EnergyOperator:
        full = assemble_weighted(self.space, *self.weights)
        f = self.space.free
        return EnergyOperator(space=self.space, matrix=full[f][:, f].tocsr(), full=full)

    @cached_property
    def B(self) -> sp.csr_matrix:
        return assemble_constraints(self.space, self.hierarchy)

    @cached_property
    def P(self) -> sp.csr_matrix:
        return interpolation_matrix(self.space, self.hierarchy, self.mode)

    @property
    def n_coarse(self) -> int:
        return self.hierarchy.n_coarse

    def restricted_operator(self, T0: int) -> sp.csr_matrix:
        """``a_T0`` on the free dofs."""
        if T0 not in self._restricted:
            w = restricted_weights(self.space, self.weights, self.hierarchy, T0)
            f = self.space.free
            self._restricted[T0] = assemble_weighted(self.space, *w)[f][:, f].tocsr()
        return self._restricted[T0]

    @cached_property
    def _free_cell_incidence(self) -> sp.csr_matrix:
        return self.space.cell_incidence[:, self.space.free].tocsc()

    @cached_property
    def _free_iface_incidence(self) -> sp.csr_matrix:
        return self.space.iface_incidence[:, self.space.free].tocsc()

    def patch_dofs(self, patch: Patch) -> np.ndarray:
        """Free dofs strictly inside the patch: every fine element touching them lies in it."""
        h = self.hierarchy
        cells = np.isin(h.bulk_parent, patch.bulk).astype(float)
        edges = np.isin(h.iface_parent, patch.iface).astype(float)
        Cb, Ci = self._free_cell_incidence, self._free_iface_incidence
        tot = np.asarray(Cb.sum(axis=0)).ravel() + np.asarray(Ci.sum(axis=0)).ravel()
        ins = Cb.T @ cells + Ci.T @ edges
        return np.flatnonzero((ins == tot) & (tot > 0))


def setup(hierarchy: MeshHierarchy, coefficients: CoefficientSet | None = None, mode: str = "nodal",
          threads: int = 1) -> LodProblem:
    return LodProblem(hierarchy=hierarchy, space=build_space(hierarchy.fine),
                      coefficients=coefficients or CoefficientSet(), mode=mode, threads=threads)


# -- saddle-point solves ----------------------------------------------------


def _kkt(A: sp.spmatrix, B: sp.spmatrix):
    n, m = A.shape[0], B.shape[0]
    if m and np.any(np.diff(B.tocsr().indptr) == 0):
        raise BasisError("constraint row without support in the patch: the constraint block is rank deficient")
    K = sp.bmat([[A, B.T], [B, None]], format="csc")
    return factorize_saddle(K), n, m


def _solve_kkt(lu, rhs: np.ndarray) -> np.ndarray:
    x = lu.solve(np.asarray(rhs, dtype=float))
    if not np.all(np.isfinite(x)):
        raise FactorizationError("saddle point solve produced non-finite values")
    return x


@dataclass
class CorrectorResult:
    corrector: np.ndarray      # free dofs, zero outside the patch
    multipliers: np.ndarray    # one value per patch multiplier
    patch: Patch
    dofs: np.ndarray


def _corrector_rhs(pb: LodProblem, T0: int, Q: np.ndarray):
    I = pb.P @ Q
    rhs1 = pb.restricted_operator(T0) @ I
    w = constraint_weights(pb.hierarchy, T0)
    rhs2 = -(w[:, None] * (Q - pb.B @ I))
    return rhs1, rhs2


def corrector_solve(pb: LodProblem, T0: int, ell: int, Q: np.ndarray) -> CorrectorResult:
    """Localized corrector ``K^ell_T0`` for arguments with coarse averages ``Q``.

    ``Q`` holds one QOI vector (``N``) or a block of them (``N x k``).
    """
    h = pb.hierarchy
    if ell < 1:
        raise ValueError("oversampling parameter must be at least 1")
    if not 0 <= T0 < h.n_bulk:
        raise IndexError(f"{T0} is not a coarse bulk element")
    Q = np.asarray(Q, dtype=float)
    vec = Q.ndim == 1
    Q2 = Q[:, None] if vec else Q
    patch = h.patch(T0, ell)
    dofs = pb.patch_dofs(patch)
    M = patch.multipliers
    lu, n, m = _kkt(pb.A.matrix[dofs][:, dofs], pb.B[M][:, dofs])
    rhs1, rhs2 = _corrector_rhs(pb, T0, Q2)
    x = _solve_kkt(lu, np.vstack([rhs1[dofs], rhs2[M]]))
    out = np.zeros((pb.space.n_free, Q2.shape[1]))
    out[dofs] = x[:n]
    lam = x[n:]
    if vec:
        out, lam = out[:, 0], lam[:, 0]
    return CorrectorResult(corrector=out, multipliers=lam, patch=patch, dofs=dofs)


def _active_columns(pb: LodProblem, T0: int) -> np.ndarray:
    """Coarse elements whose unit QOI gives ``T0`` a nonzero corrector right-hand side."""
    I = pb.P
    r1 = abs(pb.restricted_operator(T0) @ I)
    hit = np.asarray(r1.sum(axis=0)).ravel() > 0
    w = constraint_weights(pb.hierarchy, T0)
    rows = np.flatnonzero(w)
    BI = (pb.B[rows] @ I).toarray()
    E = np.zeros((len(rows), pb.n_coarse))
    E[np.arange(len(rows)), rows] = 1.0
    hit |= np.any(E - BI != 0, axis=0)
    return np.flatnonzero(hit)


def _map(pb: LodProblem, fn, items):
    if pb.threads <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(pb.threads) as pool:
        return list(pool.map(fn, items))


# -- basis ------------------------------------------------------------------


@dataclass
class MultiscaleBasis:
    matrix: np.ndarray    # free dofs x coarse elements
    variant: str
    ell: float

    @property
    def n(self) -> int:
        return self.matrix.shape[1]

    def column(self, T: int) -> np.ndarray:
        return self.matrix[:, T]


def _global_basis(pb: LodProblem) -> np.ndarray:
    lu, n, m = _kkt(pb.A.matrix, pb.B)
    rhs = np.vstack([np.zeros((n, m)), np.eye(m)])
    return _solve_kkt(lu, rhs)[:n]


def _stabilized_basis(pb: LodProblem, ell: int) -> np.ndarray:
    h = pb.hierarchy
    Phi = pb.P.toarray()

    def work(T0):
        cols = _active_columns(pb, T0)
        if not len(cols):
            return cols, None
        E = np.zeros((pb.n_coarse, len(cols)))
        E[cols, np.arange(len(cols))] = 1.0
        return cols, corrector_solve(pb, T0, ell, E).corrector

    # ordered reduction over T0 keeps the sum independent of the thread count
    for cols, K in _map(pb, work, range(h.n_bulk)):
        if K is not None:
            Phi[:, cols] -= K
    return Phi


def _naive_basis(pb: LodProblem, ell: int) -> np.ndarray:
    h = pb.hierarchy
    A, B = pb.A.matrix, pb.B

    def work(T):
        patch = h.patch(T, ell)
        dofs = pb.patch_dofs(patch)
        M = patch.multipliers
        lu, n, m = _kkt(A[dofs][:, dofs], B[M][:, dofs])
        rhs = np.zeros(n + m)
        rhs[n + int(np.flatnonzero(M == T)[0])] = 1.0
        return dofs, _solve_kkt(lu, rhs)[:n]

    Phi = np.zeros((pb.space.n_free, pb.n_coarse))
    for T, (dofs, x) in enumerate(_map(pb, work, range(pb.n_coarse))):
        Phi[dofs, T] = x
    return Phi


def build_basis(pb: LodProblem, ell: int | None, variant: str) -> MultiscaleBasis:
    """Multiscale basis, one fine column per coarse element."""
    if variant == "global":
        return MultiscaleBasis(_global_basis(pb), "global", float("inf"))
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if ell is None or ell < 1:
        raise ValueError("localized variants need an oversampling parameter ell >= 1")
    if variant == "stabilized":
        return MultiscaleBasis(_stabilized_basis(pb, int(ell)), variant, int(ell))
    return MultiscaleBasis(_naive_basis(pb, int(ell)), variant, int(ell))


def solve_multiscale(basis: MultiscaleBasis | np.ndarray, A: EnergyOperator | sp.spmatrix, F: np.ndarray):
    """Coarse Galerkin solve; returns coarse coefficients and the fine function."""
    Phi = basis.matrix if isinstance(basis, MultiscaleBasis) else np.asarray(basis)
    M = A.matrix if isinstance(A, EnergyOperator) else A
    K = Phi.T @ (M @ Phi)
    K = 0.5 * (K + K.T)
    rhs = Phi.T @ np.asarray(F, dtype=float)
    try:
        c = sla.solve(K, rhs, assume_a="pos")
    except (sla.LinAlgError, ValueError) as err:
        raise BasisError(f"coarse matrix is singular: {err}") from err
    return c, Phi @ c


def apply_Rl(pb: LodProblem, ell: int, v: np.ndarray) -> np.ndarray:
    """``R^ell v = I_H v - sum_T0 K^ell_T0 v`` for a free (or full) fine vector."""
    q = pb.B @ pb.space.restrict(v)
    out = pb.P @ q

    def work(T0):
        return corrector_solve(pb, T0, ell, q).corrector

    for K in _map(pb, work, range(pb.hierarchy.n_bulk)):
        out = out - K
    return out


def decay_profile(pb: LodProblem, phi: np.ndarray, T: int, max_m: int) -> np.ndarray:
    """Unit-coefficient norm of ``phi`` outside the patches ``N_m(T)``, ``m = 1..max_m``.

    Jumps count on interface elements whose bulk side and interface element
    both lie outside the patch.
    """
    h, s = pb.hierarchy, pb.space
    v = s.full(phi)
    sides = s.mesh.if_sides
    out = []
    for m in range(1, max_m + 1):
        p = h.patch(T, m)
        wb = (~np.isin(h.bulk_parent, p.bulk)).astype(float)
        wi = (~np.isin(h.iface_parent, p.iface)).astype(float)
        side_out = np.where(sides >= 0, wb[np.maximum(sides, 0)] > 0, False)
        wc = (side_out & (wi[:, None] > 0)).astype(float)
        M = assemble_weighted(s, wb, wi, wc)
        out.append(float(np.sqrt(max(v @ (M @ v), 0.0))))
    return np.array(out)


def export_basis(basis: MultiscaleBasis, path) -> None:
    """Write the basis as column-compressed text: one line per nonzero, ``col row value``."""
    Phi = sp.csc_matrix(basis.matrix)
    with open(path, "w") as fh:
        fh.write(f"# variant={basis.variant} ell={basis.ell} shape={Phi.shape[0]}x{Phi.shape[1]}\n")
        for j in range(Phi.shape[1]):
            lo, hi = Phi.indptr[j], Phi.indptr[j + 1]
            for i, x in zip(Phi.indices[lo:hi], Phi.data[lo:hi]):
                fh.write(f"{j} {i} {float(x)!r}\n")

"""Scaled-gradient finite elements on extruded raster domains A x I.

The plate cross-section is already rescaled to I = (-1/2, 1/2); thinness h
enters only through the scaled gradient (d1, d2, h^-1 d3).  Elements are
trilinear hexahedra with 2x2x2 Gauss quadrature, which integrates every
energy term exactly whenever the density is constant on a cell.  That
exactness is what makes the coercivity and additivity identities of the
corrector module hold at the discrete level instead of only in the limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .symmat import SQRT2, vec6_of_iota

_GPTS1 = np.array([0.5 - 0.5 / np.sqrt(3.0), 0.5 + 0.5 / np.sqrt(3.0)])


# -- in-plane raster ---------------------------------------------------------

class RasterDomain:
    """Axis-aligned cell raster of an open set A in the mid-surface plane.

    Cell (i, j) covers origin + [i, i+1] x [j, j+1] scaled by the spacing.
    Nodes touching no occupied cell carry no degrees of freedom.  Lateral
    boundary nodes are the active nodes adjacent to unoccupied space or to
    the bounding box; the lateral Dirichlet condition pins them.
    """

    def __init__(self, origin, delta, occupancy):
        occupancy = np.asarray(occupancy, dtype=bool)
        if occupancy.ndim != 2 or not occupancy.any():
            raise ValueError("raster needs a 2d occupancy bitmap with >= 1 occupied cell")
        if delta <= 0:
            raise ValueError(f"spacing must be positive, got {delta}")
        self.origin = (float(origin[0]), float(origin[1]))
        self.delta = float(delta)
        self.occupancy = occupancy
        self.n1, self.n2 = occupancy.shape
        self._build_nodes()

    def _build_nodes(self):
        occ = self.occupancy
        # node (i, j) of the (n1+1) x (n2+1) grid is active if any of the up
        # to four surrounding cells is occupied
        padded = np.zeros((self.n1 + 2, self.n2 + 2), dtype=bool)
        padded[1:-1, 1:-1] = occ
        touch = (padded[:-1, :-1] | padded[1:, :-1]
                 | padded[:-1, 1:] | padded[1:, 1:])
        self.node_active = touch
        nid = -np.ones(touch.shape, dtype=np.int64)
        nid[touch] = np.arange(touch.sum())
        self.node_id = nid
        self.n_nodes = int(touch.sum())
        ii, jj = np.nonzero(touch)
        self.node_xy = np.column_stack([self.origin[0] + ii * self.delta,
                                        self.origin[1] + jj * self.delta])
        self._node_ij = np.column_stack([ii, jj])
        # lateral boundary: active node with at least one unoccupied neighbor slot
        exterior = (~padded[:-1, :-1] | ~padded[1:, :-1]
                    | ~padded[:-1, 1:] | ~padded[1:, 1:])
        self.lateral = touch & exterior
        ci, cj = np.nonzero(occ)
        self.cell_ij = np.column_stack([ci, cj])
        # bilinear 2d connectivity, local order (di, dj) -> 2*di + dj
        self.cell_nodes = np.stack([nid[ci, cj], nid[ci, cj + 1],
                                    nid[ci + 1, cj], nid[ci + 1, cj + 1]], axis=1)

    @property
    def n_cells(self):
        return len(self.cell_ij)

    @property
    def area(self):
        return self.n_cells * self.delta ** 2

    def cell_centers(self):
        return (np.asarray(self.origin)[None, :]
                + (self.cell_ij + 0.5) * self.delta)

    def lateral_node_ids(self):
        return self.node_id[self.lateral]

    def interior_node_ids(self):
        return self.node_id[self.node_active & ~self.lateral]

    def component_labels(self):
        """Connected-component index per occupied cell (4-connectivity)."""
        from scipy.ndimage import label
        lab, _ = label(self.occupancy)
        return lab[self.cell_ij[:, 0], self.cell_ij[:, 1]] - 1

    def node_component_labels(self):
        """Component index per active node (nodes shared by one component only)."""
        from scipy.ndimage import label
        lab, n = label(self.occupancy)
        padded = np.zeros((self.n1 + 2, self.n2 + 2), dtype=np.int32)
        padded[1:-1, 1:-1] = lab
        stack = np.stack([padded[:-1, :-1], padded[1:, :-1],
                          padded[:-1, 1:], padded[1:, 1:]])
        node_lab = stack.max(axis=0)
        return node_lab[self.node_active] - 1


def rasterize_ball(x0, r, delta):
    """Raster of the Euclidean ball B(x0, r) by cell-center membership."""
    if r < 2 * delta:
        raise ValueError(f"ball of radius {r} under-resolved at spacing {delta}")
    n = int(np.ceil(r / delta)) + 1
    origin = (x0[0] - n * delta, x0[1] - n * delta)
    idx = np.arange(2 * n)
    cx = origin[0] + (idx + 0.5) * delta
    cy = origin[1] + (idx + 0.5) * delta
    occ = (cx[:, None] - x0[0]) ** 2 + (cy[None, :] - x0[1]) ** 2 < r ** 2
    return RasterDomain(origin, delta, occ)


def rasterize_rect(origin, n1, n2, delta):
    """Exact axis-aligned rectangle of n1 x n2 cells (no rasterization error)."""
    return RasterDomain(origin, delta, np.ones((n1, n2), dtype=bool))


def union_rasters(a: RasterDomain, b: RasterDomain) -> RasterDomain:
    """Union of two rasters with equal spacing; occupancies must not overlap."""
    if abs(a.delta - b.delta) > 1e-15:
        raise ValueError("raster union needs equal spacings")
    step = a.delta
    oa = np.asarray(a.origin)
    ob = np.asarray(b.origin)
    shift = (ob - oa) / step
    if np.linalg.norm(shift - np.round(shift)) > 1e-9:
        raise ValueError("raster origins are not grid-commensurate")
    shift = np.round(shift).astype(int)
    lo = np.minimum([0, 0], shift)
    hi = np.maximum([a.n1, a.n2], shift + [b.n1, b.n2])
    occ = np.zeros(hi - lo, dtype=bool)
    occ[-lo[0]:-lo[0] + a.n1, -lo[1]:-lo[1] + a.n2] = a.occupancy
    sub = occ[shift[0] - lo[0]:shift[0] - lo[0] + b.n1,
              shift[1] - lo[1]:shift[1] - lo[1] + b.n2]
    if (sub & b.occupancy).any():
        raise ValueError("rasters overlap; union must be disjoint")
    sub |= b.occupancy
    return RasterDomain(oa + lo * step, step, occ)


# -- extruded grid -----------------------------------------------------------

class ExtrudedGrid:
    """Hexahedral grid over base x I with nz uniform layers."""

    def __init__(self, base: RasterDomain, nz: int):
        if nz < 2:
            raise ValueError(f"need nz >= 2 layers, got {nz}")
        self.base = base
        self.nz = int(nz)
        self.wz = 1.0 / nz
        self.x3_nodes = -0.5 + np.arange(nz + 1) * self.wz
        self.n_nodes = base.n_nodes * (nz + 1)
        self.n_dof = 3 * self.n_nodes
        self._dofmap = None

    # 3d node id of (in-plane node nid2, layer k) is nid2 * (nz+1) + k
    def node3(self, nid2, k):
        return nid2 * (self.nz + 1) + k

    @property
    def n_cells(self):
        return self.base.n_cells * self.nz

    @property
    def volume(self):
        return self.base.area  # |I| = 1

    def dofmap(self):
        """(n_cells, 24) dof indices; local node l = 4*di + 2*dj + dk."""
        if self._dofmap is None:
            nz = self.nz
            cn = self.base.cell_nodes  # (nc2, 4) in (di, dj) order
            k = np.arange(nz)
            nodes = np.empty((self.base.n_cells, nz, 8), dtype=np.int64)
            for di in range(2):
                for dj in range(2):
                    base_ids = cn[:, 2 * di + dj]
                    col = base_ids[:, None] * (nz + 1) + k[None, :]
                    nodes[:, :, 4 * di + 2 * dj + 0] = col
                    nodes[:, :, 4 * di + 2 * dj + 1] = col + 1
            nodes = nodes.reshape(-1, 8)
            dof = (3 * nodes[:, :, None] + np.arange(3)[None, None, :])
            self._dofmap = dof.reshape(-1, 24)
        return self._dofmap

    def quad_points(self):
        """Quadrature coordinates (n_cells, 8, 3) and the common weight."""
        d = self.base.delta
        centers = self.base.cell_centers()  # (nc2, 2)
        k = np.arange(self.nz)
        z0 = self.x3_nodes[:-1]
        gx = (_GPTS1 - 0.5) * d
        gz = _GPTS1 * self.wz
        # local q index: 4*a + 2*b + c over (gx[a], gx[b], gz[c])
        loc = np.empty((8, 3))
        for a in range(2):
            for b in range(2):
                for c in range(2):
                    loc[4 * a + 2 * b + c] = (gx[a], gx[b], gz[c])
        pts = np.empty((self.base.n_cells, self.nz, 8, 3))
        pts[:, :, :, 0] = centers[:, None, None, 0] + loc[None, None, :, 0]
        pts[:, :, :, 1] = centers[:, None, None, 1] + loc[None, None, :, 1]
        pts[:, :, :, 2] = z0[None, :, None] + loc[None, None, :, 2]
        weight = d * d * self.wz / 8.0
        return pts.reshape(-1, 8, 3), weight

    def shape_values(self):
        """(8 quad, 8 node) trilinear shape values on the reference cell."""
        vals = np.empty((8, 8))
        for q in range(8):
            xi = (_GPTS1[(q >> 2) & 1], _GPTS1[(q >> 1) & 1], _GPTS1[q & 1])
            for l in range(8):
                d = ((l >> 2) & 1, (l >> 1) & 1, l & 1)
                v = 1.0
                for t, dt in zip(xi, d):
                    v *= t if dt else 1.0 - t
                vals[q, l] = v
        return vals

    def shape_gradients(self, h):
        """Scaled physical shape gradients (8 quad, 8 node, 3)."""
        d = self.base.delta
        scale = np.array([1.0 / d, 1.0 / d, 1.0 / (h * self.wz)])
        grads = np.empty((8, 8, 3))
        for q in range(8):
            xi = (_GPTS1[(q >> 2) & 1], _GPTS1[(q >> 1) & 1], _GPTS1[q & 1])
            for l in range(8):
                dd = ((l >> 2) & 1, (l >> 1) & 1, l & 1)
                for axis in range(3):
                    g = 1.0
                    for t_axis, (t, dt) in enumerate(zip(xi, dd)):
                        if t_axis == axis:
                            g *= 1.0 if dt else -1.0
                        else:
                            g *= t if dt else 1.0 - t
                    grads[q, l, axis] = g * scale[axis]
        return grads

    def strain_matrices(self, h):
        """B matrices (8 quad, 6, 24): vec6(sym grad_h psi) = B @ psi_local."""
        g = self.shape_gradients(h)
        B = np.zeros((8, 6, 24))
        for l in range(8):
            c0, c1, c2 = 3 * l, 3 * l + 1, 3 * l + 2
            B[:, 0, c0] = g[:, l, 0]
            B[:, 1, c1] = g[:, l, 1]
            B[:, 2, c2] = g[:, l, 2]
            B[:, 3, c0] = g[:, l, 1] / SQRT2
            B[:, 3, c1] = g[:, l, 0] / SQRT2
            B[:, 4, c0] = g[:, l, 2] / SQRT2
            B[:, 4, c2] = g[:, l, 0] / SQRT2
            B[:, 5, c1] = g[:, l, 2] / SQRT2
            B[:, 5, c2] = g[:, l, 1] / SQRT2
        return B

    def lateral_dof_mask(self):
        mask = np.zeros(self.n_dof, dtype=bool)
        lat2 = self.base.lateral_node_ids()
        for k in range(self.nz + 1):
            n3 = self.node3(lat2, k)
            for comp in range(3):
                mask[3 * n3 + comp] = True
        return mask

    def node_values(self, psi):
        """Reshape a flat dof vector to (n in-plane nodes, nz+1, 3)."""
        return np.asarray(psi).reshape(self.base.n_nodes, self.nz + 1, 3)

    def flat_values(self, arr):
        return np.asarray(arr).reshape(-1)


# -- quadratic system --------------------------------------------------------

@dataclass
class QuadSystem:
    """E(psi) = 1/2 psi^T A psi + b^T psi + c on the full dof vector."""

    A: sp.csr_matrix
    b: np.ndarray
    c: float
    n_dof: int
    constrained: np.ndarray | None = None   # boolean mask of pinned dofs
    _free: np.ndarray | None = None
    _A_ff: sp.csr_matrix | None = None

    def energy(self, psi):
        psi = np.asarray(psi, dtype=float)
        return 0.5 * float(psi @ (self.A @ psi)) + float(self.b @ psi) + self.c

    def grad(self, psi):
        return self.A @ np.asarray(psi, dtype=float) + self.b

    def free_indices(self):
        if self.constrained is None:
            return np.arange(self.n_dof)
        if self._free is None:
            self._free = np.nonzero(~self.constrained)[0]
        return self._free

    def reduced_operator(self):
        if self._A_ff is None:
            free = self.free_indices()
            self._A_ff = self.A[free][:, free].tocsr()
        return self._A_ff


def assemble(grid: ExtrudedGrid, field, h, M1, M2, chunk=4096) -> QuadSystem:
    """Assemble the corrector energy for the imposed strain M1 + x3 M2.

    E(psi) = sum_q w_q q_x(iota(M1 + x3 M2) + grad_h psi) with the local
    density evaluated at every Gauss point, so sub-cell microstructure is
    sampled rather than averaged.  E(0) equals the quadrature value of the
    unrelaxed energy exactly.
    """
    if h <= 0:
        raise ValueError(f"thickness must be positive, got h = {h}")
    m1 = vec6_of_iota(np.asarray(M1, dtype=float))
    m2 = vec6_of_iota(np.asarray(M2, dtype=float))
    B = grid.strain_matrices(h)          # (8, 6, 24)
    pts, wq = grid.quad_points()         # (nc, 8, 3)
    dofmap = grid.dofmap()
    nc = len(dofmap)
    ndof = grid.n_dof

    b_vec = np.zeros(ndof)
    c_val = 0.0
    blocks = []
    for start in range(0, nc, chunk):
        sl = slice(start, min(start + chunk, nc))
        p = pts[sl]
        n = p.shape[0]
        C = field.matrices_at(h, p.reshape(-1, 3)).reshape(n, 8, 6, 6)
        m = m1[None, None, :] + p[:, :, 2, None] * m2[None, None, :]
        CB = np.einsum('nqij,qjb->nqib', C, B)
        A_loc = 2.0 * wq * np.einsum('qia,nqib->nab', B, CB)
        b_loc = 2.0 * wq * np.einsum('nqib,nqi->nb', CB, m)
        c_val += wq * float(np.einsum('nqij,nqi,nqj->', C, m, m))
        dm = dofmap[sl]
        rows = np.repeat(dm, 24, axis=1).ravel()
        cols = np.tile(dm, (1, 24)).ravel()
        blocks.append(sp.coo_matrix((A_loc.ravel(), (rows, cols)),
                                    shape=(ndof, ndof)).tocsr())
        np.add.at(b_vec, dm.ravel(), b_loc.ravel())
    A = blocks[0]
    for blk in blocks[1:]:
        A = A + blk
    A.sum_duplicates()
    return QuadSystem(A=A, b=b_vec, c=c_val, n_dof=ndof)


def apply_lateral_dirichlet(system: QuadSystem, grid: ExtrudedGrid) -> QuadSystem:
    """Pin all three components on lateral-boundary nodes of every layer."""
    mask = grid.lateral_dof_mask()
    if mask.all():
        raise ValueError("degenerate domain: every dof is on the lateral boundary")
    return QuadSystem(A=system.A, b=system.b, c=system.c,
                      n_dof=system.n_dof, constrained=mask)


@dataclass
class CgResult:
    psi: np.ndarray
    iterations: int
    residual: float
    converged: bool


def pcg(A, rhs, tol=1e-9, maxit=20000, project=None):
    """Jacobi-preconditioned conjugate gradients for A x = rhs, from x = 0.

    Deterministic: fixed iteration order, no randomized restarts.  Stops at
    |A x - rhs| / |rhs| <= tol.  An optional projection is applied to the
    residual each iteration (used for singular-consistent systems).
    """
    rhs = np.asarray(rhs, dtype=float)
    norm_b = float(np.linalg.norm(rhs))
    if norm_b == 0.0:
        return np.zeros_like(rhs), 0, 0.0, True
    diag = A.diagonal()
    if np.any(diag <= 0):
        raise ValueError("operator has nonpositive diagonal; system not SPD")
    inv_diag = 1.0 / diag
    x = np.zeros_like(rhs)
    r = rhs.copy()
    if project is not None:
        r = project(r)
    z = inv_diag * r
    p = z.copy()
    rz = float(r @ z)
    it = 0
    res = 1.0
    while it < maxit:
        res = float(np.linalg.norm(r)) / norm_b
        if res <= tol:
            break
        Ap = A @ p
        alpha = rz / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        if project is not None:
            r = project(r)
        z = inv_diag * r
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    else:
        res = float(np.linalg.norm(r)) / norm_b
    return x, it, res, res <= tol


def solve_cg(system: QuadSystem, tol=1e-9, maxit=20000) -> CgResult:
    """Minimize the constrained quadratic: A psi = -b on the free dofs."""
    free = system.free_indices()
    A = system.reduced_operator()
    psi = np.zeros(system.n_dof)
    x, it, res, ok = pcg(A, -system.b[free], tol=tol, maxit=maxit)
    psi[free] = x
    return CgResult(psi=psi, iterations=it, residual=res, converged=ok)


def gradient_check(system: QuadSystem, psi, direction, step):
    """Analytic vs central-difference directional derivative of the energy."""
    if step <= 0:
        raise ValueError("step must be positive")
    psi = np.asarray(psi, dtype=float)
    d = np.asarray(direction, dtype=float)
    analytic = float(system.grad(psi) @ d)
    numeric = (system.energy(psi + step * d) - system.energy(psi - step * d)) / (2 * step)
    return analytic, numeric


# -- field evaluation helpers -------------------------------------------------

def scaled_gradients(grid: ExtrudedGrid, h, psi):
    """grad_h psi at all quadrature points, shape (n_cells, 8, 3, 3)."""
    g = grid.shape_gradients(h)               # (8, 8, 3)
    local = psi_local(grid, psi)              # (nc, 8, 3)
    return np.einsum('nlc,qlj->nqcj', local, g)


def scaled_gradient(grid: ExtrudedGrid, h, psi, cell, q):
    """grad_h psi at quadrature point q of one cell (3x3, rows = components)."""
    g = grid.shape_gradients(h)[q]            # (8, 3)
    local = psi_local(grid, psi)[cell]        # (8, 3)
    return np.einsum('lc,lj->cj', local, g)


def psi_local(grid: ExtrudedGrid, psi):
    """Gather nodal values per cell, shape (n_cells, 8, 3)."""
    psi = np.asarray(psi, dtype=float).reshape(-1)
    return psi[grid.dofmap()].reshape(-1, 8, 3)


def strain_vec6(grid: ExtrudedGrid, h, psi):
    """vec6(sym grad_h psi) at quadrature points, shape (n_cells, 8, 6)."""
    B = grid.strain_matrices(h)
    local = psi_local(grid, psi).reshape(-1, 24)
    return np.einsum('qib,nb->nqi', B, local)


def value_quadrature(grid: ExtrudedGrid, psi):
    """Trilinear values at quadrature points, shape (n_cells, 8, 3)."""
    V = grid.shape_values()
    return np.einsum('ql,nlc->nqc', V, psi_local(grid, psi))


def l2_norm_quadrature(grid: ExtrudedGrid, values):
    """L2 norm over A x I of quadrature-point values (any trailing shape)."""
    _, wq = grid.quad_points()
    flat = np.asarray(values).reshape(values.shape[0], values.shape[1], -1)
    return float(np.sqrt(wq * np.sum(flat ** 2)))

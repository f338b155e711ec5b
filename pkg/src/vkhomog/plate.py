"""Limit plate functional: membrane + bending energy over (u, v) states.

I0(u, v) integrates the effective density at the strain pair
(sym grad u + 1/2 grad v x grad v, -hess v).  The discretization is plain
finite differences: first differences are exact on affine fields and
second differences on quadratics, which makes the infinitesimal
rigid-motion reparametrization an exact discrete symmetry, not an
approximate one.  Minimization alternates an exact solve in u (the energy
is quadratic in u for fixed v) with damped quasi-Newton steps in v
preconditioned by the bending operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from . import fem3d

_SQRT2 = np.sqrt(2.0)
# vec-coordinate scaling between raw strain components and the isometric basis
_P_SCALE = np.array([1.0, 1.0, _SQRT2, 1.0, 1.0, _SQRT2])


class PlateDomain:
    """Rectangular node grid over the mid-surface with a gauge mode.

    mode 'free-gauged' keeps all nodes free and projects the 6-dim null
    family out of minimization steps; 'clamped' pins u and v on the
    boundary and pins v on the first interior ring as well, which is the
    one-sided-difference realization of grad v = 0 on the boundary.
    """

    def __init__(self, origin, n1, n2, delta, mode="free-gauged"):
        if n1 < 2 or n2 < 2:
            raise ValueError("plate grid needs at least 3 nodes per direction")
        if mode not in ("free-gauged", "clamped"):
            raise ValueError(f"unknown boundary mode {mode!r}")
        self.origin = (float(origin[0]), float(origin[1]))
        self.n1, self.n2 = int(n1), int(n2)
        self.delta = float(delta)
        self.mode = mode
        i, j = np.meshgrid(np.arange(n1 + 1), np.arange(n2 + 1), indexing="ij")
        self.xy = np.column_stack([self.origin[0] + i.ravel() * delta,
                                   self.origin[1] + j.ravel() * delta])
        self.n_nodes = (n1 + 1) * (n2 + 1)
        boundary = (i == 0) | (i == n1) | (j == 0) | (j == n2)
        self.boundary = boundary.ravel()
        self.interior = ~self.boundary
        ring = ((i == 1) | (i == n1 - 1) | (j == 1) | (j == n2 - 1)) & ~boundary
        self.ring = ring.ravel()
        self._ops = None

    def _id(self, i, j):
        return i * (self.n2 + 1) + j

    def operators(self):
        """Sparse nodal difference operators (Dx, Dy, Sxx, Syy, Sxy).

        First differences: central at interior nodes, one-sided on the
        boundary.  Second differences: tight central stencils on interior
        nodes, zero rows on the boundary (bending lives on the interior).
        """
        if self._ops is not None:
            return self._ops
        n1, n2, d = self.n1, self.n2, self.delta
        rows_x, cols_x, vals_x = [], [], []
        rows_y, cols_y, vals_y = [], [], []

        def add(acc, r, c, v):
            acc[0].append(r)
            acc[1].append(c)
            acc[2].append(v)

        ax = (rows_x, cols_x, vals_x)
        ay = (rows_y, cols_y, vals_y)
        for i in range(n1 + 1):
            for j in range(n2 + 1):
                r = self._id(i, j)
                if 0 < i < n1:
                    add(ax, r, self._id(i + 1, j), 0.5 / d)
                    add(ax, r, self._id(i - 1, j), -0.5 / d)
                elif i == 0:
                    add(ax, r, self._id(1, j), 1.0 / d)
                    add(ax, r, self._id(0, j), -1.0 / d)
                else:
                    add(ax, r, self._id(n1, j), 1.0 / d)
                    add(ax, r, self._id(n1 - 1, j), -1.0 / d)
                if 0 < j < n2:
                    add(ay, r, self._id(i, j + 1), 0.5 / d)
                    add(ay, r, self._id(i, j - 1), -0.5 / d)
                elif j == 0:
                    add(ay, r, self._id(i, 1), 1.0 / d)
                    add(ay, r, self._id(i, 0), -1.0 / d)
                else:
                    add(ay, r, self._id(i, n2), 1.0 / d)
                    add(ay, r, self._id(i, n2 - 1), -1.0 / d)
        nn = self.n_nodes
        Dx = sp.coo_matrix((vals_x, (rows_x, cols_x)), shape=(nn, nn)).tocsr()
        Dy = sp.coo_matrix((vals_y, (rows_y, cols_y)), shape=(nn, nn)).tocsr()

        rxx, ryy, rxy = ([], [], []), ([], [], []), ([], [], [])
        d2 = d * d
        for i in range(1, n1):
            for j in range(1, n2):
                r = self._id(i, j)
                add(rxx, r, self._id(i + 1, j), 1.0 / d2)
                add(rxx, r, self._id(i, j), -2.0 / d2)
                add(rxx, r, self._id(i - 1, j), 1.0 / d2)
                add(ryy, r, self._id(i, j + 1), 1.0 / d2)
                add(ryy, r, self._id(i, j), -2.0 / d2)
                add(ryy, r, self._id(i, j - 1), 1.0 / d2)
                add(rxy, r, self._id(i + 1, j + 1), 0.25 / d2)
                add(rxy, r, self._id(i + 1, j - 1), -0.25 / d2)
                add(rxy, r, self._id(i - 1, j + 1), -0.25 / d2)
                add(rxy, r, self._id(i - 1, j - 1), 0.25 / d2)
        Sxx = sp.coo_matrix((rxx[2], (rxx[0], rxx[1])), shape=(nn, nn)).tocsr()
        Syy = sp.coo_matrix((ryy[2], (ryy[0], ryy[1])), shape=(nn, nn)).tocsr()
        Sxy = sp.coo_matrix((rxy[2], (rxy[0], rxy[1])), shape=(nn, nn)).tocsr()
        self._ops = (Dx, Dy, Sxx, Syy, Sxy)
        return self._ops


@dataclass
class PlateState:
    u: np.ndarray   # (n, 2)
    v: np.ndarray   # (n,)

    @classmethod
    def zero(cls, domain: PlateDomain):
        return cls(u=np.zeros((domain.n_nodes, 2)), v=np.zeros(domain.n_nodes))

    def copy(self):
        return PlateState(u=self.u.copy(), v=self.v.copy())

    def to_csv(self, domain: PlateDomain) -> str:
        lines = ["x1,x2,u1,u2,v"]
        for n in range(domain.n_nodes):
            lines.append(f"{domain.xy[n, 0]!r},{domain.xy[n, 1]!r},"
                         f"{self.u[n, 0]!r},{self.u[n, 1]!r},{self.v[n]!r}")
        return "\n".join(lines) + "\n"


@dataclass
class EquivalenceParams:
    a: np.ndarray          # in-plane tilt vector
    theta: float = 0.0     # skew part [[0, theta], [-theta, 0]]

    def skew(self):
        return np.array([[0.0, self.theta], [-self.theta, 0.0]])


@dataclass
class LoadSpec:
    g: np.ndarray          # transverse load per node

    @classmethod
    def constant(cls, domain: PlateDomain, value):
        return cls(g=np.full(domain.n_nodes, float(value)))

    @classmethod
    def zero(cls, domain: PlateDomain):
        return cls(g=np.zeros(domain.n_nodes))

    def scaled(self, t):
        return LoadSpec(g=t * self.g)


class DensityField:
    """Per-node effective density matrices, SPD-checked at construction."""

    def __init__(self, Qhat, n_nodes=None, alpha=None, beta=None):
        Q = np.asarray(Qhat, dtype=float)
        if Q.ndim == 2:
            if n_nodes is None:
                raise ValueError("constant density needs the node count")
            Q = np.broadcast_to(Q, (n_nodes, 6, 6)).copy()
        if Q.shape[1:] != (6, 6):
            raise ValueError("density field needs (n, 6, 6) matrices")
        sym_defect = np.max(np.abs(Q - np.transpose(Q, (0, 2, 1))))
        if sym_defect > 1e-10 * max(1.0, np.max(np.abs(Q))):
            raise ValueError("density matrices must be symmetric")
        eigs = np.linalg.eigvalsh(Q)
        if eigs.min() <= 0:
            raise ValueError(f"density not positive definite "
                             f"(smallest eigenvalue {eigs.min():.3e})")
        if alpha is not None and eigs.min() < alpha / 12.0 - 1e-9 * beta:
            raise ValueError("density violates its declared lower spectral bound")
        if beta is not None and eigs.max() > beta * (1 + 1e-9):
            raise ValueError("density violates its declared upper spectral bound")
        self.Q = Q
        # raw-component form: fold the sqrt2 vec scaling into the matrix
        self.Q_raw = _P_SCALE[None, :, None] * Q * _P_SCALE[None, None, :]

    @classmethod
    def constant(cls, Qhat, domain: PlateDomain, alpha=None, beta=None):
        return cls(Qhat, n_nodes=domain.n_nodes, alpha=alpha, beta=beta)

    @classmethod
    def from_records(cls, records, domain: PlateDomain):
        """Nearest-sample assignment of effective-density records to nodes."""
        pts = np.array([rec.x0 for rec in records])
        mats = np.array([rec.Qhat for rec in records])
        d2 = ((domain.xy[:, None, :] - pts[None, :, :]) ** 2).sum(axis=2)
        return cls(mats[np.argmin(d2, axis=1)])

    def scaled(self, t):
        out = DensityField.__new__(DensityField)
        out.Q = t * self.Q
        out.Q_raw = t * self.Q_raw
        return out


# -- strains and energy --------------------------------------------------------

def membrane_strain(state: PlateState, domain: PlateDomain):
    """Raw components (e11, e22, e12) of sym grad u + 1/2 grad v x grad v."""
    Dx, Dy, *_ = domain.operators()
    u1, u2, v = state.u[:, 0], state.u[:, 1], state.v
    vx, vy = Dx @ v, Dy @ v
    e11 = Dx @ u1 + 0.5 * vx * vx
    e22 = Dy @ u2 + 0.5 * vy * vy
    e12 = 0.5 * (Dy @ u1 + Dx @ u2) + 0.5 * vx * vy
    return np.column_stack([e11, e22, e12])


def bending_strain(state: PlateState, domain: PlateDomain):
    """Raw components (k11, k22, k12) of -hess v; zero on boundary rows."""
    _, _, Sxx, Syy, Sxy = domain.operators()
    v = state.v
    return np.column_stack([-(Sxx @ v), -(Syy @ v), -(Sxy @ v)])


def _raw6(state, domain):
    return np.concatenate([membrane_strain(state, domain),
                           bending_strain(state, domain)], axis=1)


def energy(state: PlateState, density: DensityField, load: LoadSpec | None,
           domain: PlateDomain):
    """Nodal quadrature of the density at the strain pair, minus load work."""
    raw = _raw6(state, domain)
    w = domain.delta ** 2
    mask = domain.interior
    e = w * float(np.einsum('ni,nij,nj->', raw[mask], density.Q_raw[mask], raw[mask]))
    if load is not None:
        e -= w * float(load.g[mask] @ state.v[mask])
    return e


def gradient(state: PlateState, density: DensityField, load: LoadSpec | None,
             domain: PlateDomain) -> PlateState:
    """Exact first variation, assembled by transposing the stencil operators."""
    Dx, Dy, Sxx, Syy, Sxy = domain.operators()
    raw = _raw6(state, domain)
    w = domain.delta ** 2
    sig = 2.0 * w * np.einsum('nij,nj->ni', density.Q_raw, raw)
    sig[~domain.interior] = 0.0
    s11, s22, s12, sk11, sk22, sk12 = sig.T
    vx, vy = Dx @ state.v, Dy @ state.v
    gu1 = Dx.T @ s11 + Dy.T @ (0.5 * s12)
    gu2 = Dy.T @ s22 + Dx.T @ (0.5 * s12)
    gv = (Dx.T @ (s11 * vx) + Dy.T @ (s22 * vy)
          + Dx.T @ (0.5 * s12 * vy) + Dy.T @ (0.5 * s12 * vx)
          - Sxx.T @ sk11 - Syy.T @ sk22 - Sxy.T @ sk12)
    if load is not None:
        gl = np.zeros(domain.n_nodes)
        gl[domain.interior] = load.g[domain.interior]
        gv = gv - w * gl
    return PlateState(u=np.column_stack([gu1, gu2]), v=gv)


# -- equivalence transform -------------------------------------------------------

def apply_equivalence(state: PlateState, params: EquivalenceParams,
                      domain: PlateDomain) -> PlateState:
    """Nodal reparametrization u += (A - a x a / 2) x' - v a, v += a . x'."""
    a = np.asarray(params.a, dtype=float)
    A = params.skew()
    x = domain.xy
    lin = x @ (A - 0.5 * np.outer(a, a)).T
    u = state.u + lin - state.v[:, None] * a[None, :]
    v = state.v + x @ a
    return PlateState(u=u, v=v)


def invariance_check(state: PlateState, params: EquivalenceParams,
                     density: DensityField, domain: PlateDomain) -> float:
    """|I0(state) - I0(transformed state)|; exact up to rounding because all
    strain cancellations are identities of the difference operators."""
    if domain.mode != "free-gauged":
        raise ValueError("equivalence transform violates clamped boundary data")
    e0 = energy(state, density, None, domain)
    e1 = energy(apply_equivalence(state, params, domain), density, None, domain)
    return abs(e1 - e0)


def null_directions(state: PlateState, domain: PlateDomain):
    """The 6-dim family along which the zero-load energy is flat at `state`:
    u-constants (2), v-constant (1), skew rotation (1), tilt generators (2)."""
    n = domain.n_nodes
    x = domain.xy

    def pack(u1, u2, v):
        return np.concatenate([u1, u2, v])

    zero = np.zeros(n)
    one = np.ones(n)
    dirs = [
        pack(one, zero, zero),
        pack(zero, one, zero),
        pack(zero, zero, one),
        pack(x[:, 1], -x[:, 0], zero),
        pack(-state.v, zero, x[:, 0]),
        pack(zero, -state.v, x[:, 1]),
    ]
    return dirs


# -- minimization ----------------------------------------------------------------

def _pack(state):
    return np.concatenate([state.u[:, 0], state.u[:, 1], state.v])


def _unpack(x, n):
    return PlateState(u=np.column_stack([x[:n], x[n:2 * n]]), v=x[2 * n:])


def _orthonormalize(vectors, mask):
    basis = []
    for vec in vectors:
        w = vec.copy()
        w[~mask] = 0.0
        for b in basis:
            w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > 1e-12:
            basis.append(w / nrm)
    return basis


def _project_out(vec, basis):
    for b in basis:
        vec = vec - (b @ vec) * b
    return vec


def _membrane_operator(density, domain):
    """Sparse operator of the u-quadratic part, 2 w S^T W_mm S."""
    Dx, Dy, *_ = domain.operators()
    nn = domain.n_nodes
    mask = sp.diags(domain.interior.astype(float))
    Z = sp.csr_matrix((nn, nn))
    # rows e11, e22, e12 against columns (u1, u2)
    S = sp.bmat([[mask @ Dx, Z],
                 [Z, mask @ Dy],
                 [0.5 * mask @ Dy, 0.5 * mask @ Dx]]).tocsr()
    W = _block_weight(density, domain, rows=slice(0, 3), cols=slice(0, 3))
    w = domain.delta ** 2
    return (2.0 * w) * (S.T @ W @ S), S


def _bending_operator(density, domain):
    _, _, Sxx, Syy, Sxy = domain.operators()
    nn = domain.n_nodes
    mask = sp.diags(domain.interior.astype(float))
    T = sp.vstack([-(mask @ Sxx), -(mask @ Syy), -(mask @ Sxy)]).tocsr()
    W = _block_weight(density, domain, rows=slice(3, 6), cols=slice(3, 6))
    w = domain.delta ** 2
    return (2.0 * w) * (T.T @ W @ T), T


def _block_weight(density, domain, rows, cols):
    """Node-block-diagonal sparse matrix of a 3x3 sub-block of Q_raw."""
    nn = domain.n_nodes
    blocks = density.Q_raw[:, rows, cols]          # (n, 3, 3)
    node = np.arange(nn)
    r = (np.arange(3)[None, :, None] * nn + node[:, None, None]).repeat(3, axis=2)
    c = (np.arange(3)[None, None, :] * nn + node[:, None, None]).repeat(3, axis=1)
    return sp.coo_matrix((blocks.ravel(), (r.ravel(), c.ravel())),
                         shape=(3 * nn, 3 * nn)).tocsr()


@dataclass
class MinimizeInfo:
    energy: float
    iterations: int
    grad_norm: float
    converged: bool
    energies: list = field(default_factory=list)
    gauge: dict = field(default_factory=dict)
    line_search_failures: int = 0


def _free_masks(domain):
    n = domain.n_nodes
    u_free = np.ones(2 * n, dtype=bool)
    v_free = np.ones(n, dtype=bool)
    if domain.mode == "clamped":
        u_free[:n] = domain.interior
        u_free[n:] = domain.interior
        v_free = domain.interior & ~domain.ring
    return u_free, v_free


def check_free_load(load, domain, rtol=1e-9):
    """Free-gauged loads must be self-equilibrated: zero mean and moments,
    otherwise the work term is unbounded along the null family."""
    if load is None:
        return
    g = load.g[domain.interior]
    x = domain.xy[domain.interior]
    scale = np.abs(g).sum() + 1e-300
    bad = abs(g.sum()) > rtol * scale or np.any(
        np.abs(g @ x) > rtol * scale * np.abs(x).max())
    if bad:
        raise ValueError("free-gauged mode needs a self-equilibrated load "
                         "(zero total force and zero first moments)")


def minimize(density: DensityField, load: LoadSpec | None, domain: PlateDomain,
             init: PlateState | None = None, tol=1e-8, maxit=200,
             cg_tol=1e-10) -> tuple[PlateState, MinimizeInfo]:
    """Alternating minimization of the plate functional.

    u-subproblem: exact conjugate-gradient solve of the quadratic membrane
    system at fixed v.  v-subproblem: quasi-Newton step in the bending
    metric with Armijo backtracking.  In free-gauged mode the null family
    is projected out of every step.  Descent is monotone by construction;
    termination at |grad| <= tol * (1 + |energy|).
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    n = domain.n_nodes
    state = init.copy() if init is not None else PlateState.zero(domain)
    u_free, v_free = _free_masks(domain)
    if domain.mode == "clamped":
        state.u[~domain.interior] = 0.0
        state.v[~v_free] = 0.0
    else:
        check_free_load(load, domain)

    A_u, _ = _membrane_operator(density, domain)
    H_v, _ = _bending_operator(density, domain)

    x_xy = domain.xy
    u_null = _orthonormalize(
        [np.concatenate([np.ones(n), np.zeros(n)]),
         np.concatenate([np.zeros(n), np.ones(n)]),
         np.concatenate([x_xy[:, 1], -x_xy[:, 0]])], u_free) \
        if domain.mode == "free-gauged" else []
    v_null = _orthonormalize(
        [np.ones(n), x_xy[:, 0], x_xy[:, 1]], v_free) \
        if domain.mode == "free-gauged" else []

    def grad_norm(g):
        gp = np.concatenate([
            _project_out(_apply_mask(np.concatenate([g.u[:, 0], g.u[:, 1]]), u_free),
                         u_null),
            _project_out(_apply_mask(g.v, v_free), v_null)])
        return float(np.linalg.norm(gp))

    energies = [energy(state, density, load, domain)]
    ls_failures = 0
    it = 0
    converged = False
    for it in range(1, maxit + 1):
        # exact u-solve at fixed v: A_u du = -grad_u
        g = gradient(state, density, load, domain)
        rhs = -np.concatenate([g.u[:, 0], g.u[:, 1]])
        rhs = _project_out(_apply_mask(rhs, u_free), u_null)
        Au_op = _masked_operator(A_u, u_free)
        du, *_ = fem3d.pcg(Au_op, rhs, tol=cg_tol, maxit=4000,
                           project=(lambda r: _project_out(r, u_null)) if u_null else None)
        state.u[:, 0] += du[:n]
        state.u[:, 1] += du[n:]

        # quasi-Newton v-step in the bending metric, with backtracking
        g = gradient(state, density, load, domain)
        gv = _project_out(_apply_mask(g.v, v_free), v_null)
        Hv_op = _masked_operator(H_v, v_free)
        dv, *_ = fem3d.pcg(Hv_op, -gv, tol=cg_tol, maxit=4000,
                           project=(lambda r: _project_out(r, v_null)) if v_null else None)
        e_now = energy(state, density, load, domain)
        step = 1.0
        accepted = False
        gdotd = float(gv @ dv)
        for _ in range(40):
            trial = PlateState(u=state.u, v=state.v + step * dv)
            e_trial = energy(trial, density, load, domain)
            if e_trial <= e_now + 1e-4 * step * gdotd:
                state = PlateState(u=state.u.copy(), v=trial.v)
                accepted = True
                break
            step *= 0.5
        if not accepted:
            ls_failures += 1
        energies.append(energy(state, density, load, domain))

        g = gradient(state, density, load, domain)
        gn = grad_norm(g)
        if gn <= tol * (1.0 + abs(energies[-1])):
            converged = True
            break
        if not accepted:
            break

    g = gradient(state, density, load, domain)
    gauge = {}
    if domain.mode == "free-gauged":
        dirs = null_directions(state, domain)
        full = _pack(g)
        gauge = {"tangent_gradients": [float(d @ full) for d in dirs]}
    info = MinimizeInfo(energy=energies[-1], iterations=it,
                        grad_norm=grad_norm(g), converged=converged,
                        energies=[float(e) for e in energies], gauge=gauge,
                        line_search_failures=ls_failures)
    return state, info


def _apply_mask(vec, mask):
    out = vec.copy()
    out[~mask] = 0.0
    return out


class _masked_operator:
    """Restriction of a sparse operator to a free-dof mask (pinned rows/cols
    act as identity on the zero value, so vectors stay full-length)."""

    def __init__(self, A, mask):
        self.A = A
        self.mask = mask
        self._diag = None

    def __matmul__(self, x):
        y = self.A @ _apply_mask(x, self.mask)
        y[~self.mask] = x[~self.mask]
        return y

    def diagonal(self):
        if self._diag is None:
            d = self.A.diagonal().copy()
            # pinned rows act as identity; guard null-direction zeros too
            self._diag = np.where(~self.mask | (d <= 0), 1.0, d)
        return self._diag


def linear_transverse_response(density: DensityField, load: LoadSpec,
                               domain: PlateDomain, tol=1e-12):
    """Kirchhoff subproblem: drop the membrane coupling and solve the
    quadratic bending energy against the load.  Serves as the
    linear-response oracle for small-load minimization."""
    H_v, _ = _bending_operator(density, domain)
    _, v_free = _free_masks(domain)
    if domain.mode != "clamped":
        raise ValueError("linear response oracle is defined for clamped plates")
    w = domain.delta ** 2
    rhs = np.zeros(domain.n_nodes)
    rhs[domain.interior] = w * load.g[domain.interior]
    rhs = _apply_mask(rhs, v_free)
    op = _masked_operator(H_v, v_free)
    v, it, res, ok = fem3d.pcg(op, rhs, tol=tol, maxit=20000)
    if not ok:
        raise RuntimeError(f"bending solve stalled at residual {res:.3e}")
    return v

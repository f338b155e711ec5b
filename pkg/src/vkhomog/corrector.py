"""Per-thickness corrector minima K_h(M, A) and convergence sweeps.

K_h is the discrete minimum of the relaxation energy over displacement
fields vanishing on the lateral boundary; the infimum-over-sequences object
it approximates is attained as a minimum in the admissible class, and zero
lateral values are admissible for minimizing sequences, which is what
licenses the Dirichlet discretization.  Smallness of (psi1, psi2, h psi3)
is monitored across a sweep, never enforced at fixed h: constraining it
would perturb the minimum by an amount nothing quantifies.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from . import fem3d
from .fem3d import ExtrudedGrid, RasterDomain


class CorrectorError(RuntimeError):
    """Solver failure; carries the offending diagnostics."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


class SweepError(RuntimeError):
    """Per-h failure inside a sweep; carries the partial table."""

    def __init__(self, message, partial):
        super().__init__(message)
        self.partial = partial


def m_norm_sq(area, M1, M2):
    """|M1 + x3 M2|^2 integrated over A x I: area * (|M1|^2 + |M2|^2 / 12)."""
    M1 = np.asarray(M1, dtype=float)
    M2 = np.asarray(M2, dtype=float)
    return area * (np.sum(M1 * M1) + np.sum(M2 * M2) / 12.0)


@dataclass
class CorrectorResult:
    k_value: float
    k_per_area: float
    area: float
    minimizer: np.ndarray
    admissibility: float          # |(psi1, psi2, h psi3)|_L2
    admissibility_parts: tuple    # per-component norms
    sym_norm: float               # |sym grad_h psi|_L2
    cg_iterations: int
    cg_residual: float
    converged: bool
    lower_bound: float
    upper_bound: float
    h: float
    grid: ExtrudedGrid = field(repr=False, default=None)


def k_value(fld, h, A: RasterDomain, nz, M1, M2, tol=1e-9, maxit=20000,
            require_convergence=True) -> CorrectorResult:
    """Minimize the corrector energy on A x I with lateral Dirichlet data.

    Both exact discrete bounds are verified before returning:
    alpha * area * (|M1|^2 + |M2|^2/12) <= k <= beta * area * (|M1|^2 + |M2|^2/12).
    The lower one is exact for constant (M1, M2) because the quadrature
    integrates the membrane cross term exactly and it vanishes under the
    lateral boundary condition.
    """
    grid = ExtrudedGrid(A, nz)
    system = fem3d.assemble(grid, fld, h, M1, M2)
    system = fem3d.apply_lateral_dirichlet(system, grid)
    cg = fem3d.solve_cg(system, tol=tol, maxit=maxit)
    if require_convergence and not cg.converged:
        raise CorrectorError(
            f"corrector solve did not converge: residual {cg.residual:.3e} "
            f"after {cg.iterations} iterations (tol {tol:.1e})",
            diagnostics={"residual": cg.residual, "iterations": cg.iterations,
                         "h": h, "n_dof": system.n_dof})
    k = system.energy(cg.psi)
    area = A.area

    norm_sq = m_norm_sq(area, M1, M2)
    lower = fld.alpha * norm_sq
    upper = fld.beta * norm_sq
    slack = 1e-9 * max(1.0, upper) + 10.0 * tol * max(1.0, abs(k))
    if k < lower - slack or k > upper + slack:
        raise CorrectorError(
            f"corrector value {k:.6e} escapes its exact bounds "
            f"[{lower:.6e}, {upper:.6e}]",
            diagnostics={"k": k, "lower": lower, "upper": upper})

    vals = fem3d.value_quadrature(grid, cg.psi)     # (nc, 8, 3)
    scaled = vals.copy()
    scaled[:, :, 2] *= h
    comp_norms = tuple(
        fem3d.l2_norm_quadrature(grid, scaled[:, :, c:c + 1]) for c in range(3))
    adm = float(np.sqrt(sum(v ** 2 for v in comp_norms)))
    sym_norm = fem3d.l2_norm_quadrature(grid, fem3d.strain_vec6(grid, h, cg.psi))

    return CorrectorResult(
        k_value=float(k), k_per_area=float(k / area), area=float(area),
        minimizer=cg.psi, admissibility=adm, admissibility_parts=comp_norms,
        sym_norm=float(sym_norm), cg_iterations=cg.iterations,
        cg_residual=cg.residual, converged=cg.converged,
        lower_bound=float(lower), upper_bound=float(upper), h=float(h),
        grid=grid)


def admissibility_report(result: CorrectorResult, h) -> dict:
    """Smallness diagnostics |(psi1, psi2, h psi3)|, split per component."""
    vol = result.area  # |A x I| = area * |I|
    parts = result.admissibility_parts
    return {
        "h": float(h),
        "norm": result.admissibility,
        "components": [float(p) for p in parts],
        "rms": result.admissibility / np.sqrt(vol),
        "components_rms": [float(p / np.sqrt(vol)) for p in parts],
    }


@dataclass
class SweepRow:
    h: float
    k_value: float
    k_per_area: float
    admissibility: float
    sym_norm: float
    cg_iters: int
    residual: float


@dataclass
class SweepTable:
    rows: list
    gap: float
    cauchy_flag: bool
    cauchy_tol: float
    warnings: list = field(default_factory=list)

    TAIL = 3

    def tail(self):
        return self.rows[-self.TAIL:]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("h,k_value,k_per_area,admissibility,sym_norm,cg_iters,residual\n")
        for r in self.rows:
            buf.write(f"{r.h!r},{r.k_value!r},{r.k_per_area!r},"
                      f"{r.admissibility!r},{r.sym_norm!r},{r.cg_iters},{r.residual!r}\n")
        return buf.getvalue()


def build_sweep_table(rows, cauchy_tol=0.02) -> SweepTable:
    """Assemble a sweep table from per-h rows sorted by decreasing h."""
    rows = sorted(rows, key=lambda r: -r.h)
    tail = rows[-SweepTable.TAIL:]
    vals = [r.k_per_area for r in tail]
    gap = max(vals) - min(vals)
    scale = abs(tail[-1].k_per_area)
    flag = bool(gap <= cauchy_tol * scale) if scale > 0 else bool(gap == 0.0)
    warnings = []
    adm = [r.admissibility for r in tail]
    if any(b > a * (1 + 1e-9) + 1e-14 for a, b in zip(adm, adm[1:])):
        warnings.append("admissibility norm not non-increasing over the sweep tail")
    return SweepTable(rows=rows, gap=float(gap), cauchy_flag=flag,
                      cauchy_tol=float(cauchy_tol), warnings=warnings)


def h_sweep(fld, A: RasterDomain, nz, M1, M2, h_list, tol=1e-9,
            cauchy_tol=0.02, maxit=20000) -> SweepTable:
    """Run k_value over a strictly decreasing h list and flag Cauchy tails."""
    h_list = list(h_list)
    if len(h_list) < 3:
        raise ValueError("h sweep needs at least 3 thickness values")
    if any(b >= a for a, b in zip(h_list, h_list[1:])):
        raise ValueError("h_list must be strictly decreasing")
    rows = []
    for h in h_list:
        try:
            res = k_value(fld, h, A, nz, M1, M2, tol=tol, maxit=maxit)
        except CorrectorError as exc:
            partial = build_sweep_table(rows, cauchy_tol) if rows else None
            raise SweepError(f"sweep aborted at h = {h}: {exc}", partial) from exc
        rows.append(SweepRow(h=float(h), k_value=res.k_value,
                             k_per_area=res.k_per_area,
                             admissibility=res.admissibility,
                             sym_norm=res.sym_norm,
                             cg_iters=res.cg_iterations,
                             residual=res.cg_residual))
    return build_sweep_table(rows, cauchy_tol)

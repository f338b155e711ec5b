"""Effective quadratic density Q(x0, M1, M2) from corrector energies.

The density at a point is the small-ball, small-thickness limit of
normalized corrector minima.  Computations run at finite (r, h), so each
value is the h-extrapolated per-area energy on a rasterized ball, the
r-dependence is reported as a spread rather than extrapolated (the
Lebesgue-point limit carries no rate), and the full 6x6 matrix on
(M1, M2)-space is reconstructed from 21 scalar values by polarization.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import corrector
from .corrector import m_norm_sq
from .fem3d import RasterDomain, rasterize_ball, rasterize_rect, union_rasters
from .symmat import basis_m_space, mpair_coords, vec3

_P_IDX = np.array([0, 1, 3])   # vec6 slots reachable by iota of a 2x2 strain
_F_IDX = np.array([2, 4, 5])   # vec6 slots spanned by b (x) e3 + e3 (x) b


def relaxed_form_analytic(form) -> np.ndarray:
    """Pointwise cross-section relaxation min_b q(iota(G') + b x e3 + e3 x b).

    Eliminating the three e3-coupled slots of the 6x6 matrix by a Schur
    complement gives a 3x3 matrix on 2x2 strains in vec3 coordinates.
    Validation oracle for homogeneous materials, where the effective
    density is block-diagonal diag(Q2, Q2 / 12).
    """
    C = form.C
    Cpp = C[np.ix_(_P_IDX, _P_IDX)]
    Cpf = C[np.ix_(_P_IDX, _F_IDX)]
    Cff = C[np.ix_(_F_IDX, _F_IDX)]
    if np.linalg.eigvalsh(Cff)[0] <= 0:
        raise ValueError("relaxation needs a positive definite density")
    return Cpp - Cpf @ np.linalg.solve(Cff, Cpf.T)


def eval_sym2_form(Q3, G):
    v = vec3(G)
    return float(v @ Q3 @ v)


@dataclass
class ExtrapolationModel:
    """Fit k(h) ~ k_inf + coeff * h**rate by least squares over a sweep."""

    k_inf: float
    coeff: float
    rate: float
    residual: float
    h_list: list
    k_values: list

    def predict(self, h):
        return self.k_inf + self.coeff * h ** self.rate


_RATE_GRID = np.round(np.arange(0.25, 4.0001, 0.05), 4)


def fit_extrapolation(h_list, k_values) -> ExtrapolationModel:
    """Scan the rate over a fixed grid, solving linearly for level and cost.

    The rate is a nuisance parameter (no convergence rate is available a
    priori; the lateral boundary layer suggests rate ~ 1).  The fit misfit
    is always reported so downstream acceptance never rests on an assumed
    rate.
    """
    h = np.asarray(h_list, dtype=float)
    k = np.asarray(k_values, dtype=float)
    if len(h) < 3:
        raise ValueError("extrapolation needs at least 3 sweep rows")
    best = None
    for p in _RATE_GRID:
        X = np.column_stack([np.ones_like(h), h ** p])
        coef, *_ = np.linalg.lstsq(X, k, rcond=None)
        resid = float(np.sqrt(np.mean((X @ coef - k) ** 2)))
        if best is None or resid < best[0] - 1e-18:
            best = (resid, p, coef)
    resid, p, coef = best
    return ExtrapolationModel(k_inf=float(coef[0]), coeff=float(coef[1]),
                              rate=float(p), residual=resid,
                              h_list=list(map(float, h)),
                              k_values=list(map(float, k)))


@dataclass
class DensityEstimate:
    value: float
    model: ExtrapolationModel
    per_r: list                 # (r, k_inf, residual, cauchy_flag, gap)
    flags: list = field(default_factory=list)


def estimate_density(fld, x0, M1, M2, r_list, h_list, delta, nz=8,
                     tol=1e-9, cauchy_tol=0.02, omega=None) -> DensityEstimate:
    """Normalized corrector energy on shrinking balls, h-extrapolated per radius.

    Returns the extrapolated per-area value at the smallest radius together
    with the whole r-sequence; a non-Cauchy h-sweep marks the estimate
    NON-CONVERGED instead of failing, because existence of the limit is
    only guaranteed along subsequences.
    """
    r_list = list(r_list)
    h_list = list(h_list)
    if any(b >= a for a, b in zip(r_list, r_list[1:])):
        raise ValueError("r_list must be strictly decreasing")
    x0 = np.asarray(x0, dtype=float)
    box = omega if omega is not None else fld.omega
    if box is not None:
        (a1, b1), (a2, b2) = box
        rmax = max(r_list)
        if (x0[0] - rmax < a1 or x0[0] + rmax > b1
                or x0[1] - rmax < a2 or x0[1] + rmax > b2):
            raise ValueError(f"ball B({tuple(x0)}, {rmax}) leaves the mid-surface")
    per_r = []
    flags = []
    model = None
    for r in r_list:
        ball = rasterize_ball(x0, r, delta)
        table = corrector.h_sweep(fld, ball, nz, M1, M2, h_list,
                                  tol=tol, cauchy_tol=cauchy_tol)
        model = fit_extrapolation([row.h for row in table.rows],
                                  [row.k_per_area for row in table.rows])
        if not table.cauchy_flag:
            flags.append(f"NON-CONVERGED: h sweep at r = {r} has spread "
                         f"{table.gap:.3e} above tolerance")
        per_r.append({"r": float(r), "k_inf": model.k_inf,
                      "fit_residual": model.residual,
                      "cauchy_flag": table.cauchy_flag, "gap": table.gap})
    k_by_r = [rec["k_inf"] for rec in per_r]
    spread = max(k_by_r) - min(k_by_r)
    scale = max(1e-30, abs(k_by_r[-1]))
    if len(k_by_r) > 1 and spread > 0.05 * scale:
        flags.append(f"R-SPREAD: extrapolated values vary by {spread:.3e} over r_list")
    return DensityEstimate(value=float(k_by_r[-1]), model=model,
                           per_r=per_r, flags=flags)


@dataclass
class EffectiveDensity:
    """6x6 matrix of the effective density on (M1, M2) in vec coordinates."""

    Qhat: np.ndarray
    x0: tuple
    r_used: float
    h_list: list
    fit_residual: float
    flags: list
    alpha: float
    beta: float
    convergence: list = field(default_factory=list)   # per-entry fit diagnostics

    def eval(self, M1, M2) -> float:
        w = mpair_coords(M1, M2)
        return float(w @ self.Qhat @ w)

    def spectral_range(self):
        w = np.linalg.eigvalsh(self.Qhat)
        return float(w[0]), float(w[-1])

    def to_record(self) -> dict:
        iu = np.triu_indices(6)
        return {
            "x0": [float(v) for v in self.x0],
            "r_used": self.r_used,
            "h_list": list(self.h_list),
            "Qhat_upper": [float(v) for v in self.Qhat[iu]],
            "fit_residual": self.fit_residual,
            "flags": list(self.flags),
            "alpha": self.alpha,
            "beta": self.beta,
        }

    @classmethod
    def from_record(cls, rec) -> "EffectiveDensity":
        Q = np.zeros((6, 6))
        iu = np.triu_indices(6)
        Q[iu] = rec["Qhat_upper"]
        Q = Q + np.triu(Q, 1).T
        return cls(Qhat=Q, x0=tuple(rec["x0"]), r_used=float(rec["r_used"]),
                   h_list=list(rec["h_list"]), fit_residual=float(rec["fit_residual"]),
                   flags=list(rec.get("flags", [])), alpha=float(rec["alpha"]),
                   beta=float(rec["beta"]))


def check_density_bounds(Qhat, alpha, beta, slack):
    """Eigenvalue form of the inherited ellipticity: spectrum in [alpha/12, beta]."""
    eigs = np.linalg.eigvalsh(0.5 * (Qhat + Qhat.T))
    lo, hi = float(eigs[0]), float(eigs[-1])
    ok = lo >= alpha / 12.0 - slack and hi <= beta + slack
    return ok, lo, hi


def polarize(fld, x0, r, h_list, delta, nz=8, tol=1e-9, cauchy_tol=0.02,
             spectral_slack_rel=0.05, omega=None) -> EffectiveDensity:
    """Reconstruct the full effective density by polarization.

    Quadraticity of the limit density licenses finite reconstruction: the
    scalar estimate on the 6 basis strain pairs and their 15 pairwise sums
    (21 independent estimates) determines the matrix, with off-diagonal
    entries from Q_ij = (q(b_i + b_j) - q(b_i) - q(b_j)) / 2.  Symmetry is
    exact by construction; positivity and the inherited spectral bounds are
    verified before returning.
    """
    basis = basis_m_space()
    flags = []
    convergence = []
    max_resid = 0.0

    def scalar(label, M1, M2):
        nonlocal max_resid
        est = estimate_density(fld, x0, M1, M2, [r], h_list, delta, nz=nz,
                               tol=tol, cauchy_tol=cauchy_tol, omega=omega)
        flags.extend(est.flags)
        max_resid = max(max_resid, est.model.residual)
        rec = est.per_r[-1]
        convergence.append({"entry": label, "k_inf": rec["k_inf"],
                            "fit_residual": rec["fit_residual"],
                            "gap": rec["gap"],
                            "cauchy_flag": rec["cauchy_flag"],
                            "rate": est.model.rate})
        return est.value

    Q = np.zeros((6, 6))
    diag = []
    for i, (M1, M2) in enumerate(basis):
        qi = scalar(f"b{i}", M1, M2)
        Q[i, i] = qi
        diag.append(qi)
    for i in range(6):
        for j in range(i + 1, 6):
            M1 = basis[i][0] + basis[j][0]
            M2 = basis[i][1] + basis[j][1]
            qij = scalar(f"b{i}+b{j}", M1, M2)
            Q[i, j] = Q[j, i] = 0.5 * (qij - diag[i] - diag[j])

    slack = spectral_slack_rel * fld.beta + 10 * max_resid
    ok, lo, hi = check_density_bounds(Q, fld.alpha, fld.beta, slack)
    if lo <= 0:
        raise ValueError(f"assembled density is not positive definite: "
                         f"smallest eigenvalue {lo:.6e}")
    if not ok:
        flags.append(f"SPECTRUM: eigenvalue range [{lo:.4e}, {hi:.4e}] outside "
                     f"[{fld.alpha / 12:.4e}, {fld.beta:.4e}] + slack")
    return EffectiveDensity(Qhat=Q, x0=tuple(np.asarray(x0, dtype=float)),
                            r_used=float(r), h_list=list(map(float, h_list)),
                            fit_residual=float(max_resid), flags=flags,
                            alpha=fld.alpha, beta=fld.beta,
                            convergence=convergence)


# -- structural property suite ------------------------------------------------

_SUITE_NOTES = [
    "subsequence-independence, localization, inner regularity and continuity "
    "along exhaustions are limit/measure-theoretic statements; they surface "
    "here as reporting discipline (per-domain values, restriction by "
    "indicator masking), not as standalone checks",
]


def default_fixtures(delta=1 / 16, side=4, gap_cells=3):
    """Separated squares with union, a nested pair, and an overlapping cover."""
    sq1 = rasterize_rect((0.0, 0.0), side, side, delta)
    sq2 = rasterize_rect(((side + gap_cells) * delta, 0.0), side, side, delta)
    both = union_rasters(sq1, sq2)
    small = rasterize_rect((delta, delta), side - 2, side - 2, delta)
    big = rasterize_rect((0.0, 0.0), side, side, delta)
    ncov = side - 1
    cover1 = rasterize_rect((0.0, 0.0), ncov, side, delta)
    cover2 = rasterize_rect(((side - ncov) * delta, 0.0), ncov, side, delta)
    return {"sq1": sq1, "sq2": sq2, "union": both, "small": small, "big": big,
            "cover1": cover1, "cover2": cover2}


def property_suite(fld, h=0.25, nz=4, n_random=20, seed=0, tol=1e-9,
                   exact_rtol=1e-8, fixtures=None, h_list=(0.5, 0.25, 0.125),
                   limit_rtol=0.05) -> dict:
    """Machine-check the structural properties of the corrector functional.

    Exact discrete identities (bounds, additivity, homogeneity,
    parallelogram, continuity) run at fixed h; monotonicity and
    subadditivity only hold at the limit level, so they run on extrapolated
    values with a stated tolerance.
    """
    fixtures = fixtures or default_fixtures()
    rng = np.random.default_rng(seed)
    records = []

    def rand_pair():
        M1 = rng.normal(size=(2, 2))
        M2 = rng.normal(size=(2, 2))
        return 0.5 * (M1 + M1.T), 0.5 * (M2 + M2.T)

    def add(prop, desc, measured, bound, passed):
        records.append({"property": prop, "description": desc,
                        "measured": float(measured), "bound": float(bound),
                        "slack": float(bound - measured), "pass": bool(passed)})

    A = fixtures["sq1"]
    kv = lambda dom, M1, M2: corrector.k_value(fld, h, dom, nz, M1, M2, tol=tol)

    # (d) boundedness and (k) coerciveness: exact bounds on every solve
    for trial in range(max(3, n_random // 4)):
        M1, M2 = rand_pair()
        res = kv(A, M1, M2)
        nrm = m_norm_sq(A.area, M1, M2)
        add("d", "k <= beta |M|^2", res.k_value, fld.beta * nrm,
            res.k_value <= fld.beta * nrm * (1 + 1e-9))
        add("k", "k >= alpha |M|^2", fld.alpha * nrm, res.k_value,
            res.k_value >= fld.alpha * nrm * (1 - 1e-9))

    # (i) homogeneity and (j) parallelogram: exact quadratic-form identities
    for trial in range(n_random):
        M1, M2 = rand_pair()
        N1, N2 = rand_pair()
        k1 = kv(A, M1, M2).k_value
        k2 = kv(A, 2 * M1, 2 * M2).k_value
        err = abs(k2 - 4 * k1) / max(1e-30, abs(4 * k1))
        add("i", "k(2M) = 4 k(M)", err, exact_rtol, err <= exact_rtol)
        kp = kv(A, M1 + N1, M2 + N2).k_value
        km = kv(A, M1 - N1, M2 - N2).k_value
        kn = kv(A, N1, N2).k_value
        scale = max(abs(kp) + abs(km), abs(2 * k1 + 2 * kn), 1e-30)
        err = abs(kp + km - 2 * k1 - 2 * kn) / scale
        add("j", "k(M+N) + k(M-N) = 2k(M) + 2k(N)", err, exact_rtol, err <= exact_rtol)

    # (g) disjoint additivity: lateral Dirichlet decouples the dofs exactly
    M1, M2 = rand_pair()
    ka = kv(fixtures["sq1"], M1, M2).k_value
    kb = kv(fixtures["sq2"], M1, M2).k_value
    ku = kv(fixtures["union"], M1, M2).k_value
    err = abs(ku - ka - kb) / max(1e-30, abs(ku))
    add("g", "k(A1 u A2) = k(A1) + k(A2)", err, 1e-9, err <= 1e-9)

    # (h) continuity with the explicit constant beta
    worst = -np.inf
    for trial in range(n_random):
        M1, M2 = rand_pair()
        N1, N2 = rand_pair()
        km_ = kv(A, M1, M2).k_value
        kn_ = kv(A, N1, N2).k_value
        dn = np.sqrt(m_norm_sq(A.area, M1 - N1, M2 - N2))
        sn = np.sqrt(m_norm_sq(A.area, M1, M2)) + np.sqrt(m_norm_sq(A.area, N1, N2))
        ratio = abs(km_ - kn_) / max(1e-30, dn * sn)
        worst = max(worst, ratio)
    add("h", "|k(M) - k(N)| <= beta |M-N| (|M| + |N|)", worst, fld.beta,
        worst <= fld.beta * (1 + 1e-9))

    # (e) monotonicity and (l) subadditivity on extrapolated values
    M1, M2 = rand_pair()

    def k_inf(dom):
        table = corrector.h_sweep(fld, dom, nz, M1, M2, list(h_list), tol=tol)
        return fit_extrapolation([r.h for r in table.rows],
                                 [r.k_value for r in table.rows]).k_inf

    k_small = k_inf(fixtures["small"])
    k_big = k_inf(fixtures["big"])
    tol_e = limit_rtol * max(abs(k_small), abs(k_big))
    add("e", "A1 c A2 implies K(A1) <= K(A2) (extrapolated)",
        k_small, k_big + tol_e, k_small <= k_big + tol_e)

    k_cov = k_inf(fixtures["big"])
    k_1 = k_inf(fixtures["cover1"])
    k_2 = k_inf(fixtures["cover2"])
    tol_l = limit_rtol * abs(k_1 + k_2)
    add("l", "A c A1 u A2 implies K(A) <= K(A1) + K(A2) (extrapolated)",
        k_cov, k_1 + k_2 + tol_l, k_cov <= k_1 + k_2 + tol_l)

    return {
        "notes": list(_SUITE_NOTES),
        "records": records,
        "passed": all(r["pass"] for r in records),
        "h": float(h),
        "seed": int(seed),
    }

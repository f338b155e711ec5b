"""Microstructured quadratic elastic densities on the plate Omega = omega x I.

A :class:`MicrostructureField` maps (h, x) to a positive quadratic form on
3x3 matrices, stored as a 6x6 matrix in the isometric basis of
:mod:`vkhomog.symmat`.  All built-in families oscillate on a scale eps(h)
controlled by a scale rule, so one description covers fixed microstructure
as well as eps(h) = h and eps(h) = h**p regimes.  Oscillation through the
cross-section is available via the x3-graded family.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .symmat import sym, vec6

KINDS = ("constant-isotropic", "in-plane-laminate", "checkerboard",
         "smooth-modulated", "x3-graded", "table")

_ISO_TRACE = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])

_UPPER6 = [(i, j) for i in range(6) for j in range(i, 6)]


class ElasticForm:
    """Positive quadratic density q(G) = vec6(sym G)^T C vec6(sym G)."""

    def __init__(self, C):
        C = np.asarray(C, dtype=float)
        if C.shape != (6, 6):
            raise ValueError("elastic form needs a 6x6 matrix")
        asym = np.linalg.norm(C - C.T)
        if asym > 1e-12 * max(1.0, np.linalg.norm(C)):
            raise ValueError(f"elastic form matrix not symmetric (|C-C^T| = {asym:.3e})")
        self.C = 0.5 * (C + C.T)

    def eval(self, G):
        v = vec6(G)
        return float(v @ self.C @ v)

    def eig_bounds(self):
        """(smallest, largest) eigenvalue of the 6x6 matrix."""
        w = np.linalg.eigvalsh(self.C)
        return float(w[0]), float(w[-1])

    def __repr__(self):
        lo, hi = self.eig_bounds()
        return f"ElasticForm(eig range [{lo:.4g}, {hi:.4g}])"


def isotropic_form(lam, mu):
    """Isotropic density 2*mu*|sym G|^2 + lam*(tr G)^2.

    Eigenvalues of the stored matrix are 2*mu (multiplicity 5) and
    2*mu + 3*lam, so the ellipticity pair is (2*mu, 2*mu + 3*lam).
    """
    if mu <= 0:
        raise ValueError(f"shear parameter must be positive, got mu = {mu}")
    if lam < 0:
        raise ValueError(f"trace parameter must be nonnegative, got lambda = {lam}")
    return ElasticForm(2.0 * mu * np.eye(6) + lam * np.outer(_ISO_TRACE, _ISO_TRACE))


def isotropic_bounds(lam, mu):
    return 2.0 * mu, 2.0 * mu + 3.0 * lam


def lipschitz_gap(form: ElasticForm, beta: float, G1, G2):
    """Difference |q(G1) - q(G2)| against its ellipticity bound.

    Returns (gap, bound) with bound = beta * |sym G1 - sym G2| * |sym G1 + sym G2|;
    gap <= bound holds for every form with top eigenvalue <= beta.
    """
    s1, s2 = sym(G1), sym(G2)
    gap = abs(form.eval(s1) - form.eval(s2))
    bound = beta * np.linalg.norm(s1 - s2) * np.linalg.norm(s1 + s2)
    return gap, float(bound)


@dataclass(frozen=True)
class ScaleRule:
    """Oscillation scale eps(h) = period * factor(h)."""

    rule: str = "fixed"          # fixed | h | h_pow
    exponent: float = 1.0

    def factor(self, h: float) -> float:
        if self.rule == "fixed":
            return 1.0
        if self.rule == "h":
            return h
        if self.rule == "h_pow":
            return h ** self.exponent

        raise ValueError(f"unknown scale rule {self.rule!r}")


@dataclass
class MicrostructureField:
    """Family h -> Q^h(x, .) of elastic densities with ellipticity pair (alpha, beta).

    Evaluation is pure: the same (h, x) always yields the same matrix, and a
    field instance may be shared read-only between concurrent solvers.
    """

    kind: str
    alpha: float
    beta: float
    params: dict = field(default_factory=dict)
    scale_rule: ScaleRule = field(default_factory=ScaleRule)
    omega: tuple | None = None   # ((x1min, x1max), (x2min, x2max)) or None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown microstructure kind {self.kind!r}")
        if not (0.0 < self.alpha <= self.beta):
            raise ValueError(f"need 0 < alpha <= beta, got ({self.alpha}, {self.beta})")
        self._tables = None

    # -- evaluation ---------------------------------------------------------

    def eps(self, h: float) -> float:
        period = float(self.params.get("period", 1.0))
        return period * self.scale_rule.factor(h)

    def matrices_at(self, h: float, pts, check: bool = False) -> np.ndarray:
        """Stack of 6x6 density matrices at points pts of shape (n, 3)."""
        if h <= 0:
            raise ValueError(f"thickness must be positive, got h = {h}")
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if check:
            self._check_inside(pts)
        p = self.params
        if self.kind == "constant-isotropic":
            C = isotropic_form(p["lambda"], p["mu"]).C
            return np.broadcast_to(C, (len(pts), 6, 6)).copy()
        if self.kind == "in-plane-laminate":
            axis = int(p.get("direction", 0))
            frac = np.mod(pts[:, axis] / self.eps(h), 1.0)
            phase = (frac >= p.get("volume_fraction", 0.5)).astype(int)
            return self._two_phase_stack(phase)
        if self.kind == "checkerboard":
            eps = self.eps(h)
            cells = np.floor(pts[:, 0] / eps) + np.floor(pts[:, 1] / eps)
            phase = (np.mod(cells, 2.0) >= 0.5).astype(int)
            return self._two_phase_stack(phase)
        if self.kind == "smooth-modulated":
            eps = self.eps(h)
            m = float(p.get("amplitude", 0.5))
            fac = 1.0 + m * np.sin(2 * np.pi * pts[:, 0] / eps) \
                          * np.sin(2 * np.pi * pts[:, 1] / eps)
            C0 = isotropic_form(p["lambda"], p["mu"]).C
            return fac[:, None, None] * C0[None, :, :]
        if self.kind == "x3-graded":
            layers = p["layers"]
            n = len(layers)
            # bands split I = (-1/2, 1/2) uniformly; clip keeps x3 = +-1/2 inside
            idx = np.clip(np.floor((pts[:, 2] + 0.5) * n).astype(int), 0, n - 1)
            stack = np.stack([isotropic_form(lam, mu).C for lam, mu in layers])
            return stack[idx]
        if self.kind == "table":
            table = self._table_stack()
            n1, n2 = table.shape[:2]
            eps = self.eps(h)
            i = np.floor(np.mod(pts[:, 0] / eps, 1.0) * n1).astype(int) % n1
            j = np.floor(np.mod(pts[:, 1] / eps, 1.0) * n2).astype(int) % n2
            return table[i, j]
        raise AssertionError(self.kind)

    def form_at(self, h: float, x) -> ElasticForm:
        return ElasticForm(self.matrices_at(h, np.asarray(x)[None, :])[0])

    def _check_inside(self, pts):
        if np.any(np.abs(pts[:, 2]) > 0.5 + 1e-12):
            raise ValueError("point outside the cross-section (-1/2, 1/2)")
        if self.omega is not None:
            (a1, b1), (a2, b2) = self.omega
            if np.any((pts[:, 0] < a1) | (pts[:, 0] > b1)
                      | (pts[:, 1] < a2) | (pts[:, 1] > b2)):
                raise ValueError("point outside the plate mid-surface")

    def _two_phase_stack(self, phase):
        p = self.params
        C = np.stack([isotropic_form(p["lambda"][k], p["mu"][k]).C for k in (0, 1)])
        return C[phase]

    def _table_stack(self):
        if self._tables is None:
            raise ValueError("table field has no loaded table")
        return self._tables


def eval_form(fld: MicrostructureField, h: float, x, G) -> float:
    """Value of the local density at x applied to G; equals the value at sym G."""
    return fld.form_at(h, np.asarray(x, dtype=float)).eval(G)


# -- verified construction --------------------------------------------------

def _derived_bounds(kind, params):
    if kind == "constant-isotropic":
        return isotropic_bounds(params["lambda"], params["mu"])
    if kind in ("in-plane-laminate", "checkerboard"):
        pairs = list(zip(params["lambda"], params["mu"]))
        los, his = zip(*(isotropic_bounds(l, m) for l, m in pairs))
        return min(los), max(his)
    if kind == "smooth-modulated":
        m = float(params.get("amplitude", 0.5))
        if not 0.0 <= m < 1.0:
            raise ValueError(f"modulation amplitude must be in [0, 1), got {m}")
        lo, hi = isotropic_bounds(params["lambda"], params["mu"])
        return lo * (1.0 - m), hi * (1.0 + m)
    if kind == "x3-graded":
        los, his = zip(*(isotropic_bounds(l, m) for l, m in params["layers"]))
        return min(los), max(his)
    raise ValueError(f"bounds must be given explicitly for kind {kind!r}")


def make_field(kind, params=None, scale_rule=None, bounds=None, omega=None,
               table=None) -> MicrostructureField:
    """Construct a field, deriving the ellipticity pair unless overridden."""
    params = dict(params or {})
    if isinstance(scale_rule, str):
        scale_rule = ScaleRule(rule=scale_rule)
    scale_rule = scale_rule or ScaleRule()
    if table is not None:
        table = np.asarray(table, dtype=float)
        if bounds is None:
            eigs = np.linalg.eigvalsh(table.reshape(-1, 6, 6))
            bounds = (float(eigs.min()), float(eigs.max()))
    if bounds is None:
        bounds = _derived_bounds(kind, params)
    fld = MicrostructureField(kind=kind, alpha=float(bounds[0]), beta=float(bounds[1]),
                              params=params, scale_rule=scale_rule, omega=omega)
    if table is not None:
        fld._tables = table
    return fld


def verify_bounds(fld: MicrostructureField, h: float, samples: int,
                  seed: int = 0, box=((0.0, 1.0), (0.0, 1.0))) -> dict:
    """Eigen-check the declared ellipticity pair at sampled points.

    Violations are reported, never raised: the report carries min/max
    eigenvalues over the sample and a pass flag per side.
    """
    if samples < 1:
        raise ValueError("need at least one sample point")
    rng = np.random.default_rng(seed)
    (a1, b1), (a2, b2) = box if fld.omega is None else fld.omega
    pts = np.column_stack([rng.uniform(a1, b1, samples),
                           rng.uniform(a2, b2, samples),
                           rng.uniform(-0.5, 0.5, samples)])
    eigs = np.linalg.eigvalsh(fld.matrices_at(h, pts))
    lo, hi = float(eigs.min()), float(eigs.max())
    tol = 1e-10 * max(1.0, fld.beta)
    return {
        "min_eig": lo,
        "max_eig": hi,
        "alpha": fld.alpha,
        "beta": fld.beta,
        "alpha_ok": bool(lo >= fld.alpha - tol),
        "beta_ok": bool(hi <= fld.beta + tol),
        "pass": bool(lo >= fld.alpha - tol and hi <= fld.beta + tol),
        "samples": int(samples),
    }


# -- descriptor I/O ----------------------------------------------------------

def field_from_descriptor(desc: dict, base_dir=None) -> MicrostructureField:
    """Build a field from a JSON-style descriptor.

    Recognized keys: kind, lambda, mu, period, direction, volume_fraction,
    amplitude, layers, scale_rule, bounds, table (CSV path for the table kind).
    """
    desc = dict(desc)
    kind = desc.pop("kind")
    bounds = desc.pop("bounds", None)
    rule = desc.pop("scale_rule", None)
    if isinstance(rule, dict):
        rule = ScaleRule(rule=rule.get("rule", "fixed"),
                         exponent=float(rule.get("exponent", 1.0)))
    table = None
    if kind == "table":
        path = desc.pop("table")
        if base_dir is not None:
            import os
            path = os.path.join(base_dir, path)
        table = load_table_csv(path)
    params = {k: v for k, v in desc.items() if v is not None}
    if "layers" in params:
        params["layers"] = [tuple(map(float, layer)) for layer in params["layers"]]
    return make_field(kind, params=params, scale_rule=rule, bounds=bounds, table=table)


def field_from_json(path) -> MicrostructureField:
    import os
    with open(path, "r", encoding="utf-8") as f:
        desc = json.load(f)
    return field_from_descriptor(desc, base_dir=os.path.dirname(os.path.abspath(path)))


def load_table_csv(path) -> np.ndarray:
    """Read a periodic cell table: rows `i, j, <21 upper-triangle entries>`."""
    entries = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if len(header) != 23:
            raise ValueError("table CSV needs columns i, j and 21 matrix entries")
        for row in reader:
            if not row:
                continue
            i, j = int(row[0]), int(row[1])
            vals = list(map(float, row[2:]))
            if len(vals) != 21:
                raise ValueError(f"cell ({i}, {j}) has {len(vals)} entries, expected 21")
            C = np.zeros((6, 6))
            for (a, b), v in zip(_UPPER6, vals):
                C[a, b] = C[b, a] = v
            entries[(i, j)] = C
    if not entries:
        raise ValueError("table CSV contains no cells")
    n1 = max(i for i, _ in entries) + 1
    n2 = max(j for _, j in entries) + 1
    table = np.zeros((n1, n2, 6, 6))
    for (i, j), C in entries.items():
        table[i, j] = C
    missing = n1 * n2 - len(entries)
    if missing:
        raise ValueError(f"table CSV is missing {missing} cells of the {n1}x{n2} grid")
    return table


def save_table_csv(path, table):
    table = np.asarray(table, dtype=float)
    n1, n2 = table.shape[:2]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["i", "j"] + [f"c{a}{b}" for a, b in _UPPER6])
        for i in range(n1):
            for j in range(n2):
                writer.writerow([i, j] + [repr(table[i, j, a, b]) for a, b in _UPPER6])

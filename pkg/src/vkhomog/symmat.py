"""Symmetric-matrix algebra and orthonormal vector representations.

Symmetric 3x3 matrices are flattened to 6-vectors in the basis

    E11, E22, E33, (E12+E21)/sqrt2, (E13+E31)/sqrt2, (E23+E32)/sqrt2

so the flattening is an isometry: |vec6(S)| equals the Frobenius norm of S.
Symmetric 2x2 matrices use the analogous 3-vector convention.  Quadratic
densities stored as 6x6 matrices in this basis have their ellipticity
constants as plain eigenvalue bounds.
"""

from __future__ import annotations

import numpy as np

SQRT2 = np.sqrt(2.0)

# (row, col) index pairs backing each slot of the 6-vector.
_PAIRS6 = [(0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2)]
_PAIRS3 = [(0, 0), (1, 1), (0, 1)]


def sym(G):
    """Symmetric part (G + G^T)/2 of a square matrix."""
    G = np.asarray(G, dtype=float)
    return 0.5 * (G + G.T)


def iota(m):
    """Embed a 2x2 matrix as the upper-left block of a 3x3 zero matrix."""
    m = np.asarray(m, dtype=float)
    out = np.zeros((3, 3))
    out[:2, :2] = m
    return out


def vec6(S):
    """Isometric 6-vector of the symmetric part of a 3x3 matrix."""
    S = sym(S)
    return np.array([S[0, 0], S[1, 1], S[2, 2],
                     SQRT2 * S[0, 1], SQRT2 * S[0, 2], SQRT2 * S[1, 2]])


def unvec6(v):
    """Inverse of :func:`vec6`; returns a symmetric 3x3 matrix."""
    v = np.asarray(v, dtype=float)
    S = np.empty((3, 3))
    S[0, 0], S[1, 1], S[2, 2] = v[0], v[1], v[2]
    S[0, 1] = S[1, 0] = v[3] / SQRT2
    S[0, 2] = S[2, 0] = v[4] / SQRT2
    S[1, 2] = S[2, 1] = v[5] / SQRT2
    return S


def vec3(S):
    """Isometric 3-vector of the symmetric part of a 2x2 matrix."""
    S = sym(S)
    return np.array([S[0, 0], S[1, 1], SQRT2 * S[0, 1]])


def unvec3(v):
    """Inverse of :func:`vec3`; returns a symmetric 2x2 matrix."""
    v = np.asarray(v, dtype=float)
    return np.array([[v[0], v[2] / SQRT2],
                     [v[2] / SQRT2, v[1]]])


def vec6_of_iota(m):
    """vec6(iota(m)) for a symmetric 2x2 matrix, without building the 3x3."""
    v = vec3(m)
    return np.array([v[0], v[1], 0.0, v[2], 0.0, 0.0])


def basis_sym2():
    """Orthonormal basis of symmetric 2x2 matrices matching :func:`vec3`."""
    e = np.eye(2)
    return [np.outer(e[0], e[0]),
            np.outer(e[1], e[1]),
            (np.outer(e[0], e[1]) + np.outer(e[1], e[0])) / SQRT2]


def basis_m_space():
    """Orthonormal basis of the 6-dim (M1, M2) strain-pair space.

    Element i < 3 is (b_i, 0), element i >= 3 is (0, b_{i-3}) with b_j the
    :func:`basis_sym2` elements.  Coordinates of (M1, M2) in this basis are
    the concatenation [vec3(M1), vec3(M2)].
    """
    zero = np.zeros((2, 2))
    b2 = basis_sym2()
    return [(b, zero) for b in b2] + [(zero, b) for b in b2]


def mpair_coords(M1, M2):
    """Coordinates of the strain pair (M1, M2) in :func:`basis_m_space`."""
    return np.concatenate([vec3(M1), vec3(M2)])


def mpair_from_coords(w):
    """Inverse of :func:`mpair_coords`."""
    w = np.asarray(w, dtype=float)
    return unvec3(w[:3]), unvec3(w[3:])

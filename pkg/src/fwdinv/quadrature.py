"""Gauss rules on tetrahedra (collapsed-coordinate conical products)."""
from __future__ import annotations

from functools import lru_cache

import numpy as np
from scipy.special import roots_jacobi


@lru_cache(maxsize=None)
def reference_rule(degree: int) -> tuple[np.ndarray, np.ndarray]:
    """Points and weights on the unit tetrahedron, exact for polynomials of ``degree``.

    Barycentric-style reference: vertices (0,0,0), (1,0,0), (0,1,0), (0,0,1);
    weights sum to 1/6.
    """
    n = degree // 2 + 1
    # Gauss-Jacobi on [-1, 1] with weight (1 - t)^alpha, mapped to [0, 1]
    tu, wu = roots_jacobi(n, 2.0, 0.0)
    tv, wv = roots_jacobi(n, 1.0, 0.0)
    tw, ww = roots_jacobi(n, 0.0, 0.0)
    u, v, w = (tu + 1) / 2, (tv + 1) / 2, (tw + 1) / 2
    wu, wv, ww = wu / 8, wv / 4, ww / 2
    U, V, W = np.meshgrid(u, v, w, indexing="ij")
    WU, WV, WW = np.meshgrid(wu, wv, ww, indexing="ij")
    x = U
    y = V * (1 - U)
    z = W * (1 - U) * (1 - V)
    pts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    wts = (WU * WV * WW).ravel()
    return pts, wts


def tet_rule(corners: np.ndarray, degree: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadrature on a batch of tetrahedra.

    Parameters
    ----------
    corners : (E, 4, 3) array

    Returns
    -------
    points : (E, Q, 3), weights : (E, Q), bary : (Q, 4)
        Physical points, physical weights and the barycentric coordinates of
        the reference points (shared by all elements).
    """
    ref, w = reference_rule(degree)
    bary = np.column_stack([1.0 - ref.sum(axis=1), ref])
    pts = np.matmul(bary, corners)
    edges = corners[:, 1:] - corners[:, :1]
    vol6 = np.abs(np.linalg.det(edges))
    return pts, vol6[:, None] * w[None, :], bary


_SUBDIV = np.array([
    [0, 4, 5, 6], [4, 1, 7, 8], [5, 7, 2, 9], [6, 8, 9, 3],
    [4, 5, 6, 8], [4, 5, 7, 8], [5, 6, 8, 9], [5, 7, 8, 9],
])
_MID = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


def subdivided_bary(levels: int) -> np.ndarray:
    """Barycentric corners (S, 4, 4) of the 8**levels sub-tetrahedra of a tet."""
    tets = np.eye(4)[None]
    for _ in range(levels):
        mids = 0.5 * (tets[:, _MID[:, 0]] + tets[:, _MID[:, 1]])
        nodes = np.concatenate([tets, mids], axis=1)
        tets = nodes[:, _SUBDIV].reshape(-1, 4, 4)
    return tets

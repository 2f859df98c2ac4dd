"""Analytic surface potential of a current dipole in concentric isotropic spheres.

The potential is expanded in Legendre polynomials and every degree is
solved from the interface conditions (continuity of potential and of
normal current, zero current through the outer surface).  Terms are summed
until they fall below a relative tolerance.  Units match `fwdinv.fem`:
mm, S/m, nA*m in, mV out.
"""
from __future__ import annotations

import numpy as np


def _degree_gain(n: int, radii: np.ndarray, sigma: np.ndarray) -> float:
    """Outer-surface coefficient for a unit source term of degree ``n``.

    The source term in layer 1 is ``(R1 / r) ** (n + 1)`` (value 1 at R1).
    Layer ``k >= 2`` is ``a_k (r/R_k)^n + b_k (R_{k-1}/r)^{n+1}`` and layer
    1 adds ``a_1 (r/R_1)^n``; the returned value is the potential at the
    outer radius.
    """
    nl = radii.size
    size = 2 * nl - 1
    m = np.zeros((size, size))
    rhs = np.zeros(size)

    def col_a(k):
        return 0 if k == 0 else 2 * k - 1

    def col_b(k):
        return 2 * k

    row = 0
    for k in range(nl - 1):
        rk = radii[k]
        # layer k evaluated at its outer radius
        val = {col_a(k): 1.0}
        der = {col_a(k): n / rk}
        if k > 0:
            t = (radii[k - 1] / rk) ** (n + 1)
            val[col_b(k)] = t
            der[col_b(k)] = -(n + 1) * t / rk
        # layer k+1 evaluated at its inner radius
        t_next = (rk / radii[k + 1]) ** n
        for c, v in val.items():
            m[row, c] += v
        m[row, col_a(k + 1)] -= t_next
        m[row, col_b(k + 1)] -= 1.0
        for c, v in der.items():
            m[row + 1, c] += sigma[k] * v
        m[row + 1, col_a(k + 1)] -= sigma[k + 1] * n * t_next / rk
        m[row + 1, col_b(k + 1)] -= sigma[k + 1] * (-(n + 1)) / rk
        if k == 0:
            rhs[row] -= 1.0
            rhs[row + 1] -= sigma[0] * (-(n + 1)) / rk
        row += 2
    # zero normal current at the outer surface
    k = nl - 1
    rk = radii[k]
    m[row, col_a(k)] = n / rk
    if k > 0:
        t = (radii[k - 1] / rk) ** (n + 1)
        m[row, col_b(k)] = -(n + 1) * t / rk
    else:
        rhs[row] -= -(n + 1) / rk
    x = np.linalg.solve(m, rhs)
    surface = x[col_a(k)]
    if k > 0:
        surface += x[col_b(k)] * (radii[k - 1] / rk) ** (n + 1)
    else:
        surface += 1.0
    return float(surface)


def _legendre_with_derivative(nmax: int, x: np.ndarray):
    p = np.zeros((nmax + 1,) + x.shape)
    dp = np.zeros_like(p)
    p[0] = 1.0
    if nmax >= 1:
        p[1] = x
        dp[1] = 1.0
    for n in range(1, nmax):
        p[n + 1] = ((2 * n + 1) * x * p[n] - n * p[n - 1]) / (n + 1)
        dp[n + 1] = dp[n - 1] + (2 * n + 1) * p[n]
    return p, dp


def layered_sphere_potential(points, dipole_pos, moment, radii, sigma, *,
                             center=(0.0, 0.0, 0.0), rtol: float = 1e-14,
                             nmax: int = 5000) -> np.ndarray:
    """Potential at points on the outer sphere due to a dipole in layer 1.

    Parameters
    ----------
    points : (P, 3) array
        Evaluation points; only their directions from ``center`` are used.
    dipole_pos, moment : 3-vectors
        Dipole position (mm) and moment (nA*m).
    radii, sigma : sequences
        Layer radii (mm, innermost first) and isotropic conductivities (S/m).
    """
    radii = np.asarray(radii, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    center = np.asarray(center, dtype=float)
    pts = np.atleast_2d(np.asarray(points, dtype=float)) - center
    r0 = np.asarray(dipole_pos, dtype=float) - center
    q = np.asarray(moment, dtype=float)
    rho = float(np.linalg.norm(r0))
    if rho >= radii[0]:
        raise ValueError("dipole must lie inside the innermost layer")
    rhat = pts / np.linalg.norm(pts, axis=1, keepdims=True)
    r0hat = r0 / rho if rho > 0 else np.array([0.0, 0.0, 1.0])
    cosg = np.clip(rhat @ r0hat, -1.0, 1.0)
    radial = q @ r0hat
    tang = rhat @ q - cosg * radial
    ratio = rho / radii[0]
    scale = 1.0 / (4.0 * np.pi * sigma[0] * radii[0] ** 2)

    total = np.zeros(pts.shape[0])
    chunk = 64
    n0 = 1
    small = 0
    while n0 <= nmax:
        n1 = min(n0 + chunk, nmax + 1)
        p, dp = _legendre_with_derivative(n1, cosg)
        for n in range(n0, n1):
            weight = _degree_gain(n, radii, sigma) * ratio ** (n - 1) if ratio > 0 else (
                _degree_gain(n, radii, sigma) if n == 1 else 0.0)
            term = weight * (n * p[n] * radial + dp[n] * tang)
            total += term
            if np.max(np.abs(term)) <= rtol * max(np.max(np.abs(total)), 1e-300):
                small += 1
                if small >= 3:
                    return scale * total
            else:
                small = 0
        n0 = n1
    raise RuntimeError(f"series did not converge within {nmax} terms")


def homogeneous_degree_gain(n: int) -> float:
    """Closed form of `_degree_gain` for a single layer: (2n + 1) / n."""
    return (2 * n + 1) / n


def infinite_medium_potential_iso(points, dipole_pos, moment, sigma: float) -> np.ndarray:
    d = np.atleast_2d(points) - np.asarray(dipole_pos, dtype=float)
    return (d @ np.asarray(moment, dtype=float)) / (4 * np.pi * sigma * np.linalg.norm(d, axis=1) ** 3)


def rdm(u: np.ndarray, v: np.ndarray) -> float:
    """Relative difference measure between two potential vectors (0 = same shape)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    return float(np.linalg.norm(u / np.linalg.norm(u) - v / np.linalg.norm(v)))


def mag(u: np.ndarray, v: np.ndarray) -> float:
    """Magnitude ratio ``||u|| / ||v||`` (1 = same magnitude)."""
    return float(np.linalg.norm(u) / np.linalg.norm(v))

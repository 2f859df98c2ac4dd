"""Linear FEM for the EEG forward problem and the reciprocity transfer matrix.

Units: mesh lengths in mm, conductivity in S/m, dipole moments in nA*m.
With these units the stiffness system ``K u = b`` (``b_i = q . grad phi_i``)
returns potentials in mV, and so does the analytic sphere solution.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh, MeshError, check_spd_batch, outer_surface

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9

Reference = Union[str, int]


class SolverError(RuntimeError):
    """PCG failed to converge or the load is incompatible with the null space."""

    def __init__(self, message: str, column: int | None = None):
        super().__init__(message if column is None else f"column {column}: {message}")
        self.column = column


def assemble_stiffness(mesh: Mesh) -> sp.csr_matrix:
    """Global stiffness ``K_ij = sum_e vol_e grad(phi_i)^T sigma_e grad(phi_j)``.

    Element contributions are reduced in element-index order, so the result
    does not depend on how the work is split.
    """
    check_spd_batch(mesh.conductivity)
    g = mesh.grads
    ke = np.einsum("e,eai,eij,ebj->eab", mesh.volumes, g, mesh.conductivity, g)
    rows = np.repeat(mesh.tets, 4, axis=1).ravel()
    cols = np.tile(mesh.tets, (1, 4)).ravel()
    n = mesh.n_vertices
    k = sp.coo_matrix((ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    k.sum_duplicates()
    k.sort_indices()
    # exact symmetry: duplicate summation order may differ between (i,j) and (j,i)
    return ((k + k.T) * 0.5).tocsr()


@dataclass
class SolveInfo:
    iterations: np.ndarray
    residuals: np.ndarray


def _preconditioner(a: sp.csr_matrix, kind: str):
    if kind == "jacobi":
        d = a.diagonal()
        if np.any(d <= 0):
            raise SolverError("non-positive diagonal entry; matrix is not SPD")
        inv = 1.0 / d
        return lambda r: inv[:, None] * r if r.ndim == 2 else inv * r
    if kind == "ilu":
        # anchor one vertex so the factorization sees a nonsingular matrix
        anchored = a.tolil(copy=True)
        anchored[0, 0] = anchored[0, 0] * 2.0
        ilu = spla.spilu(anchored.tocsc(), drop_tol=1e-4, fill_factor=10)

        def apply(r):
            return ilu.solve(r) if r.ndim == 1 else np.column_stack([ilu.solve(c) for c in r.T])

        return apply
    raise ValueError(f"unknown preconditioner {kind!r}")


def solve_spd(a: sp.spmatrix, b: np.ndarray, tol: float = DEFAULT_TOL, *,
              maxiter: int | None = None, preconditioner: str = "jacobi",
              compat_tol: float = 1e-8, return_info: bool = False):
    """Preconditioned conjugate gradients for the singular stiffness system.

    ``b`` may be a vector or an (n, k) block of independent right-hand
    sides; columns are iterated in lock-step but never mixed, and each
    stops at ``||A x - b|| <= tol ||b||``.  Returned potentials have zero
    mean.

    Raises
    ------
    SolverError
        If a load does not sum to zero (within ``compat_tol`` of its
        1-norm) or a column does not converge within ``maxiter``.
    """
    a = sp.csr_matrix(a)
    b = np.asarray(b, dtype=float)
    single = b.ndim == 1
    b2 = b[:, None] if single else b
    n, k = b2.shape
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxiter is None:
        maxiter = int(np.ceil(10 * np.sqrt(n)))
    l1 = np.abs(b2).sum(axis=0)
    total = b2.sum(axis=0)
    bad = np.nonzero(np.abs(total) > compat_tol * np.maximum(l1, 1e-300))[0]
    if bad.size:
        j = int(bad[0])
        raise SolverError(f"incompatible load: sum {total[j]:.3e} vs 1-norm {l1[j]:.3e}",
                          column=None if single else j)

    m_inv = _preconditioner(a, preconditioner)
    x = np.zeros((n, k))
    r = b2.copy()
    bnorm = np.linalg.norm(b2, axis=0)
    target = tol * bnorm
    active = bnorm > 0
    iters = np.zeros(k, dtype=np.int64)
    res = np.zeros(k)
    if np.any(active):
        idx = np.nonzero(active)[0]
        z = m_inv(r[:, idx])
        p = z.copy()
        rz = np.einsum("ij,ij->j", r[:, idx], z)
        for it in range(1, maxiter + 1):
            ap = a @ p
            alpha = rz / np.einsum("ij,ij->j", p, ap)
            x[:, idx] += alpha * p
            r[:, idx] -= alpha * ap
            rn = np.linalg.norm(r[:, idx], axis=0)
            iters[idx] = it
            res[idx] = rn / bnorm[idx]
            done = rn <= target[idx]
            if np.all(done):
                idx = idx[:0]
                break
            keep = ~done
            idx, p, rz = idx[keep], p[:, keep], rz[keep]
            z = m_inv(r[:, idx])
            rz_new = np.einsum("ij,ij->j", r[:, idx], z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        if idx.size:
            j = int(idx[0])
            raise SolverError(f"PCG did not converge in {maxiter} iterations "
                              f"(relative residual {res[j]:.2e} > {tol:.1e})",
                              column=None if single else j)
    x -= x.mean(axis=0)
    out = x[:, 0] if single else x
    if return_info:
        return out, SolveInfo(iters, res)
    return out


@dataclass
class ElectrodeSet:
    """Point electrodes attached to mesh vertices.

    ``reference`` is ``"average"`` or the index of the reference electrode.
    """

    positions: np.ndarray
    vertices: np.ndarray
    reference: Reference = "average"

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.vertices = np.asarray(self.vertices, dtype=np.int64).ravel()
        if self.positions.shape[0] != self.vertices.size:
            raise ValueError("one attached vertex per electrode is required")
        if np.unique(self.vertices).size != self.vertices.size:
            raise ValueError("electrodes must attach to distinct vertices")
        if self.reference != "average":
            ref = int(self.reference)
            if not 0 <= ref < self.vertices.size:
                raise ValueError(f"reference electrode {ref} out of range")
            self.reference = ref

    def __len__(self) -> int:
        return self.vertices.size

    @property
    def reference_code(self) -> int:
        return -1 if self.reference == "average" else int(self.reference)

    def permuted(self, order) -> "ElectrodeSet":
        order = np.asarray(order)
        ref = self.reference
        if ref != "average":
            ref = int(np.nonzero(order == ref)[0][0])
        return ElectrodeSet(self.positions[order], self.vertices[order], ref)


def attach_electrodes(mesh: Mesh, positions, reference: Reference = "average",
                      snap_tol: float | None = None) -> ElectrodeSet:
    """Snap electrode positions to the nearest outer-surface vertex (point electrode model)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    candidates = mesh.boundary_vertices()
    cv = mesh.vertices[candidates]
    d = np.linalg.norm(positions[:, None, :] - cv[None], axis=2)
    nearest = np.argmin(d, axis=1)
    if snap_tol is not None:
        far = d[np.arange(len(positions)), nearest] > snap_tol
        if np.any(far):
            raise MeshError(f"electrode {int(np.argmax(far))} is farther than {snap_tol} mm from the scalp")
    verts = candidates[nearest]
    if np.unique(verts).size != verts.size:
        raise MeshError("two electrodes snapped to the same scalp vertex; mesh too coarse")
    return ElectrodeSet(mesh.vertices[verts], verts, reference)


def cap_electrode_positions(n: int, radius: float, max_polar_deg: float = 100.0,
                            center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """``n`` roughly uniform points on a polar cap (Fibonacci spiral), topmost first."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cmin = np.cos(np.deg2rad(max_polar_deg))
    i = np.arange(n)
    z = 1.0 - (1.0 - cmin) * (i + 0.5) / n
    z[0] = 1.0
    rxy = np.sqrt(np.clip(1.0 - z**2, 0.0, None))
    phi = golden * i
    pts = np.column_stack([rxy * np.cos(phi), rxy * np.sin(phi), z])
    return radius * pts + np.asarray(center, dtype=float)


def cap_electrodes(mesh: Mesh, n: int = 60, max_polar_deg: float = 100.0,
                   reference: Reference = "average") -> ElectrodeSet:
    """Electrodes on a polar cap of the outer sphere, snapped to scalp vertices."""
    surf = outer_surface(mesh)
    radius = float(np.linalg.norm(surf.vertices[np.unique(surf.triangles)] - mesh.center, axis=1).max())
    pos = cap_electrode_positions(n, radius, max_polar_deg, mesh.center)
    return attach_electrodes(mesh, pos, reference)


def electrode_readout(u: np.ndarray, electrodes: ElectrodeSet) -> np.ndarray:
    """Potentials at the attached vertices with the reference applied.

    ``u`` may be (n_vertices,) or (n_vertices, k).
    """
    v = np.asarray(u)[electrodes.vertices]
    if electrodes.reference == "average":
        return v - v.mean(axis=0)
    return v - v[electrodes.reference]


def reference_loads(n_vertices: int, electrodes: ElectrodeSet) -> np.ndarray:
    """Dense (n_vertices, n_electrodes) load block used to build the transfer matrix."""
    n_el = len(electrodes)
    b = np.zeros((n_vertices, n_el))
    b[electrodes.vertices, np.arange(n_el)] = 1.0
    if electrodes.reference == "average":
        b[electrodes.vertices, :] -= 1.0 / n_el
    else:
        b[electrodes.vertices[electrodes.reference], :] -= 1.0
    return b


@dataclass
class TransferMatrix:
    """Node-by-electrode matrix; electrode readouts of a load ``b`` are ``T.T @ b``."""

    matrix: np.ndarray
    tol: float
    reference: Reference
    iterations: np.ndarray | None = None

    @property
    def reference_code(self) -> int:
        return -1 if self.reference == "average" else int(self.reference)

    def readout(self, load) -> np.ndarray:
        """Referenced electrode potentials for a (possibly sparse) load vector."""
        if sp.issparse(load):
            coo = sp.coo_matrix(load.reshape(1, -1) if load.shape[0] != 1 else load)
            return coo.data @ self.matrix[coo.col]
        return self.matrix.T @ np.asarray(load)

    def rows(self, vertices) -> np.ndarray:
        return self.matrix[np.asarray(vertices)]


def compute_transfer_matrix(a: sp.spmatrix, electrodes: ElectrodeSet, tol: float = DEFAULT_TOL,
                            *, preconditioner: str = "jacobi", maxiter: int | None = None,
                            block: int = 16) -> TransferMatrix:
    """One PCG solve per electrode (reciprocity).

    Column ``e`` solves ``A t_e = d_e`` where ``d_e`` is the electrode's
    indicator minus the reference load.  Columns are solved in blocks of
    ``block``; a failed column raises `SolverError` carrying its index.
    """
    n = a.shape[0]
    loads = reference_loads(n, electrodes)
    if electrodes.reference != "average":
        loads[:, electrodes.reference] = 0.0
    t = np.zeros_like(loads)
    iters = np.zeros(loads.shape[1], dtype=np.int64)
    for s in range(0, loads.shape[1], block):
        cols = slice(s, min(s + block, loads.shape[1]))
        try:
            t[:, cols], info = solve_spd(a, loads[:, cols], tol, maxiter=maxiter,
                                         preconditioner=preconditioner, return_info=True)
        except SolverError as exc:
            raise SolverError(str(exc).split(": ", 1)[-1], column=s + (exc.column or 0)) from exc
        iters[cols] = info.iterations
    log.debug("transfer matrix: %d columns, max %d PCG iterations", t.shape[1], iters.max())
    return TransferMatrix(t, tol, electrodes.reference, iters)


# binary format ---------------------------------------------------------------------

TMAT_MAGIC = b"TMAT"
TMAT_VERSION = 1
_TMAT_HEADER = struct.Struct("<4sIQQq")


class FormatError(ValueError):
    """Corrupt, truncated or unsupported binary file."""


def save_transfer_matrix(tm: TransferMatrix, path) -> None:
    """Write ``TMAT``: magic, u32 version, u64 rows, u64 cols, i64 reference
    code (-1 = average), then column-major little-endian float64."""
    rows, cols = tm.matrix.shape
    with open(path, "wb") as fh:
        fh.write(_TMAT_HEADER.pack(TMAT_MAGIC, TMAT_VERSION, rows, cols, tm.reference_code))
        fh.write(np.asfortranarray(tm.matrix, dtype="<f8").tobytes(order="F"))


def load_transfer_matrix(path, tol: float = float("nan")) -> TransferMatrix:
    data = Path(path).read_bytes()
    if len(data) < _TMAT_HEADER.size:
        raise FormatError("truncated TMAT header")
    magic, version, rows, cols, ref = _TMAT_HEADER.unpack_from(data)
    if magic != TMAT_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != TMAT_VERSION:
        raise FormatError(f"unsupported TMAT version {version}")
    body = data[_TMAT_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise FormatError(f"TMAT payload has {len(body)} bytes, expected {8 * rows * cols}")
    mat = np.frombuffer(body, dtype="<f8").reshape((rows, cols), order="F").astype(float)
    return TransferMatrix(mat, tol, "average" if ref < 0 else int(ref))

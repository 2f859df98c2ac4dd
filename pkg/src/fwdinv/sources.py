"""FEM load vectors for a point current dipole under several source models.

Tags: ``pi`` (partial integration), ``whitney-pbo`` and ``whitney-mpo``
(face-intersecting + edgewise Whitney-type descriptors with two coefficient
fits), ``hdiv`` (the same descriptors fitted with first-order position
moments) and ``localsub`` (local subtraction).

Every load vector sums to zero and is linear in the dipole moment.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh, MeshError
from .quadrature import subdivided_bary, tet_rule

SOURCE_MODELS = ("pi", "whitney-pbo", "whitney-mpo", "hdiv", "localsub")

_FACE_LOCAL = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
_EDGE_LOCAL = np.array([[0, 1], [0, 2], [0, 3], [1, 2], [1, 3], [2, 3]])


class SourceModelError(ValueError):
    """A load vector cannot be built for the requested dipole."""


@dataclass(frozen=True)
class Dipole:
    position: np.ndarray
    moment: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float).reshape(3))
        object.__setattr__(self, "moment", np.asarray(self.moment, dtype=float).reshape(3))


@dataclass
class LoadVector:
    """Sparse load over mesh vertices (sorted unique ``indices``)."""

    indices: np.ndarray
    values: np.ndarray
    model: str
    dipole: Dipole
    meta: dict = field(default_factory=dict)

    def dense(self, n_vertices: int) -> np.ndarray:
        out = np.zeros(n_vertices)
        out[self.indices] = self.values
        return out

    def total(self) -> float:
        return float(self.values.sum())


def _sparse(indices, values, model, dipole, meta=None) -> LoadVector:
    idx, inv = np.unique(np.asarray(indices, dtype=np.int64), return_inverse=True)
    vals = np.zeros(idx.size)
    np.add.at(vals, inv.ravel(), np.asarray(values, dtype=float).ravel())
    return LoadVector(idx, vals, model, dipole, meta or {})


def _locate(mesh: Mesh, d: Dipole) -> int:
    elem, _ = mesh.find_enclosing_element(d.position)
    return elem


# partial integration ----------------------------------------------------------

def rhs_partial_integration(mesh: Mesh, d: Dipole) -> LoadVector:
    """``b_i = q . grad(phi_i)`` on the enclosing element (4 nonzeros)."""
    e = _locate(mesh, d)
    vals = mesh.grads[e] @ d.moment
    return _sparse(mesh.tets[e], vals, "pi", d, {"element": e})


# Whitney-type descriptors -----------------------------------------------------------

@dataclass(frozen=True)
class HdivBasisDescriptor:
    """A divergence-conforming basis function reduced to its vertex coupling.

    Its coupling row ``g_i = int w . grad(phi_i)`` is ``+1`` at ``sink``,
    ``-1`` at ``source`` and zero elsewhere, and its dipole moment is
    ``direction = x_sink - x_source`` located at ``position`` (midpoint).

    ``kind == "face"``: lowest-order Raviart-Thomas function of an interior
    face, scaled to that coupling; supported on the two elements sharing it.
    ``kind == "edge"``: uniform current along the edge over its element fan.
    """

    kind: str
    entity: tuple
    support: tuple
    source: int
    sink: int
    position: np.ndarray
    direction: np.ndarray


def enumerate_hdiv_basis(mesh: Mesh, element: int) -> tuple[list[HdivBasisDescriptor], bool]:
    """Descriptors around ``element``: its interior faces, then its edges.

    Returns ``(descriptors, restricted)`` where ``restricted`` flags that
    boundary faces had to be dropped.
    """
    tet = mesh.tets[element]
    out: list[HdivBasisDescriptor] = []
    restricted = False
    for a in range(4):
        nb = int(mesh.neighbors[element, a])
        if nb < 0:
            restricted = True
            continue
        face = tuple(sorted(int(v) for v in tet[_FACE_LOCAL[a]]))
        other = int(next(v for v in mesh.tets[nb] if v not in face))
        src = int(tet[a])
        x0, x1 = mesh.vertices[src], mesh.vertices[other]
        out.append(HdivBasisDescriptor("face", face, (element, nb), src, other,
                                       0.5 * (x0 + x1), x1 - x0))
    for i, j in _EDGE_LOCAL:
        a, b = sorted((int(tet[i]), int(tet[j])))
        fan = np.intersect1d(mesh.elements_at([a]), mesh.elements_at([b]))
        x0, x1 = mesh.vertices[a], mesh.vertices[b]
        out.append(HdivBasisDescriptor("edge", (a, b), tuple(int(f) for f in fan), a, b,
                                       0.5 * (x0 + x1), x1 - x0))
    return out, restricted


def descriptor_field(mesh: Mesh, desc: HdivBasisDescriptor, element: int, x: np.ndarray) -> np.ndarray:
    """Vector field of ``desc`` at points ``x`` (..., 3) inside ``element``."""
    x = np.asarray(x, dtype=float)
    if element not in desc.support:
        return np.zeros_like(x)
    if desc.kind == "edge":
        vol = mesh.volumes[list(desc.support)].sum()
        return np.broadcast_to(desc.direction / vol, x.shape).copy()
    plus, minus = desc.support
    if element == plus:
        return 4.0 * (x - mesh.vertices[desc.source]) / (3.0 * mesh.volumes[plus])
    return -4.0 * (x - mesh.vertices[desc.sink]) / (3.0 * mesh.volumes[minus])


def descriptor_coupling(desc: HdivBasisDescriptor) -> tuple[np.ndarray, np.ndarray]:
    return np.array([desc.source, desc.sink]), np.array([-1.0, 1.0])


def _descriptor_arrays(descs):
    pos = np.array([d.position for d in descs])
    dirs = np.array([d.direction for d in descs])
    return pos, dirs


def _mean_edge(mesh: Mesh, element: int) -> float:
    p = mesh.vertices[mesh.tets[element]]
    return float(np.mean(np.linalg.norm(p[_EDGE_LOCAL[:, 0]] - p[_EDGE_LOCAL[:, 1]], axis=1)))


def _fit_pbo(pos, dirs, p, scale, cond_max=1e6):
    """Exact moment matching with three descriptors.

    Among all triples with independent directions, take the one whose
    per-unit-moment coefficients weighted by the distance of each
    descriptor from ``p`` are smallest.  The choice does not depend on the
    moment, so the load stays linear in it.
    """
    dist = np.linalg.norm(pos - p, axis=1) / scale
    best = None
    for tri in itertools.combinations(range(len(pos)), 3):
        sub = dirs[list(tri)].T
        cond = np.linalg.cond(sub)
        if not np.isfinite(cond) or cond > cond_max:
            continue
        coef = np.linalg.solve(sub, np.eye(3))
        cost = float(np.sum(np.linalg.norm(coef, axis=1) * dist[list(tri)]))
        if best is None or cost < best[0]:
            best = (cost, tri, coef, cond)
    if best is None:
        raise SourceModelError("no descriptor triple spans 3-D space "
                               f"(best condition {np.linalg.cond(dirs.T):.2e})")
    _, tri, coef, cond = best
    full = np.zeros((len(pos), 3))
    full[list(tri)] = coef
    return full, cond


def _fit_mpo(pos, dirs, p, scale, cond_max=1e10):
    """Distance-weighted minimum-norm coefficients reproducing the moment."""
    wgt = 1.0 + (np.linalg.norm(pos - p, axis=1) / scale) ** 2
    winv = 1.0 / wgt
    d = dirs.T  # (3, K)
    gram = (d * winv) @ d.T
    cond = np.linalg.cond(gram)
    if cond > cond_max:
        raise SourceModelError(f"singular MPO fit (condition {cond:.2e})")
    full = (winv[:, None] * d.T) @ np.linalg.solve(gram, np.eye(3))
    return full, cond


def _fit_first_moments(pos, dirs, p, scale, ridge=1e-3, cond_max=1e12):
    """Exact moment, least-squares vanishing first moments, small ridge.

    minimise ||M c||^2 + ridge ||c||^2 subject to D c = q, where row block
    ``M`` holds the nine entries of ``(x_k - p) d_k^T`` per descriptor.
    """
    k = len(pos)
    rel = (pos - p) / scale
    dn = dirs / scale
    m1 = np.einsum("ki,kj->ijk", rel, dn).reshape(9, k)
    h = 2.0 * (m1.T @ m1 + ridge * np.eye(k))
    kkt = np.block([[h, dn], [dn.T, np.zeros((3, 3))]])
    cond = np.linalg.cond(kkt)
    if cond > cond_max:
        raise SourceModelError(f"singular H(div) fit (condition {cond:.2e})")
    rhs = np.vstack([np.zeros((k, 3)), np.eye(3) / scale])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:k], cond


def _descriptor_load(mesh, d, descs, coef3, model, meta):
    c = coef3 @ d.moment
    idx = np.array([[x.source, x.sink] for x in descs]).ravel()
    vals = np.column_stack([-c, c]).ravel()
    meta = dict(meta, coefficients=c)
    return _sparse(idx, vals, model, d, meta)


def whitney_fit(mesh: Mesh, d: Dipole, fit: str = "pbo"):
    """Descriptors and the (K, 3) coefficient matrix mapping moments to coefficients."""
    e = _locate(mesh, d)
    descs, restricted = enumerate_hdiv_basis(mesh, e)
    if not descs:
        raise SourceModelError("no interior descriptors around the source element")
    pos, dirs = _descriptor_arrays(descs)
    scale = _mean_edge(mesh, e)
    if fit == "pbo":
        coef3, cond = _fit_pbo(pos, dirs, d.position, scale)
    elif fit == "mpo":
        coef3, cond = _fit_mpo(pos, dirs, d.position, scale)
    elif fit == "moments":
        coef3, cond = _fit_first_moments(pos, dirs, d.position, scale)
    else:
        raise ValueError(f"unknown fit {fit!r}")
    return descs, coef3, {"element": e, "restricted": restricted, "condition": cond}


def rhs_whitney(mesh: Mesh, d: Dipole, fit: str = "pbo") -> LoadVector:
    """Whitney-type load; ``fit`` is ``"pbo"`` or ``"mpo"``."""
    if fit not in ("pbo", "mpo"):
        raise ValueError(f"unknown Whitney fit {fit!r}")
    descs, coef3, meta = whitney_fit(mesh, d, fit)
    return _descriptor_load(mesh, d, descs, coef3, f"whitney-{fit}", meta)


def rhs_hdiv(mesh: Mesh, d: Dipole) -> LoadVector:
    """Face + edge descriptors fitted with moment and first-order position moments."""
    descs, coef3, meta = whitney_fit(mesh, d, "moments")
    return _descriptor_load(mesh, d, descs, coef3, "hdiv", meta)


# local subtraction ----------------------------------------------------------------

def _kernel_parts(sigma, p, x):
    """``(S, sd, r3, quad)`` with ``S = sigma^-1``, ``sd = S (x-p)``,
    ``quad = (x-p)^T S (x-p)`` and ``r3 = quad^-3/2 / (4 pi sqrt(det sigma))``."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 0:
        sigma = float(sigma) * np.eye(3)
    s_inv = np.linalg.inv(sigma)
    dx = np.asarray(x, dtype=float) - np.asarray(p, dtype=float)
    sd = dx @ s_inv  # S symmetric
    quad = np.einsum("...i,...i->...", sd, dx)
    if np.any(quad <= 0):
        raise ValueError("evaluation point coincides with the dipole")
    c = 1.0 / (4.0 * np.pi * np.sqrt(np.linalg.det(sigma)))
    return s_inv, sd, c * quad ** -1.5, quad


def _dipole_kernels(sigma, p, x):
    """Linear maps from moment to ``u_inf`` and ``grad u_inf`` at points ``x``.

    Returns ``(kp, kg)`` with ``u = kp @ q`` (kp: (..., 3)) and
    ``grad u = kg @ q`` (kg: (..., 3, 3)).
    """
    s_inv, sd, r3, quad = _kernel_parts(sigma, p, x)
    kp = sd * r3[..., None]
    kg = (r3[..., None, None] * s_inv
          - 3.0 * (r3 / quad)[..., None, None] * sd[..., :, None] * sd[..., None, :])
    return kp, kg


def infinite_medium_potential(sigma, p, q, x) -> np.ndarray:
    """Potential of a dipole in an unbounded homogeneous (anisotropic) medium.

    ``u(x) = q^T S (x-p) / (4 pi sqrt(det sigma) ((x-p)^T S (x-p))^{3/2})``
    with ``S = sigma^{-1}``.
    """
    kp, _ = _dipole_kernels(sigma, p, x)
    return kp @ np.asarray(q, dtype=float)


def infinite_medium_gradient(sigma, p, q, x) -> np.ndarray:
    _, kg = _dipole_kernels(sigma, p, x)
    return kg @ np.asarray(q, dtype=float)


@dataclass
class CorrectionMeta:
    """Bookkeeping of a local-subtraction load.

    ``chi_u_electrodes`` holds ``chi * u_inf`` at the electrode vertices.
    It is zero whenever the patch stays clear of the electrodes, and then
    electrode readouts of the correction potential are total potentials.
    """

    element: int
    patch: np.ndarray
    transition: np.ndarray
    chi_vertices: np.ndarray
    sigma_inf: np.ndarray
    chi_u_electrodes: np.ndarray
    sum_before_projection: float


def _adaptive_subtets(corners: np.ndarray, p: np.ndarray, near_factor: float, max_levels: int):
    """Split sub-tetrahedra whose centroid lies within ``near_factor`` diameters of ``p``.

    Returns ``(owner, sub)``: the parent element of every leaf and its
    barycentric corners (S, 4, 4) in that parent.
    """
    children = subdivided_bary(1)
    owner = np.arange(corners.shape[0])
    sub = np.broadcast_to(np.eye(4), (owner.size, 4, 4)).copy()
    for _ in range(max_levels):
        pts = sub @ corners[owner]
        diam = np.linalg.norm(pts[:, _EDGE_LOCAL[:, 0]] - pts[:, _EDGE_LOCAL[:, 1]], axis=2).max(axis=1)
        split = np.linalg.norm(pts.mean(axis=1) - p, axis=1) < near_factor * diam
        if not split.any():
            break
        kids = np.matmul(children[None], sub[split][:, None]).reshape(-1, 4, 4)
        owner = np.concatenate([owner[~split], np.repeat(owner[split], 8)])
        sub = np.concatenate([sub[~split], kids])
    return owner, sub


def _subtraction_integrals(mesh: Mesh, elems: np.ndarray, chi: np.ndarray, p: np.ndarray,
                           moments: np.ndarray, sigma_inf: np.ndarray, degree: int,
                           max_levels: int, near_factor: float) -> np.ndarray:
    """(E, 4, K) contributions ``b_i`` per element, local vertex and moment."""
    k = moments.shape[0]
    out = np.zeros((elems.size, 4, k))
    if elems.size == 0:
        return out
    corners = mesh.vertices[mesh.tets[elems]]
    chi_e = chi[mesh.tets[elems]]
    grads = mesh.grads[elems]
    grad_chi = np.einsum("ea,eak->ek", chi_e, grads)
    sg_chi = grad_chi @ sigma_inf
    dsig = mesh.conductivity[elems] - sigma_inf
    has_dsig = np.abs(dsig).max(axis=(1, 2)) > 0
    # sigma_inf grad(chi) . grad(phi_a)
    a_chi = np.einsum("eak,ek->ea", grads, sg_chi)
    # (sigma - sigma_inf) grad(phi_a)
    dg = np.einsum("ekl,eal->eak", dsig, grads)

    owner, sub = _adaptive_subtets(corners, p, near_factor, max_levels)
    pts, wts, bary = tet_rule(sub @ corners[owner], degree)
    lam = np.matmul(bary, sub)  # (S, Q, 4) parent barycentrics
    # grad u = (r3 S - 3 r3/quad sd sd^T) q is contracted analytically, never formed
    s_inv, sd, r3, quad = _kernel_parts(sigma_inf, p, pts)
    r5 = 3.0 * r3 / quad
    qt = moments.T  # (3, K)
    wr3 = wts * r3
    kpw = (wr3[:, None, :] @ sd)[:, 0]  # int u = kpw @ q
    res = -a_chi[owner][:, :, None] * (kpw @ qt)[:, None, :]
    # +int sigma_inf phi_a grad(chi) . grad(u)
    sg = sg_chi[owner]
    sgsd = (sd @ sg[:, :, None])[..., 0]
    v = wr3[..., None] * (sg @ s_inv)[:, None, :] - (wts * r5 * sgsd)[..., None] * sd
    res += (lam.transpose(0, 2, 1) @ v) @ qt
    sel = np.nonzero(has_dsig[owner])[0]
    if sel.size:
        # -int (sigma - sigma_inf) grad(chi u) . grad(phi_a)
        o = owner[sel]
        chi_q = (lam[sel] @ chi_e[o][:, :, None])[..., 0]
        cw3 = chi_q * wr3[sel]
        cw5 = chi_q * (wts * r5)[sel]
        gw = (cw3.sum(axis=1)[:, None, None] * s_inv
              - (sd[sel] * cw5[..., None]).transpose(0, 2, 1) @ sd[sel])
        res[sel] -= ((dg[o] @ grad_chi[o][:, :, None]) * (kpw[sel] @ qt)[:, None, :]
                     + (dg[o] @ gw) @ qt)
    np.add.at(out, owner, res)
    return out


def local_subtraction_loads(mesh: Mesh, position, moments, rings: int = 1, *, electrodes=None,
                            degree: int = 4, max_levels: int = 12, near_factor: float = 1.0,
                            min_distance_fraction: float = 0.1) -> list[LoadVector]:
    """Local-subtraction loads for several moments at one position.

    The cutoff ``chi`` is 1 on every vertex of the ``rings``-ring patch
    around the source element and 0 elsewhere, so ``grad chi`` lives on the
    next ring.  The analytic part ``chi * u_inf`` uses the source
    element's tensor.  Electrode readouts of the returned load (through the
    transfer matrix) are total potentials as long as the cutoff vanishes
    at every electrode, which is enforced when ``electrodes`` is given.

    Quadrature is a degree-``degree`` Gauss rule on adaptively split
    sub-tetrahedra: a piece is split while its centroid lies within
    ``near_factor`` diameters of the dipole, up to ``max_levels`` times.  The
    small quadrature-induced total is removed uniformly over the support
    and recorded in the metadata.
    """
    position = np.asarray(position, dtype=float).reshape(3)
    moments = np.atleast_2d(np.asarray(moments, dtype=float))
    e, _ = mesh.find_enclosing_element(position)
    sigma_inf = mesh.conductivity[e]
    patch = mesh.element_ring(e, rings)
    inner_vertices = np.unique(mesh.tets[patch])
    support = mesh.elements_at(inner_vertices)
    transition = np.setdiff1d(support, patch, assume_unique=True)
    chi = np.zeros(mesh.n_vertices)
    chi[inner_vertices] = 1.0

    outer_vertices = np.setdiff1d(np.unique(mesh.tets[transition]), inner_vertices)
    if outer_vertices.size:
        edge = _mean_edge(mesh, e)
        gap = np.linalg.norm(mesh.vertices[outer_vertices] - position, axis=1).min()
        if gap < min_distance_fraction * edge:
            raise SourceModelError(f"dipole is {gap:.3g} mm from a patch-boundary vertex")

    chi_u_el = np.zeros((0, moments.shape[0]))
    if electrodes is not None:
        ev = np.asarray(electrodes.vertices)
        if np.intersect1d(np.unique(mesh.tets[support]), ev).size:
            raise SourceModelError("local-subtraction patch touches an electrode vertex")
        kp, _ = _dipole_kernels(sigma_inf, position, mesh.vertices[ev])
        chi_u_el = chi[ev][:, None] * (kp @ moments.T)

    # only elements with grad chi != 0 or sigma != sigma_inf contribute
    differs = np.abs(mesh.conductivity[patch] - sigma_inf).max(axis=(1, 2)) > 0
    elems = np.concatenate([transition, patch[differs]])
    contrib = _subtraction_integrals(mesh, elems, chi, position, moments, sigma_inf,
                                     degree, max_levels, near_factor)
    rows = mesh.tets[elems].ravel()
    loads = []
    for k, q in enumerate(moments):
        load = _sparse(rows, contrib[:, :, k].ravel(), "localsub", Dipole(position, q))
        total = load.total()
        if load.values.size:
            load.values -= total / load.values.size
        load.meta = {
            "element": e,
            "correction": CorrectionMeta(e, patch, transition, inner_vertices, sigma_inf,
                                         chi_u_el[:, k] if chi_u_el.size else np.zeros(0), total),
        }
        loads.append(load)
    return loads


def rhs_local_subtraction(mesh: Mesh, d: Dipole, rings: int = 1, **kwargs) -> LoadVector:
    """Local subtraction load of one dipole (see `local_subtraction_loads`)."""
    return local_subtraction_loads(mesh, d.position, d.moment[None], rings, **kwargs)[0]


# dispatch -------------------------------------------------------------------------

def build_rhs(mesh: Mesh, d: Dipole, model: str, **kwargs) -> LoadVector:
    """Load vector of ``d`` under the source model tagged ``model``."""
    if model == "pi":
        return rhs_partial_integration(mesh, d)
    if model == "whitney-pbo":
        return rhs_whitney(mesh, d, "pbo")
    if model == "whitney-mpo":
        return rhs_whitney(mesh, d, "mpo")
    if model == "hdiv":
        return rhs_hdiv(mesh, d)
    if model == "localsub":
        return rhs_local_subtraction(mesh, d, **kwargs)
    raise ValueError(f"unknown source model {model!r}; expected one of {SOURCE_MODELS}")


def component_loads(mesh: Mesh, position, model: str, **kwargs) -> list[LoadVector]:
    """Loads for unit moments along x, y and z at ``position``.

    Point location and coefficient fits are shared by the three components.
    """
    position = np.asarray(position, dtype=float).reshape(3)
    eye = np.eye(3)
    if model == "localsub":
        return local_subtraction_loads(mesh, position, eye, **kwargs)
    if model == "pi":
        e, _ = mesh.find_enclosing_element(position)
        return [_sparse(mesh.tets[e], mesh.grads[e] @ eye[a], "pi", Dipole(position, eye[a]),
                        {"element": e}) for a in range(3)]
    fits = {"whitney-pbo": "pbo", "whitney-mpo": "mpo", "hdiv": "moments"}
    if model not in fits:
        raise ValueError(f"unknown source model {model!r}; expected one of {SOURCE_MODELS}")
    descs, coef3, meta = whitney_fit(mesh, Dipole(position, eye[0]), fits[model])
    return [_descriptor_load(mesh, Dipole(position, eye[a]), descs, coef3, model, meta)
            for a in range(3)]


__all__ = [
    "SOURCE_MODELS", "SourceModelError", "MeshError", "Dipole", "LoadVector",
    "HdivBasisDescriptor", "CorrectionMeta", "rhs_partial_integration",
    "enumerate_hdiv_basis", "descriptor_field", "descriptor_coupling", "rhs_whitney",
    "rhs_hdiv", "rhs_local_subtraction", "infinite_medium_potential",
    "infinite_medium_gradient", "local_subtraction_loads", "build_rhs", "component_loads", "whitney_fit",
]

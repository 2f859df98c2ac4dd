"""Layered-sphere tetrahedral head models and geometric queries.

Lengths are in millimetres, conductivities in S/m.

The mesher maps a structured cube grid onto a ball.  Every integer
max-norm shell of the grid becomes a sphere (or, inside the innermost
layer, a cube-to-sphere blend), so compartment interfaces are conforming
and watertight by construction.  Each grid cube is split into six
tetrahedra along its main diagonal (Kuhn/Freudenthal split).  The split is
mirrored across the coordinate planes, which keeps it conforming and
keeps every diagonal pointing outward.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_RADII = (78.0, 80.0, 86.0, 92.0)
DEFAULT_CONDUCTIVITIES = (0.33, 1.79, 0.01, 0.43)
LAYER_NAMES = ("brain", "csf", "skull", "scalp")

DEFAULT_ELEMENT_CAP = 2_000_000


class MeshError(ValueError):
    """Invalid mesh parameters or inconsistent mesh data."""


class PointOutsideMeshError(MeshError):
    """A query point is not inside any element."""


class EmptySurfaceError(MeshError):
    """An interface extraction produced no triangles."""


def _as_tensor(value) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return float(arr) * np.eye(3)
    if arr.shape != (3, 3):
        raise MeshError(f"conductivity must be a scalar or 3x3 tensor, got shape {arr.shape}")
    return arr


def check_spd_batch(tensors: np.ndarray) -> None:
    """Raise `MeshError` unless every (3, 3) tensor is symmetric positive definite."""
    asym = np.abs(tensors - np.transpose(tensors, (0, 2, 1))).max(axis=(1, 2))
    scale = np.abs(tensors).max(axis=(1, 2))
    bad = np.nonzero(asym > 1e-12 * np.maximum(scale, 1e-300))[0]
    if bad.size:
        raise MeshError(f"conductivity tensor of element {int(bad[0])} is not symmetric")
    bad = np.nonzero(np.linalg.eigvalsh(tensors)[:, 0] <= 0)[0]
    if bad.size:
        raise MeshError(f"conductivity tensor of element {int(bad[0])} is not positive definite")


def check_spd(tensor: np.ndarray, atol: float = 1e-12) -> None:
    if not np.allclose(tensor, tensor.T, atol=atol, rtol=1e-12):
        raise MeshError("conductivity tensor is not symmetric")
    if np.linalg.eigvalsh(tensor).min() <= 0.0:
        raise MeshError("conductivity tensor is not positive definite")


def core_cells(refinement: int) -> int:
    """Radial cell count of the innermost layer at a refinement level."""
    return 3 * 2 ** int(refinement)


@dataclass(frozen=True)
class LayeredSphereSpec:
    """Concentric-sphere head model.

    Parameters
    ----------
    radii : sequence of float
        Outer radius of every layer in mm, innermost first.
    conductivities : sequence
        One entry per layer: a scalar (isotropic) or a 3x3 SPD tensor.
    refinement : int
        The innermost layer gets ``core_cells(refinement) = 3 * 2 ** refinement``
        radial cells; outer layers get cells of about the same thickness.
    center : 3-vector
        Sphere center in mm.
    element_cap : int
        Upper bound on the number of tetrahedra.
    cells : int, optional
        Explicit radial cell count of the innermost layer; overrides
        ``refinement`` when given.
    """

    radii: Sequence[float] = DEFAULT_RADII
    conductivities: Sequence = DEFAULT_CONDUCTIVITIES
    refinement: int = 2
    center: Sequence[float] = (0.0, 0.0, 0.0)
    element_cap: int = DEFAULT_ELEMENT_CAP
    cells: int | None = None

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=float)
        if radii.ndim != 1 or radii.size == 0:
            raise MeshError("at least one layer radius is required")
        if np.any(radii <= 0) or np.any(np.diff(radii) <= 0):
            raise MeshError(f"radii must be positive and strictly increasing, got {list(radii)}")
        if len(self.conductivities) != radii.size:
            raise MeshError("one conductivity per layer is required")
        for c in self.conductivities:
            check_spd(_as_tensor(c))
        if int(self.refinement) != self.refinement or self.refinement < 0:
            raise MeshError("refinement must be a non-negative integer")
        if self.cells is not None and (int(self.cells) != self.cells or self.cells < 1):
            raise MeshError("cells must be a positive integer")

    @property
    def n_core(self) -> int:
        return int(self.cells) if self.cells is not None else core_cells(self.refinement)

    @property
    def n_layers(self) -> int:
        return len(self.radii)

    def tensors(self) -> np.ndarray:
        return np.stack([_as_tensor(c) for c in self.conductivities])

    def level_radii(self) -> tuple[np.ndarray, np.ndarray]:
        """Radius of every grid shell and the layer each shell band belongs to.

        Returns ``(rho, band_layer)`` where ``rho[l]`` is the radius of shell
        ``l`` (``rho[0] == 0``) and ``band_layer[l - 1]`` the 0-based layer of
        the band between shells ``l - 1`` and ``l``.
        """
        radii = np.asarray(self.radii, dtype=float)
        n_core = self.n_core
        h = radii[0] / n_core
        rho = list(np.linspace(0.0, radii[0], n_core + 1))
        band_layer = [0] * n_core
        for k in range(1, radii.size):
            n_k = max(1, int(round((radii[k] - radii[k - 1]) / h)))
            rho.extend(np.linspace(radii[k - 1], radii[k], n_k + 1)[1:])
            band_layer.extend([k] * n_k)
        return np.asarray(rho), np.asarray(band_layer, dtype=np.int64)


def _kuhn_tets() -> np.ndarray:
    """Six tetrahedra of the unit cube, as corner offsets (6, 4, 3)."""
    tets = []
    for perm in itertools.permutations(range(3)):
        corner = np.zeros(3, dtype=np.int64)
        verts = [corner.copy()]
        for axis in perm:
            corner[axis] += 1
            verts.append(corner.copy())
        tets.append(verts)
    return np.asarray(tets)


def _element_geometry(vertices: np.ndarray, tets: np.ndarray):
    """Signed volumes, barycentric gradients and affine inverses."""
    p = vertices[tets]
    edges = p[:, 1:, :] - p[:, :1, :]  # (E, 3, 3), rows are edge vectors
    det = np.linalg.det(edges)
    volume = det / 6.0
    # rows of inv(edges).T are gradients of barycentric coords 1..3
    inv = np.linalg.inv(edges)
    g123 = np.transpose(inv, (0, 2, 1))
    g0 = -g123.sum(axis=1, keepdims=True)
    grads = np.concatenate([g0, g123], axis=1)
    return volume, grads


@dataclass(eq=False)
class Mesh:
    """Tetrahedral mesh with per-element compartment labels and tensors.

    ``tets`` are positively oriented.  ``grads[e, a]`` is the gradient of
    the barycentric coordinate of local vertex ``a`` in element ``e``.
    """

    vertices: np.ndarray
    tets: np.ndarray
    labels: np.ndarray
    conductivity: np.ndarray
    center: np.ndarray | None = None
    volumes: np.ndarray = field(init=False, repr=False)
    grads: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=float)
        self.tets = np.ascontiguousarray(self.tets, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.conductivity = np.ascontiguousarray(self.conductivity, dtype=float)
        n_el = self.tets.shape[0]
        if self.tets.ndim != 2 or self.tets.shape[1] != 4:
            raise MeshError("tetrahedra must be an (E, 4) index array")
        if self.labels.shape != (n_el,) or self.conductivity.shape != (n_el, 3, 3):
            raise MeshError("labels and conductivity must have one entry per element")
        volume, _ = _element_geometry(self.vertices, self.tets)
        flip = volume < 0
        if np.any(flip):
            self.tets[flip] = self.tets[flip][:, [0, 2, 1, 3]]
        volume, grads = _element_geometry(self.vertices, self.tets)
        if np.any(volume <= 0):
            raise MeshError(f"{int(np.sum(volume <= 0))} degenerate elements")
        self.volumes = volume
        self.grads = grads
        self.center = np.zeros(3) if self.center is None else np.asarray(self.center, dtype=float)
        check_spd_batch(self.conductivity)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_elements(self) -> int:
        return self.tets.shape[0]

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.tets].mean(axis=1)

    @cached_property
    def _faces(self):
        """Sorted face keys of all element faces and their owners.

        Face ``a`` of an element is the one opposite local vertex ``a``.
        """
        n_el = self.n_elements
        local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
        faces = np.sort(self.tets[:, local], axis=2).reshape(-1, 3)
        owner = np.repeat(np.arange(n_el), 4)
        slot = np.tile(np.arange(4), n_el)
        order = np.lexsort((faces[:, 2], faces[:, 1], faces[:, 0]))
        return faces, owner, slot, order

    @cached_property
    def neighbors(self) -> np.ndarray:
        """``neighbors[e, a]``: element across the face opposite local vertex a, or -1."""
        faces, owner, slot, order = self._faces
        fs = faces[order]
        same = np.all(fs[1:] == fs[:-1], axis=1)
        nb = -np.ones((self.n_elements, 4), dtype=np.int64)
        i = np.nonzero(same)[0]
        a, b = order[i], order[i + 1]
        nb[owner[a], slot[a]] = owner[b]
        nb[owner[b], slot[b]] = owner[a]
        return nb

    @cached_property
    def vertex_elements(self) -> tuple[np.ndarray, np.ndarray]:
        """CSR (indptr, indices) of the elements incident to each vertex, ascending."""
        flat = self.tets.ravel()
        elems = np.repeat(np.arange(self.n_elements), 4)
        order = np.lexsort((elems, flat))
        counts = np.bincount(flat, minlength=self.n_vertices)
        indptr = np.concatenate([[0], np.cumsum(counts)])
        return indptr, elems[order]

    def elements_at(self, vertex_ids) -> np.ndarray:
        """Sorted unique elements incident to any of ``vertex_ids``."""
        indptr, idx = self.vertex_elements
        vertex_ids = np.atleast_1d(np.asarray(vertex_ids, dtype=np.int64))
        parts = [idx[indptr[v]:indptr[v + 1]] for v in vertex_ids]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.unique(np.concatenate(parts))

    def element_ring(self, element: int, rings: int) -> np.ndarray:
        """Elements within ``rings`` vertex-adjacency steps of ``element``."""
        elems = np.array([element], dtype=np.int64)
        for _ in range(rings):
            elems = self.elements_at(np.unique(self.tets[elems]))
        return elems

    def boundary_vertices(self) -> np.ndarray:
        """Vertices on the outer boundary, ascending."""
        e, a = np.nonzero(self.neighbors < 0)
        local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
        return np.unique(self.tets[e[:, None], local[a]])

    def compartment_volumes(self) -> dict[int, float]:
        return {int(l): float(self.volumes[self.labels == l].sum()) for l in np.unique(self.labels)}

    def with_conductivity(self, conductivity: np.ndarray) -> "Mesh":
        """Same geometry, different per-element tensors (geometry is shared)."""
        new = Mesh.__new__(Mesh)
        new.vertices = self.vertices
        new.tets = self.tets
        new.labels = self.labels
        new.conductivity = np.ascontiguousarray(conductivity, dtype=float)
        if new.conductivity.shape != (self.n_elements, 3, 3):
            raise MeshError("conductivity must have shape (E, 3, 3)")
        new.center = self.center
        new.volumes = self.volumes
        new.grads = self.grads
        check_spd_batch(new.conductivity)
        for key in ("_faces", "neighbors", "vertex_elements", "centroids", "_locator"):
            if key in self.__dict__:
                new.__dict__[key] = self.__dict__[key]
        return new

    # point location -------------------------------------------------------

    @cached_property
    def _locator(self):
        p = self.vertices[self.tets]
        lo, hi = p.min(axis=1), p.max(axis=1)
        cell = float((hi - lo).max()) * 1.0001
        origin = self.vertices.min(axis=0) - 1e-9
        shape = np.floor((self.vertices.max(axis=0) - origin) / cell).astype(np.int64) + 1
        ilo = np.floor((lo - origin) / cell).astype(np.int64)
        ihi = np.floor((hi - origin) / cell).astype(np.int64)
        keys, owners = [], []
        # cell >= element extent, so every bbox spans at most 2 cells per axis
        for off in itertools.product((0, 1), repeat=3):
            c = ilo + np.asarray(off)
            ok = np.all(c <= ihi, axis=1)
            keys.append(np.ravel_multi_index(c[ok].T, shape))
            owners.append(np.nonzero(ok)[0])
        keys = np.concatenate(keys)
        owners = np.concatenate(owners)
        order = np.lexsort((owners, keys))
        keys, owners = keys[order], owners[order]
        n_cells = int(np.prod(shape))
        indptr = np.searchsorted(keys, np.arange(n_cells + 1))
        inv = np.linalg.inv(p[:, 1:, :] - p[:, :1, :])
        return origin, cell, shape, indptr, owners, inv

    def barycentric(self, element: int | np.ndarray, point: np.ndarray) -> np.ndarray:
        """Barycentric coordinates of ``point`` with respect to ``element``."""
        *_, inv = self._locator
        v0 = self.vertices[self.tets[element, 0]]
        lam = np.einsum("...i,...ij->...j", np.asarray(point, dtype=float) - v0, inv[element])
        return np.concatenate([1.0 - lam.sum(axis=-1, keepdims=True), lam], axis=-1)

    def find_enclosing_element(self, point, tol: float = 1e-10) -> tuple[int, np.ndarray]:
        """Element containing ``point`` and its barycentric coordinates.

        Ties (points on shared faces, edges or vertices) go to the lowest
        element index.  Raises `PointOutsideMeshError` if no element
        contains the point; there is no nearest-element fallback.
        """
        point = np.asarray(point, dtype=float)
        origin, cell, shape, indptr, owners, _ = self._locator
        c = np.floor((point - origin) / cell).astype(np.int64)
        if np.any(c < 0) or np.any(c >= shape):
            raise PointOutsideMeshError(f"point {point.tolist()} is outside the mesh")
        key = np.ravel_multi_index(c, shape)
        cand = owners[indptr[key]:indptr[key + 1]]
        if cand.size:
            lam = self.barycentric(cand, point)
            inside = np.all(lam >= -tol, axis=1)
            if np.any(inside):
                k = int(np.argmax(inside))
                return int(cand[k]), lam[k]
        raise PointOutsideMeshError(f"point {point.tolist()} is outside the mesh")

    def locate(self, points, tol: float = 1e-10) -> np.ndarray:
        """Enclosing element of every row of ``points`` (raises if any is outside)."""
        return np.array([self.find_enclosing_element(p, tol)[0] for p in np.atleast_2d(points)],
                        dtype=np.int64)

    def contains(self, point, tol: float = 1e-10) -> bool:
        try:
            self.find_enclosing_element(point, tol)
        except PointOutsideMeshError:
            return False
        return True


def build_layered_sphere_mesh(spec: LayeredSphereSpec) -> Mesh:
    """Tetrahedral mesh of a concentric layered sphere.

    Shell vertices of every layer boundary lie exactly on the sphere of
    that radius (up to floating-point rounding).
    """
    rho, band_layer = spec.level_radii()
    n = rho.size - 1
    n_core = spec.n_core
    n_elements = 6 * (2 * n) ** 3
    if n_elements > spec.element_cap:
        raise MeshError(f"{n_core} core cells need {n_elements} elements, "
                        f"cap is {spec.element_cap}")

    side = 2 * n + 1
    g = np.stack(np.meshgrid(*(np.arange(-n, n + 1),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    level = np.abs(g).max(axis=1)
    vertices = np.zeros(g.shape, dtype=float)
    nz = level > 0
    cube = g[nz] / level[nz, None]
    sphere = cube / np.linalg.norm(cube, axis=1, keepdims=True)
    beta = np.minimum(level[nz] / n_core, 1.0)[:, None]
    direction = (1.0 - beta) * cube + beta * sphere
    vertices[nz] = rho[level[nz], None] * direction
    # exact radial snap on layer boundaries and beyond the core
    outer = level >= n_core
    vertices[outer] = rho[level[outer], None] * sphere[outer[nz]]
    vertices += np.asarray(spec.center, dtype=float)

    cubes = np.stack(np.meshgrid(*(np.arange(-n, n),) * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    kuhn = _kuhn_tets()
    # mirror the split in negative half-spaces so every diagonal points away
    # from the center; each tet then spans two shells instead of lying on one
    neg = (cubes < 0)[:, None, None, :]
    offsets = np.where(neg, 1 - kuhn[None], kuhn[None])
    corners = cubes[:, None, None, :] + offsets  # (C, 6, 4, 3)
    shifted = corners + n
    vid = (shifted[..., 0] * side + shifted[..., 1]) * side + shifted[..., 2]
    tets = vid.reshape(-1, 4)
    band = np.floor(np.abs(cubes + 0.5).max(axis=1)).astype(np.int64)  # 0-based band
    labels = np.repeat(band_layer[band], 6)

    tensors = spec.tensors()
    return Mesh(vertices, tets, labels, tensors[labels], center=np.asarray(spec.center, dtype=float))


def radial_anisotropy(mesh: Mesh, label: int = 0, ratio: float = 2.0,
                      volume_preserving: bool = True) -> Mesh:
    """Mesh copy whose ``label`` elements get radial:tangential = 1:ratio tensors.

    The radial direction is taken at each element centroid.  With
    ``volume_preserving`` the tensor determinant equals that of the
    isotropic tensor it replaces (sigma_rad * sigma_tan**2 == sigma**3).
    """
    cond = mesh.conductivity.copy()
    sel = np.nonzero(mesh.labels == label)[0]
    if sel.size == 0:
        raise MeshError(f"no elements with label {label}")
    sigma = np.trace(cond[sel], axis1=1, axis2=2) / 3.0
    if volume_preserving:
        s_rad = sigma / ratio ** (2.0 / 3.0)
    else:
        s_rad = sigma
    s_tan = ratio * s_rad
    r = mesh.centroids[sel] - mesh.center
    r /= np.linalg.norm(r, axis=1, keepdims=True)
    rr = r[:, :, None] * r[:, None, :]
    cond[sel] = s_tan[:, None, None] * np.eye(3) + (s_rad - s_tan)[:, None, None] * rr
    return mesh.with_conductivity(cond)


# surfaces ------------------------------------------------------------------

@dataclass
class SurfaceTriangulation:
    """Closed triangle surface; ``normals`` are outward unit normals."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def edges(self) -> np.ndarray:
        e = self.triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
        return np.sort(e, axis=1)

    def is_watertight(self) -> bool:
        _, counts = np.unique(self.edges(), axis=0, return_counts=True)
        return bool(np.all(counts == 2))

    def euler_characteristic(self) -> int:
        v = np.unique(self.triangles).size
        e = np.unique(self.edges(), axis=0).shape[0]
        return v - e + self.n_triangles


def extract_interface_surface(mesh: Mesh, inner: int, outer: int) -> SurfaceTriangulation:
    """Faces shared by one ``inner``-labelled and one ``outer``-labelled element.

    Normals point from the inner compartment into the outer one.
    """
    present = set(np.unique(mesh.labels).tolist())
    missing = {inner, outer} - present
    if missing:
        raise EmptySurfaceError(f"labels {sorted(missing)} not present in mesh")
    nb = mesh.neighbors
    e, a = np.nonzero((mesh.labels[:, None] == inner) & (nb >= 0))
    keep = mesh.labels[nb[e, a]] == outer
    e, a = e[keep], a[keep]
    if e.size == 0:
        raise EmptySurfaceError(f"no faces between labels {inner} and {outer}")
    local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    tris = mesh.tets[e[:, None], local[a]]
    p = mesh.vertices[tris]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    opposite = mesh.vertices[mesh.tets[e, a]]
    wrong = np.einsum("ij,ij->i", n, opposite - p[:, 0]) > 0
    tris[wrong] = tris[wrong][:, [0, 2, 1]]
    n[wrong] *= -1
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    surf = SurfaceTriangulation(mesh.vertices, tris, n)
    if not surf.is_watertight():
        raise MeshError(f"interface between labels {inner} and {outer} is not closed")
    return surf


def outer_surface(mesh: Mesh) -> SurfaceTriangulation:
    """Outer boundary of the mesh with outward normals."""
    e, a = np.nonzero(mesh.neighbors < 0)
    local = np.array([[1, 2, 3], [0, 2, 3], [0, 1, 3], [0, 1, 2]])
    tris = mesh.tets[e[:, None], local[a]]
    p = mesh.vertices[tris]
    n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    opposite = mesh.vertices[mesh.tets[e, a]]
    wrong = np.einsum("ij,ij->i", n, opposite - p[:, 0]) > 0
    tris[wrong] = tris[wrong][:, [0, 2, 1]]
    n[wrong] *= -1
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return SurfaceTriangulation(mesh.vertices, tris, n)


def point_triangle_distance(points, a, b, c) -> np.ndarray:
    """Distance from each point to each triangle (a, b, c), shape (P, T).

    Closest-point computation by Voronoi-region classification.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))[:, None, :]
    ab, ac = (b - a)[None], (c - a)[None]
    ap = points - a[None]
    d1 = np.einsum("ptk,ptk->pt", ab, ap)
    d2 = np.einsum("ptk,ptk->pt", ac, ap)
    bp = points - b[None]
    d3 = np.einsum("ptk,ptk->pt", ab, bp)
    d4 = np.einsum("ptk,ptk->pt", ac, bp)
    cp = points - c[None]
    d5 = np.einsum("ptk,ptk->pt", ab, cp)
    d6 = np.einsum("ptk,ptk->pt", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    with np.errstate(divide="ignore", invalid="ignore"):
        denom = 1.0 / (va + vb + vc)
        v_face = vb * denom
        w_face = vc * denom
        v_ab = d1 / (d1 - d3)
        w_ac = d2 / (d2 - d6)
        w_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
    zero = np.zeros_like(d1)
    v = v_face.copy()
    w = w_face.copy()
    # later assignments win: A > B > AB > C > AC > BC > face
    m_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    v = np.where(m_bc, 1.0 - w_bc, v)
    w = np.where(m_bc, w_bc, w)
    m_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    v = np.where(m_ac, zero, v)
    w = np.where(m_ac, w_ac, w)
    m_c = (d6 >= 0) & (d5 <= d6)
    v = np.where(m_c, zero, v)
    w = np.where(m_c, 1.0, w)
    m_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    v = np.where(m_ab, v_ab, v)
    w = np.where(m_ab, zero, w)
    m_b = (d3 >= 0) & (d4 <= d3)
    v = np.where(m_b, 1.0, v)
    w = np.where(m_b, zero, w)
    m_a = (d1 <= 0) & (d2 <= 0)
    v = np.where(m_a, zero, v)
    w = np.where(m_a, zero, w)
    closest = a[None] + v[..., None] * ab + w[..., None] * ac
    return np.linalg.norm(points - closest, axis=2)


def depth_from_surface(point, surface: SurfaceTriangulation, chunk: int = 256) -> float | np.ndarray:
    """Unsigned minimum distance from ``point`` (or each row of it) to ``surface``."""
    pts = np.asarray(point, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    tri = surface.vertices[surface.triangles]
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    out = np.empty(pts.shape[0])
    for s in range(0, pts.shape[0], chunk):
        out[s:s + chunk] = point_triangle_distance(pts[s:s + chunk], a, b, c).min(axis=1)
    return float(out[0]) if single else out


# text format -------------------------------------------------------------------

def save_mesh(mesh: Mesh, path) -> None:
    """Write the sectioned text format (``vertices``, ``tetrahedra``, ``labels``, ``conductivity``)."""
    lines = [f"vertices {mesh.n_vertices}"]
    lines += [" ".join(repr(float(x)) for x in row) for row in mesh.vertices]
    lines.append(f"tetrahedra {mesh.n_elements}")
    lines += [" ".join(str(int(i)) for i in row) for row in mesh.tets]
    lines.append(f"labels {mesh.n_elements}")
    lines += [str(int(l)) for l in mesh.labels]
    lines.append(f"conductivity {mesh.n_elements}")
    lines += [" ".join(repr(float(x)) for x in row.ravel()) for row in mesh.conductivity]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh(path) -> Mesh:
    text = Path(path).read_text().splitlines()
    sections: dict[str, list[str]] = {}
    i = 0
    while i < len(text):
        head = text[i].split()
        if len(head) != 2:
            raise MeshError(f"line {i + 1}: expected a section header, got {text[i]!r}")
        name, count = head[0], int(head[1])
        body = text[i + 1:i + 1 + count]
        if len(body) != count:
            raise MeshError(f"section {name!r} is truncated")
        sections[name] = body
        i += 1 + count
    for name in ("vertices", "tetrahedra", "labels", "conductivity"):
        if name not in sections:
            raise MeshError(f"missing section {name!r}")
    vertices = np.array([[float(x) for x in ln.split()] for ln in sections["vertices"]])
    tets = np.array([[int(x) for x in ln.split()] for ln in sections["tetrahedra"]], dtype=np.int64)
    labels = np.array([int(ln) for ln in sections["labels"]], dtype=np.int64)
    cond = np.array([[float(x) for x in ln.split()] for ln in sections["conductivity"]]).reshape(-1, 3, 3)
    return Mesh(vertices.reshape(-1, 3), tets.reshape(-1, 4), labels, cond)

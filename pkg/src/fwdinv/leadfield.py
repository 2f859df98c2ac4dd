"""Lead fields from a transfer matrix and a source model, plus persistence."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fem import ElectrodeSet, FormatError, TransferMatrix
from .mesh import Mesh, SurfaceTriangulation, depth_from_surface
from .sources import SOURCE_MODELS, component_loads


@dataclass
class SourceSpace:
    """Ordered source positions with depth (from inner skull) and relative height.

    Every position carries three Cartesian moment components in the lead field.
    """

    positions: np.ndarray
    depth: np.ndarray
    relheight: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.depth = np.asarray(self.depth, dtype=float).ravel()
        self.relheight = np.asarray(self.relheight, dtype=float).ravel()
        n = self.positions.shape[0]
        if self.depth.size != n or self.relheight.size != n:
            raise ValueError("depth and relheight need one entry per source")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_positions(cls, positions, inner_skull: SurfaceTriangulation,
                       electrodes: ElectrodeSet) -> "SourceSpace":
        positions = np.asarray(positions, dtype=float).reshape(-1, 3)
        depth = depth_from_surface(positions, inner_skull)
        z0 = float(electrodes.positions[:, 2].min())
        return cls(positions, np.atleast_1d(depth), positions[:, 2] - z0)

    def subset(self, index) -> "SourceSpace":
        index = np.asarray(index)
        return SourceSpace(self.positions[index], self.depth[index], self.relheight[index])

    def check_inside(self, mesh: Mesh, label: int = 0) -> None:
        elems = mesh.locate(self.positions)
        bad = np.nonzero(mesh.labels[elems] != label)[0]
        if bad.size:
            raise ValueError(f"sources {bad[:10].tolist()} are outside compartment {label}")


@dataclass
class LeadField:
    """Electrode-by-(3 x sources) matrix; columns ``3j .. 3j+2`` belong to source ``j``."""

    matrix: np.ndarray
    model: str
    conductivity: str
    space: SourceSpace
    meta: dict = field(default_factory=dict)

    @property
    def n_electrodes(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sources(self) -> int:
        return self.matrix.shape[1] // 3

    def block(self, j: int) -> np.ndarray:
        return self.matrix[:, 3 * j:3 * j + 3]


class LeadFieldError(RuntimeError):
    """One or more sources could not be turned into lead-field columns."""

    def __init__(self, failures: dict[int, str]):
        self.failures = failures
        head = "; ".join(f"{k}: {v}" for k, v in list(failures.items())[:5])
        super().__init__(f"{len(failures)} source(s) failed ({head})")


def build_leadfield(tm: TransferMatrix, mesh: Mesh, space: SourceSpace, model: str, *,
                    electrodes: ElectrodeSet | None = None, conductivity: str = "isotropic",
                    **rhs_kwargs) -> LeadField:
    """Column ``3j + a`` is ``T^T rhs(p_j, e_a)`` under the source model ``model``.

    Failing sources are collected; if any fail, `LeadFieldError` lists them all.
    With an average reference every column is projected to zero mean.
    """
    if model not in SOURCE_MODELS:
        raise ValueError(f"unknown source model {model!r}")
    if tm.matrix.shape[0] != mesh.n_vertices:
        raise ValueError("transfer matrix rows do not match the mesh")
    if model == "localsub" and electrodes is not None:
        rhs_kwargs = dict(rhs_kwargs, electrodes=electrodes)
    n = len(space)
    out = np.zeros((tm.matrix.shape[1], 3 * n))
    failures: dict[int, str] = {}
    for j in range(n):
        try:
            loads = component_loads(mesh, space.positions[j], model, **rhs_kwargs)
            for a, lv in enumerate(loads):
                if model == "localsub":
                    cm = lv.meta["correction"]
                    if np.any(cm.chi_u_electrodes != 0):
                        raise ValueError("cutoff does not vanish at the electrodes")
                out[:, 3 * j + a] = lv.values @ tm.matrix[lv.indices]
        except Exception as exc:  # collected and reported together
            failures[j] = f"{type(exc).__name__}: {exc}"
    if failures:
        raise LeadFieldError(failures)
    if tm.reference == "average":
        # PCG leaves column sums at solver tolerance; make the reference exact
        out -= out.mean(axis=0)
    return LeadField(out, model, conductivity, space)


def column_norm_map(lf: LeadField | np.ndarray) -> np.ndarray:
    """Frobenius norm of every source's 3-column block."""
    mat = lf.matrix if isinstance(lf, LeadField) else np.asarray(lf)
    m, n3 = mat.shape
    return np.sqrt((mat.reshape(m, n3 // 3, 3) ** 2).sum(axis=(0, 2)))


def quantile_clip(values, q: float) -> np.ndarray:
    """Clip at the nearest-rank ``q``-quantile (the ``ceil(q n)``-th smallest value)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cannot clip an empty field")
    if not 0.0 < q <= 1.0:
        raise ValueError("q must lie in (0, 1]")
    rank = int(np.ceil(q * values.size))
    cap = np.sort(values, axis=None)[rank - 1]
    return np.minimum(values, cap)


# persistence ----------------------------------------------------------------------

LEAD_MAGIC = b"LEAD"
LEAD_VERSION = 1
_LEAD_HEADER = struct.Struct("<4sIQQ16s16s")
_CSV_FIELDS = ("index", "x", "y", "z", "depth_mm", "relheight_mm")


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".sources.csv")


def _tag(text: str) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > 16:
        raise ValueError(f"tag {text!r} longer than 16 bytes")
    return raw.ljust(16, b"\0")


def save_leadfield(lf: LeadField, path) -> Path:
    """Write the ``LEAD`` binary and its source-space CSV sidecar.

    Layout: magic ``LEAD``, u32 version, u64 electrodes, u64 sources,
    16-byte model tag, 16-byte conductivity tag (NUL padded), then the
    matrix as column-major little-endian float64.
    """
    path = Path(path)
    m, n3 = lf.matrix.shape
    with open(path, "wb") as fh:
        fh.write(_LEAD_HEADER.pack(LEAD_MAGIC, LEAD_VERSION, m, n3 // 3,
                                   _tag(lf.model), _tag(lf.conductivity)))
        fh.write(np.asarray(lf.matrix, dtype="<f8").tobytes(order="F"))
    sp = lf.space
    with open(sidecar_path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(_CSV_FIELDS)
        for j in range(len(sp)):
            x, y, z = sp.positions[j]
            w.writerow([j, repr(float(x)), repr(float(y)), repr(float(z)),
                        repr(float(sp.depth[j])), repr(float(sp.relheight[j]))])
    return path


def load_source_space(path) -> SourceSpace:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != _CSV_FIELDS:
        raise FormatError(f"{path}: unexpected source-space header")
    body = rows[1:]
    for k, r in enumerate(body):
        if len(r) != 6 or int(r[0]) != k:
            raise FormatError(f"{path}: malformed row {k + 1}")
    data = np.array([[float(v) for v in r[1:]] for r in body]).reshape(-1, 5)
    return SourceSpace(data[:, :3], data[:, 3], data[:, 4])


def load_leadfield(path) -> LeadField:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _LEAD_HEADER.size:
        raise FormatError("truncated LEAD header")
    magic, version, m, n, model, cond = _LEAD_HEADER.unpack_from(data)
    if magic != LEAD_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != LEAD_VERSION:
        raise FormatError(f"unsupported LEAD version {version}")
    body = data[_LEAD_HEADER.size:]
    if len(body) != 8 * m * 3 * n:
        raise FormatError(f"LEAD payload has {len(body)} bytes, expected {8 * m * 3 * n}")
    mat = np.frombuffer(body, dtype="<f8").reshape((m, 3 * n), order="F").astype(float)
    space = load_source_space(sidecar_path(path))
    if len(space) != n:
        raise FormatError(f"sidecar lists {len(space)} sources, binary has {n}")
    return LeadField(mat, model.rstrip(b"\0").decode("ascii"), cond.rstrip(b"\0").decode("ascii"), space)

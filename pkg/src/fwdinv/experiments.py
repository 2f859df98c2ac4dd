"""Desk-scale replays of the two source-model comparison experiments.

Experiment I: one superficial source under inverse crime, every solver on
every source model, amplitude maps and model-difference maps.

Experiment II: depth sweep of random sources; data from an anisotropic
brain, inversion with the isotropic lead field; depth-bias regression and
EMD per (source model, solver).
"""
from __future__ import annotations

import configparser
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import svg
from .fem import (ElectrodeSet, assemble_stiffness, cap_electrodes, compute_transfer_matrix,
                  save_transfer_matrix)
from .inverse import (SOLVERS, Measurement, Shal1rParams, SkfParams, SloretaOperator, dipole_scan,
                      select_lambda, shal1r, skf)
from .leadfield import LeadField, SourceSpace, build_leadfield, save_leadfield
from .mesh import (LayeredSphereSpec, Mesh, PointOutsideMeshError, SurfaceTriangulation,
                   build_layered_sphere_mesh, depth_from_surface, extract_interface_surface,
                   radial_anisotropy, save_mesh)
from .metrics import (WeightedPointSet, depth_bias_regression, emd_singleton, estimated_position,
                      localization_error, read_metrics_csv, reconstruction_weights, spearman,
                      write_metrics_csv)
from .sources import SOURCE_MODELS

log = logging.getLogger(__name__)

BRAIN, CSF, SKULL = 0, 1, 2


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in text.replace(",", " ").split() if v)


@dataclass
class ExperimentConfig:
    """Every knob of an experiment run; serialized as a sectioned INI file."""

    # [run]
    seed: int = 0
    threads: int = 1
    out: str = "runs"
    # [mesh]
    radii: tuple = (78.0, 80.0, 86.0, 92.0)
    conductivities: tuple = (0.33, 1.79, 0.01, 0.43)
    refinement: int = 2
    cells: int = 16
    anisotropy_ratio: float = 2.0  # tangential : radial, brain only
    # [electrodes]
    electrodes: int = 60
    cap_polar_deg: float = 100.0
    # [forward]
    source_models: tuple = ("whitney-pbo", "hdiv", "localsub")
    localsub_rings: int = 1
    pcg_tol: float = 1e-9
    # [inverse]
    solvers: tuple = ("sloreta", "shal1r")
    lambda_snr_db: float = 20.0
    shal1r_alpha: float = 0.1
    shal1r_eps: float = 1e-3
    shal1r_max_iter: int = 10
    shal1r_tol: float = 1e-7
    shal1r_penalty: str = "whitened"
    skf_q: float = 1.0
    skf_r_scale: float = 1.0
    skf_samples: int = 20
    # [data]
    snr_db: float | None = 20.0
    moment: str = "radial"  # radial | tangential
    # [sweep]
    bin_width_mm: float = 5.0
    sources_per_bin: int = 100
    height_max_mm: float = 60.0
    # [experiment1]
    grid_spacing_mm: float = 8.0
    target_electrode: int = 0
    max_depth_mm: float = 10.0
    difference_reference: str = "localsub"
    difference_tolerance: float = 1e-6
    # [metrics]
    emd_weighting: str = "amplitude"
    position_rule: str = "argmax"
    centroid_threshold: float = 0.5

    _SECTIONS = {
        "run": ("seed", "threads", "out"),
        "mesh": ("radii", "conductivities", "refinement", "cells", "anisotropy_ratio"),
        "electrodes": ("electrodes", "cap_polar_deg"),
        "forward": ("source_models", "localsub_rings", "pcg_tol"),
        "inverse": ("solvers", "lambda_snr_db", "shal1r_alpha", "shal1r_eps", "shal1r_max_iter",
                    "shal1r_tol", "shal1r_penalty", "skf_q", "skf_r_scale", "skf_samples"),
        "data": ("snr_db", "moment"),
        "sweep": ("bin_width_mm", "sources_per_bin", "height_max_mm"),
        "experiment1": ("grid_spacing_mm", "target_electrode", "max_depth_mm",
                        "difference_reference", "difference_tolerance"),
        "metrics": ("emd_weighting", "position_rule", "centroid_threshold"),
    }

    def __post_init__(self):
        for tag in self.source_models:
            if tag not in SOURCE_MODELS:
                raise ValueError(f"unknown source model {tag!r}")
        for tag in self.solvers:
            if tag not in SOLVERS:
                raise ValueError(f"unknown solver {tag!r}")
        if self.moment not in ("radial", "tangential"):
            raise ValueError("moment must be 'radial' or 'tangential'")

    # serialization --------------------------------------------------------------
    def _format(self, name: str) -> str:
        v = getattr(self, name)
        if isinstance(v, tuple):
            return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
        if v is None:
            return "none"
        if isinstance(v, float):
            return repr(v)
        return str(v).lower() if isinstance(v, bool) else str(v)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, names in self._SECTIONS.items():
            cp[section] = {n: self._format(n) for n in names}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.read_string(text)
        base = base or cls()
        values = asdict(base)
        types = {f.name: f.type for f in fields(cls)}
        known = {n for names in cls._SECTIONS.values() for n in names}
        for section in cp.sections():
            if section not in cls._SECTIONS:
                raise ValueError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if key not in known or key not in cls._SECTIONS[section]:
                    raise ValueError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse_value(key, raw, types[key], getattr(base, key))
        return cls(**values)

    @classmethod
    def load(cls, path, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return cls.from_ini(Path(path).read_text(), base)

    def digest(self) -> str:
        """Hash of every setting that can change results (not ``threads`` or ``out``)."""
        return hashlib.sha256(self.replace(threads=1, out="").to_ini().encode()).hexdigest()

    def replace(self, **changes) -> "ExperimentConfig":
        values = asdict(self)
        values.update(changes)
        return ExperimentConfig(**values)

    def mesh_spec(self) -> LayeredSphereSpec:
        return LayeredSphereSpec(radii=tuple(self.radii), conductivities=tuple(self.conductivities),
                                 refinement=self.refinement, cells=self.cells or None)


def _parse_value(key, raw: str, typ, current):
    raw = raw.strip()
    if isinstance(current, tuple):
        return _floats(raw) if current and isinstance(current[0], float) else _words(raw)
    if key == "snr_db":
        return None if raw.lower() in ("none", "inf", "noiseless") else float(raw)
    if key == "cells":
        return 0 if raw.lower() in ("none", "0") else int(raw)
    if isinstance(current, bool):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def experiment_one_defaults() -> ExperimentConfig:
    """Noiseless inverse-crime configuration with all four solvers."""
    return ExperimentConfig(solvers=("sloreta", "shal1r", "skf", "ds"), snr_db=None,
                            lambda_snr_db=30.0)


def experiment_two_defaults() -> ExperimentConfig:
    return ExperimentConfig()


@dataclass
class RunManifest:
    """Artifacts and summary of a run.

    Wall-clock timings live in a separate ``timings.json`` (listed among the
    artifacts) so ``manifest.json`` is identical across repeated runs.
    """

    experiment: str
    config_hash: str
    seed: int
    artifacts: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        (out_dir / "timings.json").write_text(json.dumps(self.timings, indent=2, sort_keys=True) + "\n")
        self.artifacts["timings"] = "timings.json"
        body = {k: v for k, v in asdict(self).items() if k != "timings"}
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "RunManifest":
        data = json.loads(Path(path).read_text())
        return cls(**data)

    def check(self, out_dir) -> None:
        missing = [p for p in self.artifacts.values() if not (Path(out_dir) / p).exists()]
        if missing:
            raise FileNotFoundError(f"manifest lists missing files: {missing}")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


class _Stopwatch:
    def __init__(self):
        self.stages: dict[str, float] = {}

    def __call__(self, name: str):
        watch = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                watch.stages[name] = watch.stages.get(name, 0.0) + time.perf_counter() - self.t0
                log.info("stage %s: %.1f s", name, watch.stages[name])

        return _Ctx()


# head model ---------------------------------------------------------------------------

@dataclass
class HeadModel:
    mesh: Mesh
    electrodes: ElectrodeSet
    inner_skull: SurfaceTriangulation

    def anisotropic(self, ratio: float) -> Mesh:
        return radial_anisotropy(self.mesh, BRAIN, ratio)


def build_head_model(config: ExperimentConfig) -> HeadModel:
    mesh = build_layered_sphere_mesh(config.mesh_spec())
    electrodes = cap_electrodes(mesh, config.electrodes, config.cap_polar_deg)
    inner_skull = extract_interface_surface(mesh, CSF, SKULL)
    return HeadModel(mesh, electrodes, inner_skull)


def generate_depth_sweep_sources(config: ExperimentConfig, mesh: Mesh, inner_skull: SurfaceTriangulation,
                                 electrodes: ElectrodeSet, seed: int) -> SourceSpace:
    """Uniform random sources in relative-height bins inside the brain.

    Relative height is measured from the lowest electrode z.  Each bin is
    filled by rejection sampling in its slab; points are kept when they lie
    in a brain element.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    z0 = float(electrodes.positions[:, 2].min())
    center = mesh.center
    r_brain = float(config.radii[0])
    n_bins = int(round(config.height_max_mm / config.bin_width_mm))
    out = []
    for b in range(n_bins):
        lo = z0 + b * config.bin_width_mm
        hi = lo + config.bin_width_mm
        if lo - center[2] >= r_brain or hi - center[2] <= -r_brain:
            raise ValueError(f"height bin {b} ({lo - z0:.1f}-{hi - z0:.1f} mm) does not intersect the brain")
        got: list[np.ndarray] = []
        for _ in range(1000):
            batch = 4 * config.sources_per_bin
            cand = np.column_stack([rng.uniform(-r_brain, r_brain, batch) + center[0],
                                    rng.uniform(-r_brain, r_brain, batch) + center[1],
                                    rng.uniform(lo, hi, batch)])
            cand = cand[np.linalg.norm(cand - center, axis=1) < r_brain]
            for p in cand:
                try:
                    e, _ = mesh.find_enclosing_element(p)
                except PointOutsideMeshError:
                    continue
                if mesh.labels[e] == BRAIN:
                    got.append(p)
                    if len(got) == config.sources_per_bin:
                        break
            if len(got) == config.sources_per_bin:
                break
        else:
            raise ValueError(f"height bin {b} has too little brain volume to sample")
        out.extend(got)
    return SourceSpace.from_positions(np.array(out), inner_skull, electrodes)


def brain_grid(mesh: Mesh, spacing: float, inner_skull: SurfaceTriangulation,
               electrodes: ElectrodeSet, radius: float) -> SourceSpace:
    """Regular grid of brain positions (multiples of ``spacing`` from the center)."""
    k = int(np.floor(radius / spacing))
    ax = np.arange(-k, k + 1) * spacing
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3) + mesh.center
    g = g[np.linalg.norm(g - mesh.center, axis=1) < radius]
    keep = []
    for p in g:
        try:
            e, _ = mesh.find_enclosing_element(p)
        except PointOutsideMeshError:
            continue
        if mesh.labels[e] == BRAIN:
            keep.append(p)
    return SourceSpace.from_positions(np.array(keep), inner_skull, electrodes)


def source_moment(position, center, kind: str = "radial") -> np.ndarray:
    r = np.asarray(position, dtype=float) - np.asarray(center, dtype=float)
    n = np.linalg.norm(r)
    radial = r / n if n > 0 else np.array([0.0, 0.0, 1.0])
    if kind == "radial":
        return radial
    helper = np.array([0.0, 0.0, 1.0]) if abs(radial[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    t = np.cross(radial, helper)
    return t / np.linalg.norm(t)


def synthesize_measurement(lf_forward: LeadField | np.ndarray, index: int, moment, snr_db: float | None,
                           seed, samples: int = 1) -> Measurement:
    """Clean block product plus average-referenced Gaussian noise at ``snr_db``.

    Noise is drawn i.i.d. per electrode and then average-referenced; its
    variance is inflated by ``m / (m - 1)`` so the expected referenced noise
    power matches ``signal power / 10^(snr/10)``.  With several samples the
    clean part is repeated (constant amplitude) and noise is drawn per sample.
    """
    mat = lf_forward.matrix if isinstance(lf_forward, LeadField) else np.asarray(lf_forward)
    n_src = mat.shape[1] // 3
    if not 0 <= index < n_src:
        raise IndexError(f"source index {index} out of range")
    clean = mat[:, 3 * index:3 * index + 3] @ np.asarray(moment, dtype=float)
    m = clean.size
    data = np.tile(clean, (samples, 1)) if samples > 1 else clean.copy()
    if snr_db is None:
        return Measurement(data, None)
    power = float(np.mean(clean ** 2))
    if power == 0.0:
        raise ValueError("zero clean signal cannot be given a finite SNR")
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(power / 10.0 ** (snr_db / 10.0) * m / (m - 1))
    noise = rng.normal(0.0, sigma, size=data.shape)
    noise -= noise.mean(axis=-1, keepdims=True)
    return Measurement(data + noise, float(snr_db))


# parallel map over sources --------------------------------------------------------------

_WORKER_STATE: dict = {}


def _pmap(func, items, threads: int):
    """Map preserving order; uses forked worker processes when ``threads > 1``."""
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [func(x) for x in items]
    ctx = get_context("fork")
    chunk = max(1, len(items) // (4 * threads))
    with ProcessPoolExecutor(max_workers=threads, mp_context=ctx) as pool:
        return list(pool.map(func, items, chunksize=chunk))


def _depth_of(position, space: SourceSpace, index: int | None, inner_skull) -> float:
    if index is not None:
        return float(space.depth[index])
    return float(depth_from_surface(position, inner_skull))


def _score(rec_amp, j: int, space: SourceSpace, config: ExperimentConfig, inner_skull):
    amp = np.asarray(rec_amp, dtype=float)
    if not np.any(amp > 0):
        raise ValueError("all-zero reconstruction")
    est = estimated_position(amp, space.positions, config.position_rule, config.centroid_threshold)
    idx = int(np.argmax(amp)) if config.position_rule == "argmax" else None
    est_depth = _depth_of(est, space, idx, inner_skull)
    w = reconstruction_weights(amp, config.emd_weighting)
    e = emd_singleton(space.positions[j], WeightedPointSet(space.positions, w))
    return est_depth, localization_error(space.positions[j], est), e


def _exp2_source(j: int):
    st = _WORKER_STATE
    config: ExperimentConfig = st["config"]
    space: SourceSpace = st["space"]
    q = source_moment(space.positions[j], st["center"], config.moment)
    seed = np.random.SeedSequence([config.seed, 2, j])
    meas = synthesize_measurement(st["forward"], j, q, config.snr_db, seed)
    rows = []
    errors = []
    for solver in config.solvers:
        try:
            if solver == "sloreta":
                rec = st["sloreta"](meas)
            elif solver == "shal1r":
                rec = shal1r(st["inverse"], meas, st["shal1r_params"], standardization=st["std"])
            else:
                raise ValueError(f"solver {solver!r} is not part of Experiment II")
            est_depth, err, e = _score(rec.final_amplitude(), j, space, config, st["inner_skull"])
            rows.append((solver, j, float(space.depth[j]), est_depth, err, e))
        except Exception as exc:  # per-source failures are reported, not fatal
            errors.append((solver, j, f"{type(exc).__name__}: {exc}"))
    return rows, errors


def run_experiment_two(config: ExperimentConfig, out_dir=None, head: HeadModel | None = None) -> RunManifest:
    """Depth sweep with anisotropic-forward / isotropic-inverse lead fields."""
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    clock = _Stopwatch()
    manifest = RunManifest("exp2", config.digest(), config.seed)
    (out / "config.ini").write_text(config.to_ini())
    manifest.artifacts["config"] = "config.ini"

    with clock("mesh"):
        head = head or build_head_model(config)
        aniso = head.anisotropic(config.anisotropy_ratio)
    with clock("sources"):
        space = generate_depth_sweep_sources(config, head.mesh, head.inner_skull, head.electrodes, config.seed)
    with clock("transfer"):
        t_iso = compute_transfer_matrix(assemble_stiffness(head.mesh), head.electrodes, config.pcg_tol)
        t_aniso = compute_transfer_matrix(assemble_stiffness(aniso), head.electrodes, config.pcg_tol)

    all_rows = []
    rhs_kwargs = {"rings": config.localsub_rings}
    for model in config.source_models:
        kw = rhs_kwargs if model == "localsub" else {}
        with clock(f"leadfield:{model}"):
            lf_fwd = build_leadfield(t_aniso, aniso, space, model, electrodes=head.electrodes,
                                     conductivity="anisotropic", **kw)
            lf_inv = build_leadfield(t_iso, head.mesh, space, model, electrodes=head.electrodes,
                                     conductivity="isotropic", **kw)
        if lf_fwd.conductivity == lf_inv.conductivity:
            raise AssertionError("forward and inverse lead fields must differ (no inverse crime)")
        for tag, lf in (("fwd", lf_fwd), ("inv", lf_inv)):
            name = f"leadfield_{model}_{tag}.lead"
            save_leadfield(lf, out / name)
            manifest.artifacts[f"leadfield:{model}:{tag}"] = name
            manifest.artifacts[f"sources:{model}:{tag}"] = name.replace(".lead", ".sources.csv")
        lam = select_lambda(lf_inv.matrix, config.lambda_snr_db)
        with clock(f"inverse:{model}"):
            op = SloretaOperator(lf_inv.matrix, lam)
            _WORKER_STATE.clear()
            _WORKER_STATE.update(
                config=config, space=space, center=head.mesh.center, forward=lf_fwd.matrix,
                inverse=lf_inv.matrix, sloreta=op, std=op.standardization(),
                inner_skull=head.inner_skull,
                shal1r_params=Shal1rParams(lambda_std=lam, alpha=config.shal1r_alpha, eps=config.shal1r_eps,
                                           max_iter=config.shal1r_max_iter, tol=config.shal1r_tol,
                                           penalty=config.shal1r_penalty))
            results = _pmap(_exp2_source, range(len(space)), config.threads)
        for rows, errors in results:
            all_rows.extend((solver, model, j, td, ed, le, em) for solver, j, td, ed, le, em in rows)
            manifest.failures.extend({"model": model, "solver": s, "source": j, "error": msg}
                                     for s, j, msg in errors)
        manifest.summary.setdefault("lambda", {})[model] = lam

    order = {s: k for k, s in enumerate(config.solvers)}
    morder = {m: k for k, m in enumerate(config.source_models)}
    all_rows.sort(key=lambda r: (morder[r[1]], order[r[0]], r[2]))
    write_metrics_csv(out / "metrics.csv", all_rows)
    manifest.artifacts["metrics"] = "metrics.csv"
    manifest.summary.update(summarize_metrics(all_rows))
    manifest.summary["n_sources"] = len(space)
    manifest.summary["n_bins"] = int(round(config.height_max_mm / config.bin_width_mm))
    manifest.summary["failed_rows"] = len(manifest.failures)
    manifest.summary["variants"] = {"shal1r": "emulated", "skf": "emulated"}
    with clock("figures"):
        manifest.artifacts.update(emit_figures(out / "metrics.csv", out))
    manifest.timings = clock.stages
    manifest.write(out)
    return manifest


def summarize_metrics(rows) -> dict:
    """Regression slope/intercept, median EMD and EMD-depth Spearman per (model, solver)."""
    groups: dict[tuple[str, str], list] = {}
    for r in rows:
        groups.setdefault((r[1], r[0]), []).append(r)
    out: dict = {"regression": {}}
    for (model, solver), rs in sorted(groups.items()):
        arr = np.array([[r[3], r[4], r[5], r[6]] for r in rs], dtype=float)
        key = f"{model}/{solver}"
        entry = {"n": len(rs), "median_emd_mm": float(np.median(arr[:, 3])),
                 "median_loc_err_mm": float(np.median(arr[:, 2])),
                 "spearman_emd_depth": spearman(arr[:, 0], arr[:, 3])}
        if len(rs) >= 3:
            rep = depth_bias_regression(arr[:, 0], arr[:, 1])
            entry.update(slope=rep.slope, intercept=rep.intercept, slope_stderr=rep.slope_stderr)
        out["regression"][key] = entry
    return out


def emit_figures(metrics_csv, out_dir) -> dict:
    """Depth-bias and EMD-vs-depth scatter SVGs for every (model, solver) in a metrics CSV."""
    rows = read_metrics_csv(metrics_csv)
    if not rows:
        raise ValueError(f"{metrics_csv}: no metric rows to plot")
    out_dir = Path(out_dir)
    groups: dict[tuple[str, str], list] = {}
    for r in rows:
        groups.setdefault((r["source_model"], r["solver"]), []).append(r)
    made = {}
    for (model, solver), rs in sorted(groups.items()):
        td = np.array([r["true_depth_mm"] for r in rs])
        ed = np.array([r["est_depth_mm"] for r in rs])
        em = np.array([r["emd_mm"] for r in rs])
        rep = depth_bias_regression(td, ed) if len(rs) >= 3 and np.ptp(td) > 0 else None
        name = f"depth_{model}_{solver}.svg"
        svg.write_svg(out_dir / name, svg.scatter_svg(
            td, ed, title=f"Depth bias: {model} / {solver}", xlabel="true depth (mm)",
            ylabel="estimated depth (mm)", identity=True, regression=rep))
        made[f"figure:depth:{model}:{solver}"] = name
        name = f"emd_{model}_{solver}.svg"
        svg.write_svg(out_dir / name, svg.scatter_svg(
            td, em, title=f"EMD vs depth: {model} / {solver}", xlabel="true depth (mm)",
            ylabel="EMD (mm)"))
        made[f"figure:emd:{model}:{solver}"] = name
    return made


# Experiment I ---------------------------------------------------------------------------

def superficial_source(space: SourceSpace, electrodes: ElectrodeSet, center, electrode: int,
                       spacing: float, max_depth: float) -> int:
    """Shallowest source within half a grid spacing of the electrode's radial line."""
    u = electrodes.positions[electrode] - center
    u = u / np.linalg.norm(u)
    rel = space.positions - center
    along = rel @ u
    off = np.linalg.norm(rel - along[:, None] * u, axis=1)
    cand = np.nonzero((along > 0) & (off <= 0.5 * spacing + 1e-9))[0]
    if cand.size == 0:
        raise ValueError("no source below the chosen electrode")
    best = cand[np.lexsort((cand, space.depth[cand]))[0]]
    if space.depth[best] > max_depth:
        raise ValueError(f"shallowest source under electrode {electrode} is {space.depth[best]:.1f} mm deep")
    return int(best)


def _run_solver_exp1(solver: str, lf: LeadField, meas: Measurement, lam: float, config: ExperimentConfig):
    if solver == "sloreta":
        return SloretaOperator(lf.matrix, lam)(meas, lf.model)
    if solver == "shal1r":
        return shal1r(lf.matrix, meas, Shal1rParams(lambda_std=lam, alpha=config.shal1r_alpha,
                                                    eps=config.shal1r_eps, max_iter=config.shal1r_max_iter,
                                                    tol=config.shal1r_tol,
                                                    penalty=config.shal1r_penalty),
                      source_model=lf.model)
    if solver == "ds":
        return dipole_scan(lf.matrix, meas, source_model=lf.model)
    if solver == "skf":
        series = Measurement(np.tile(meas.data, (config.skf_samples, 1)), meas.snr_db)
        return skf(lf.matrix, series, SkfParams(config.skf_q, config.skf_r_scale * lam, lam),
                   source_model=lf.model)
    raise ValueError(f"unknown solver {solver!r}")


def run_experiment_one(config: ExperimentConfig, out_dir=None, head: HeadModel | None = None) -> RunManifest:
    """Superficial source under inverse crime, all solvers x source models."""
    if len(config.source_models) < 2:
        raise ValueError("Experiment I compares at least two source models")
    out = Path(out_dir or config.out)
    out.mkdir(parents=True, exist_ok=True)
    clock = _Stopwatch()
    manifest = RunManifest("exp1", config.digest(), config.seed)
    (out / "config.ini").write_text(config.to_ini())
    manifest.artifacts["config"] = "config.ini"

    with clock("mesh"):
        head = head or build_head_model(config)
        aniso = head.anisotropic(config.anisotropy_ratio)
    with clock("sources"):
        space = brain_grid(aniso, config.grid_spacing_mm, head.inner_skull, head.electrodes,
                           float(config.radii[0]))
        target = superficial_source(space, head.electrodes, aniso.center, config.target_electrode,
                                    config.grid_spacing_mm, config.max_depth_mm)
    with clock("transfer"):
        tm = compute_transfer_matrix(assemble_stiffness(aniso), head.electrodes, config.pcg_tol)
    q = source_moment(space.positions[target], aniso.center, config.moment)
    maps: dict[tuple[str, str], np.ndarray] = {}
    cells = {}
    for model in config.source_models:
        kw = {"rings": config.localsub_rings} if model == "localsub" else {}
        try:
            with clock(f"leadfield:{model}"):
                lf = build_leadfield(tm, aniso, space, model, electrodes=head.electrodes,
                                     conductivity="anisotropic", **kw)
        except Exception as exc:
            for solver in config.solvers:
                cells[f"{model}/{solver}"] = {"status": "failed", "error": f"lead field: {exc}"}
                manifest.failures.append({"model": model, "solver": solver, "error": str(exc)})
            continue
        name = f"leadfield_{model}.lead"
        save_leadfield(lf, out / name)
        manifest.artifacts[f"leadfield:{model}"] = name
        manifest.artifacts[f"sources:{model}"] = name.replace(".lead", ".sources.csv")
        meas = synthesize_measurement(lf, target, q, config.snr_db,
                                      np.random.SeedSequence([config.seed, 1]))
        lam = select_lambda(lf.matrix, config.lambda_snr_db)
        for solver in config.solvers:
            key = f"{model}/{solver}"
            try:
                with clock(f"inverse:{model}:{solver}"):
                    rec = _run_solver_exp1(solver, lf, meas, lam, config)
                amp = rec.final_amplitude()
                top = float(amp.max())
                if not top > 0:
                    raise ValueError("all-zero reconstruction")
                maps[(model, solver)] = amp / top
                best = int(np.argmax(amp))
                cells[key] = {"status": "ok", "argmax": best,
                              "loc_err_mm": localization_error(space.positions[target], space.positions[best]),
                              "lambda": lam, "variant": rec.regularization.get("algorithm_variant", "")}
            except Exception as exc:
                cells[key] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                manifest.failures.append({"model": model, "solver": solver, "error": str(exc)})

    with clock("outputs"):
        _write_maps(out / "exp1_maps.csv", space, maps)
        manifest.artifacts["maps"] = "exp1_maps.csv"
        diffs = {}
        ref = config.difference_reference
        for model in config.source_models:
            if model == ref:
                continue
            for solver in config.solvers:
                if (model, solver) in maps and (ref, solver) in maps:
                    d = maps[(model, solver)] - maps[(ref, solver)]
                    diffs[(f"{model}-{ref}", solver)] = d
                    peak = max(np.abs(maps[(model, solver)]).max(), np.abs(maps[(ref, solver)]).max())
                    rel = float(np.abs(d).max() / peak)
                    manifest.summary.setdefault("difference_max_rel", {})[f"{solver}:{model}-{ref}"] = rel
        _write_maps(out / "exp1_differences.csv", space, diffs)
        manifest.artifacts["differences"] = "exp1_differences.csv"
        for (model, solver), amp in sorted(maps.items()):
            name = f"map_{model}_{solver}.svg"
            svg.write_svg(out / name, svg.surface_map_svg(space.positions, amp,
                                                          title=f"{solver} amplitude, {model}"))
            manifest.artifacts[f"figure:map:{model}:{solver}"] = name
        for (pair, solver), d in sorted(diffs.items()):
            name = f"diff_{pair}_{solver}.svg"
            svg.write_svg(out / name, svg.surface_map_svg(space.positions, d, signed=True,
                                                          title=f"{solver} difference, {pair}"))
            manifest.artifacts[f"figure:diff:{pair}:{solver}"] = name
    manifest.summary["cells"] = cells
    manifest.summary["target"] = {"index": target, "depth_mm": float(space.depth[target]),
                                  "position": space.positions[target]}
    manifest.summary["n_sources"] = len(space)
    manifest.summary["difference_tolerance"] = config.difference_tolerance
    manifest.timings = clock.stages
    manifest.write(out)
    return manifest


def _write_maps(path, space: SourceSpace, maps: dict) -> None:
    keys = sorted(maps)
    cols = [f"{a}:{b}" for a, b in keys]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["index", "x", "y", "z", "depth_mm"] + cols) + "\n")
        for j in range(len(space)):
            vals = [str(j)] + [repr(float(v)) for v in space.positions[j]] + [repr(float(space.depth[j]))]
            vals += [repr(float(maps[k][j])) for k in keys]
            fh.write(",".join(vals) + "\n")


def build_mesh_artifacts(config: ExperimentConfig, out_dir) -> dict:
    """Mesh file plus electrode list, for the ``mesh build`` command."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    head = build_head_model(config)
    save_mesh(head.mesh, out / "mesh.txt")
    with open(out / "electrodes.csv", "w") as fh:
        fh.write("index,vertex,x,y,z\n")
        for k, (v, p) in enumerate(zip(head.electrodes.vertices, head.electrodes.positions)):
            fh.write(f"{k},{int(v)},{p[0]!r},{p[1]!r},{p[2]!r}\n")
    return {"mesh": "mesh.txt", "electrodes": "electrodes.csv",
            "n_vertices": head.mesh.n_vertices, "n_elements": head.mesh.n_elements}


def build_leadfield_artifacts(config: ExperimentConfig, out_dir, model: str,
                              conductivity: str = "isotropic") -> dict:
    """Transfer matrix and depth-sweep lead field, for the ``leadfield build`` command."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    head = build_head_model(config)
    mesh = head.anisotropic(config.anisotropy_ratio) if conductivity == "anisotropic" else head.mesh
    space = generate_depth_sweep_sources(config, head.mesh, head.inner_skull, head.electrodes, config.seed)
    tm = compute_transfer_matrix(assemble_stiffness(mesh), head.electrodes, config.pcg_tol)
    save_transfer_matrix(tm, out / f"transfer_{conductivity}.tmat")
    kw = {"rings": config.localsub_rings} if model == "localsub" else {}
    lf = build_leadfield(tm, mesh, space, model, electrodes=head.electrodes, conductivity=conductivity, **kw)
    name = f"leadfield_{model}_{conductivity}.lead"
    save_leadfield(lf, out / name)
    return {"transfer": f"transfer_{conductivity}.tmat", "leadfield": name,
            "sources": name.replace(".lead", ".sources.csv")}


__all__ = [
    "ExperimentConfig", "RunManifest", "HeadModel", "build_head_model", "experiment_one_defaults",
    "experiment_two_defaults", "generate_depth_sweep_sources", "brain_grid", "synthesize_measurement",
    "source_moment", "run_experiment_one", "run_experiment_two", "emit_figures", "summarize_metrics",
    "superficial_source", "build_mesh_artifacts", "build_leadfield_artifacts",
]

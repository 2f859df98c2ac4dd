"""Batch command line: ``fwdinv <group> <action> [options]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .metrics import WeightedPointSet, emd
from .sources import SOURCE_MODELS


def _global_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="INI config file")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (u64)")
    p.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="fwdinv", parents=[common],
                                     description="FEM forward / inverse EEG workbench on sphere phantoms.")
    groups = parser.add_subparsers(dest="group", required=True)

    def group(name, help_text):
        g = groups.add_parser(name, help=help_text)
        return g.add_subparsers(dest="action", required=True)

    mesh = group("mesh", "head-model meshes")
    mesh.add_parser("build", parents=[common], help="build the layered sphere mesh and electrodes")

    lead = group("leadfield", "lead fields")
    p = lead.add_parser("build", parents=[common], help="transfer matrix plus depth-sweep lead field")
    p.add_argument("--model", choices=SOURCE_MODELS, required=True)
    p.add_argument("--conductivity", choices=("isotropic", "anisotropic"), default="isotropic")

    exp1 = group("exp1", "superficial source under inverse crime")
    exp1.add_parser("run", parents=[common], help="run the solver x source-model grid")
    exp2 = group("exp2", "depth sweep without inverse crime")
    exp2.add_parser("run", parents=[common], help="run the depth-bias sweep")

    met = group("metrics", "distributional metrics")
    p = met.add_parser("emd", parents=[common], help="EMD between two weighted point sets")
    p.add_argument("a", type=Path, help="CSV with columns x,y,z,weight")
    p.add_argument("b", type=Path, help="CSV with columns x,y,z,weight")

    p = groups.add_parser("plot", parents=[common], help="render scatter SVGs from a metrics CSV")
    p.add_argument("metrics", type=Path, help="metrics.csv written by 'exp2 run'")
    return parser


def _config(args, base: ex.ExperimentConfig) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config, base) if getattr(args, "config", None) else base
    changes = {}
    if hasattr(args, "seed"):
        if args.seed < 0 or args.seed >= 2 ** 64:
            raise SystemExit("--seed must be an unsigned 64-bit integer")
        changes["seed"] = args.seed
    if hasattr(args, "threads"):
        changes["threads"] = max(1, args.threads)
    if hasattr(args, "out"):
        changes["out"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _read_points(path: Path) -> WeightedPointSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise SystemExit(f"{path}: no points")
    pos = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in rows])
    w = np.array([float(r["weight"]) for r in rows])
    return WeightedPointSet(pos, w)


def _report(manifest: ex.RunManifest, out: Path) -> int:
    print(f"wrote {out / 'manifest.json'}")
    if manifest.failures:
        print(f"{len(manifest.failures)} cell(s) failed", file=sys.stderr)
        return 1
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.group == "metrics":
        value, _ = emd(_read_points(args.a), _read_points(args.b))
        print(repr(value))
        return 0
    if args.group == "plot":
        out = Path(getattr(args, "out", args.metrics.parent))
        out.mkdir(parents=True, exist_ok=True)
        made = ex.emit_figures(args.metrics, out)
        for name in sorted(made.values()):
            print(out / name)
        return 0

    if args.group == "exp1":
        cfg = _config(args, ex.experiment_one_defaults())
        out = Path(cfg.out)
        return _report(ex.run_experiment_one(cfg, out), out)
    cfg = _config(args, ex.experiment_two_defaults())
    out = Path(cfg.out)
    if args.group == "exp2":
        return _report(ex.run_experiment_two(cfg, out), out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    if args.group == "mesh":
        info = ex.build_mesh_artifacts(cfg, out)
    else:
        info = ex.build_leadfield_artifacts(cfg, out, args.model, args.conductivity)
    info["config"] = "config.ini"
    (out / "manifest.json").write_text(json.dumps(info, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'manifest.json'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""A reduced Experiment II: depth-bias regression and EMD on a coarse phantom.

Run with ``python demos/depth_bias_small.py [out_dir]``.  The full-size run is
``fwdinv exp2 run --out <dir>``; this one uses 8 core cells and 10 sources per
5 mm bin so it finishes in a few minutes.
"""
import sys
from pathlib import Path

from fwdinv.experiments import ExperimentConfig, run_experiment_two


def main(out="demo_exp2"):
    cfg = ExperimentConfig(cells=8, sources_per_bin=10, height_max_mm=30.0)
    manifest = run_experiment_two(cfg, Path(out))
    print(f"{manifest.summary['n_sources']} sources, {len(manifest.failures)} failed rows")
    print(f"{'model/solver':<22} {'slope':>6} {'median EMD (mm)':>16} {'rho(EMD, depth)':>16}")
    for key, r in sorted(manifest.summary["regression"].items()):
        print(f"{key:<22} {r['slope']:6.3f} {r['median_emd_mm']:16.2f} {r['spearman_emd_depth']:16.2f}")
    print(f"figures and metrics.csv written to {out}/")


if __name__ == "__main__":
    main(*sys.argv[1:2])

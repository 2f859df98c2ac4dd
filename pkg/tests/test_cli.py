import json
import subprocess
import sys

import numpy as np
import pytest

from fwdinv.cli import build_parser, main
from fwdinv.leadfield import load_leadfield

TINY = "[mesh]\ncells = 8\n[sweep]\nsources_per_bin = 2\nheight_max_mm = 5.0\n"


@pytest.fixture
def tiny_ini(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY)
    return p


def write_points(path, rows):
    path.write_text("x,y,z,weight\n" + "".join(",".join(map(str, r)) + "\n" for r in rows))
    return path


@pytest.mark.parametrize("argv", [["mesh", "build"], ["leadfield", "build", "--model", "pi"], ["exp1", "run"],
                                  ["exp2", "run"], ["metrics", "emd", "a", "b"], ["plot", "m.csv"]])
def test_subcommands_parse(argv):
    args = build_parser().parse_args(argv + ["--seed", "3", "--threads", "2", "--out", "o", "--config", "c"])
    assert args.seed == 3 and args.threads == 2


def test_missing_subcommand_exits():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])


def test_metrics_emd(tmp_path, capsys):
    a = write_points(tmp_path / "a.csv", [(0, 0, 0, 1.0)])
    b = write_points(tmp_path / "b.csv", [(3, 4, 0, 0.5), (0, 0, 0, 0.5)])
    assert main(["metrics", "emd", str(a), str(b)]) == 0
    assert float(capsys.readouterr().out) == pytest.approx(2.5)


def test_seed_range_checked(tiny_ini, tmp_path):
    with pytest.raises(SystemExit):
        main(["mesh", "build", "--config", str(tiny_ini), "--out", str(tmp_path), "--seed", str(2 ** 64)])


def test_mesh_and_leadfield_build(tiny_ini, tmp_path):
    out = tmp_path / "run"
    assert main(["mesh", "build", "--config", str(tiny_ini), "--out", str(out)]) == 0
    info = json.loads((out / "manifest.json").read_text())
    assert info["config"] == "config.ini" and (out / "config.ini").exists()
    assert main(["leadfield", "build", "--model", "hdiv", "--conductivity", "anisotropic",
                 "--config", str(tiny_ini), "--out", str(out)]) == 0
    files = sorted(out.glob("*.lead"))
    assert files
    lf = load_leadfield(files[0])
    assert lf.model == "hdiv" and lf.conductivity == "anisotropic"
    assert np.allclose(lf.matrix.sum(axis=0), 0.0, atol=1e-9 * np.abs(lf.matrix).max())


def test_exp2_then_plot(tiny_ini, tmp_path, capsys):
    out = tmp_path / "e2"
    code = main(["exp2", "run", "--config", str(tiny_ini), "--out", str(out), "--seed", "11"])
    man = json.loads((out / "manifest.json").read_text())
    assert code == (1 if man["failures"] else 0)
    assert man["seed"] == 11
    figs = tmp_path / "figs"
    assert main(["plot", str(out / "metrics.csv"), "--out", str(figs)]) == 0
    printed = capsys.readouterr().out.split()
    svgs = sorted(p.name for p in figs.glob("*.svg"))
    assert svgs and all(str(figs / s) in printed for s in svgs)
    for s in svgs:
        assert (figs / s).read_bytes() == (out / s).read_bytes()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "fwdinv.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("mesh", "leadfield", "exp1", "exp2", "metrics", "plot"):
        assert name in res.stdout

import json

import numpy as np
import pytest

from fwdinv.experiments import (ExperimentConfig, RunManifest, build_head_model, experiment_one_defaults,
                                generate_depth_sweep_sources, run_experiment_one, run_experiment_two,
                                source_moment, summarize_metrics, superficial_source, synthesize_measurement)
from fwdinv.leadfield import SourceSpace, load_leadfield
from fwdinv.metrics import depth_bias_regression, read_metrics_csv

SMALL = dict(cells=8, sources_per_bin=3, height_max_mm=10.0, grid_spacing_mm=8.0)


def artifact_bytes(out, manifest):
    # config.ini records the thread count, which is excluded from the digest
    names = sorted(set(manifest.artifacts.values()) - {"timings.json", "config.ini"}) + ["manifest.json"]
    return {n: (out / n).read_bytes() for n in names}


@pytest.fixture(scope="module")
def default_head():
    return build_head_model(ExperimentConfig())


@pytest.fixture(scope="module")
def exp2_small(tmp_path_factory):
    cfg = ExperimentConfig(**SMALL)
    out_a, out_b = tmp_path_factory.mktemp("e2a"), tmp_path_factory.mktemp("e2b")
    ma = run_experiment_two(cfg, out_a)
    mb = run_experiment_two(cfg.replace(threads=2), out_b)
    return cfg, (out_a, ma), (out_b, mb)


@pytest.fixture(scope="module")
def exp1_small(tmp_path_factory):
    cfg = experiment_one_defaults().replace(**SMALL)
    out_a, out_b = tmp_path_factory.mktemp("e1a"), tmp_path_factory.mktemp("e1b")
    return cfg, (out_a, run_experiment_one(cfg, out_a)), (out_b, run_experiment_one(cfg, out_b))


class TestConfig:
    def test_round_trip(self):
        cfg = ExperimentConfig(seed=7, snr_db=None, source_models=("pi", "hdiv"), radii=(70.0, 92.0),
                               conductivities=(0.33, 0.43), moment="tangential")
        back = ExperimentConfig.from_ini(cfg.to_ini())
        assert back == cfg
        assert back.to_ini() == cfg.to_ini()

    def test_partial_file_overrides_base(self):
        cfg = ExperimentConfig.from_ini("[data]\nsnr_db = 10\n[run]\nseed = 3\n")
        assert cfg.snr_db == 10.0 and cfg.seed == 3 and cfg.sources_per_bin == 100

    @pytest.mark.parametrize("text", ["[bogus]\na = 1\n", "[data]\nsnr = 3\n", "[mesh]\nseed = 3\n"])
    def test_unknown_entries_rejected(self, text):
        with pytest.raises(ValueError):
            ExperimentConfig.from_ini(text)

    def test_invalid_tags(self):
        with pytest.raises(ValueError):
            ExperimentConfig(source_models=("venant",))
        with pytest.raises(ValueError):
            ExperimentConfig(solvers=("beamformer",))

    def test_digest_ignores_threads_and_output(self):
        cfg = ExperimentConfig()
        assert cfg.digest() == cfg.replace(threads=8, out="elsewhere").digest()
        assert cfg.digest() != cfg.replace(seed=1).digest()

    def test_experiment_two_solver_set(self):
        assert set(ExperimentConfig().solvers) == {"sloreta", "shal1r"}
        assert set(experiment_one_defaults().solvers) == {"sloreta", "shal1r", "skf", "ds"}


class TestDepthSweep:
    def test_default_has_1200_sources(self, default_head):
        cfg = ExperimentConfig()
        h = default_head
        space = generate_depth_sweep_sources(cfg, h.mesh, h.inner_skull, h.electrodes, cfg.seed)
        assert len(space) == 1200
        counts = np.bincount(np.floor(space.relheight / 5.0).astype(int), minlength=12)
        assert counts.tolist() == [100] * 12
        assert np.all(h.mesh.labels[h.mesh.locate(space.positions)] == 0)
        again = generate_depth_sweep_sources(cfg, h.mesh, h.inner_skull, h.electrodes, cfg.seed)
        assert again.positions.tobytes() == space.positions.tobytes()
        assert np.all(space.depth >= 0)

    def test_bin_outside_brain(self, default_head):
        cfg = ExperimentConfig(height_max_mm=300.0)
        h = default_head
        with pytest.raises(ValueError, match="does not intersect"):
            generate_depth_sweep_sources(cfg, h.mesh, h.inner_skull, h.electrodes, 0)


class TestSynthesis:
    @pytest.fixture
    def lmat(self, rng):
        m = rng.normal(size=(32, 30))
        return m - m.mean(axis=0)

    def test_noiseless_exact(self, lmat):
        q = np.array([0.1, 0.5, -0.2])
        meas = synthesize_measurement(lmat, 4, q, None, 0)
        assert np.array_equal(meas.data, lmat[:, 12:15] @ q)

    def test_monte_carlo_snr(self, lmat):
        q = np.array([1.0, 0.0, 0.0])
        clean = lmat[:, :3] @ q
        ratios = []
        for s in range(10_000):
            meas = synthesize_measurement(lmat, 0, q, 0.0, np.random.SeedSequence([s]))
            ratios.append(np.mean((meas.data - clean) ** 2))
        assert np.mean(clean ** 2) / np.mean(ratios) == pytest.approx(1.0, rel=0.05)

    def test_seeds_change_noise_only(self, lmat):
        q = np.array([0.0, 1.0, 0.0])
        a = synthesize_measurement(lmat, 2, q, 20.0, 1)
        b = synthesize_measurement(lmat, 2, q, 20.0, 2)
        assert not np.array_equal(a.data, b.data)
        assert np.array_equal(synthesize_measurement(lmat, 2, q, 20.0, 1).data, a.data)
        assert np.allclose(a.data.sum(), 0.0, atol=1e-12 * np.abs(a.data).sum())

    def test_series(self, lmat):
        meas = synthesize_measurement(lmat, 1, [1.0, 0, 0], 10.0, 3, samples=5)
        assert meas.data.shape == (5, 32)
        assert not np.array_equal(meas.data[0], meas.data[1])

    def test_errors(self, lmat):
        with pytest.raises(ValueError):
            synthesize_measurement(np.zeros((4, 3)), 0, [1.0, 0, 0], 10.0, 0)
        with pytest.raises(IndexError):
            synthesize_measurement(lmat, 10, [1.0, 0, 0], None, 0)


def test_source_moment():
    assert np.allclose(source_moment([0, 0, 5.0], np.zeros(3)), [0, 0, 1])
    t = source_moment([3.0, 4.0, 0], np.zeros(3), "tangential")
    assert np.linalg.norm(t) == pytest.approx(1.0) and abs(t @ [3.0, 4.0, 0]) < 1e-12


def test_superficial_source_picks_shallowest():
    pos = np.array([[0, 0, 70.0], [0, 0, 75.0], [0, 3.0, 76.0], [10.0, 0, 77.0]])
    space = SourceSpace(pos, [8.0, 3.0, 2.0, 1.0], np.zeros(4))

    class El:
        positions = np.array([[0, 0, 92.0]])
    assert superficial_source(space, El, np.zeros(3), 0, 8.0, 10.0) == 2
    with pytest.raises(ValueError):
        superficial_source(space, El, np.zeros(3), 0, 8.0, 1.5)


class TestExperimentTwo:
    def test_rows_and_solvers(self, exp2_small):
        cfg, (out, man), _ = exp2_small
        rows = read_metrics_csv(out / "metrics.csv")
        n = man.summary["n_sources"]
        assert n == 6
        assert {r["solver"] for r in rows} == {"sloreta", "shal1r"}
        assert len(rows) == n * 2 * len(cfg.source_models) - len(man.failures)
        assert len({(r["solver"], r["source_model"], r["source_index"]) for r in rows}) == len(rows)

    def test_regression_recomputed_from_csv(self, exp2_small):
        _, (out, man), _ = exp2_small
        rows = read_metrics_csv(out / "metrics.csv")
        for key, entry in man.summary["regression"].items():
            model, solver = key.split("/")
            sel = [r for r in rows if r["source_model"] == model and r["solver"] == solver]
            rep = depth_bias_regression([r["true_depth_mm"] for r in sel], [r["est_depth_mm"] for r in sel])
            assert entry["slope"] == pytest.approx(rep.slope, rel=1e-12)
            assert entry["median_emd_mm"] == pytest.approx(np.median([r["emd_mm"] for r in sel]), rel=1e-12)

    def test_no_inverse_crime(self, exp2_small):
        cfg, (out, man), _ = exp2_small
        for model in cfg.source_models:
            fwd = load_leadfield(out / man.artifacts[f"leadfield:{model}:fwd"])
            inv = load_leadfield(out / man.artifacts[f"leadfield:{model}:inv"])
            assert (fwd.conductivity, inv.conductivity) == ("anisotropic", "isotropic")
            assert not np.array_equal(fwd.matrix, inv.matrix)

    def test_manifest_complete(self, exp2_small):
        _, (out, man), _ = exp2_small
        man.check(out)
        back = RunManifest.read(out / "manifest.json")
        assert back.config_hash == man.config_hash and back.seed == man.seed
        assert "timings" not in json.loads((out / "manifest.json").read_text())
        assert json.loads((out / "timings.json").read_text())
        assert any(n.endswith(".svg") for n in man.artifacts.values())

    def test_deterministic_across_thread_counts(self, exp2_small):
        _, (out_a, ma), (out_b, mb) = exp2_small
        assert artifact_bytes(out_a, ma) == artifact_bytes(out_b, mb)

    def test_summary_grouping(self):
        rows = [("sloreta", "hdiv", j, float(j), float(j) + 1, 1.0, float(10 - j)) for j in range(5)]
        s = summarize_metrics(rows)["regression"]["hdiv/sloreta"]
        assert s["slope"] == pytest.approx(1.0) and s["intercept"] == pytest.approx(1.0)
        assert s["spearman_emd_depth"] == pytest.approx(-1.0)


class TestExperimentOne:
    def test_grid_complete(self, exp1_small):
        cfg, (out, man), _ = exp1_small
        cells = man.summary["cells"]
        assert set(cells) == {f"{m}/{s}" for m in cfg.source_models for s in cfg.solvers}
        assert all(c["status"] == "ok" for c in cells.values()), cells
        assert man.summary["target"]["depth_mm"] <= cfg.max_depth_mm

    def test_inverse_crime_recovers_target(self, exp1_small):
        _, (out, man), _ = exp1_small
        target = man.summary["target"]["index"]
        for key, cell in man.summary["cells"].items():
            if key.endswith(("/ds", "/sloreta", "/shal1r")):
                assert cell["argmax"] == target, key

    def test_rerun_bit_identical(self, exp1_small):
        _, (out_a, ma), (out_b, mb) = exp1_small
        assert artifact_bytes(out_a, ma) == artifact_bytes(out_b, mb)

    def test_needs_two_models(self, tmp_path):
        with pytest.raises(ValueError):
            run_experiment_one(ExperimentConfig(source_models=("pi",)), tmp_path)

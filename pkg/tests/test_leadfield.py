import numpy as np
import pytest

from fwdinv.fem import FormatError, electrode_readout
from fwdinv.leadfield import (LEAD_VERSION, LeadField, LeadFieldError, SourceSpace, build_leadfield,
                              column_norm_map, load_leadfield, quantile_clip, save_leadfield, sidecar_path)
from fwdinv.mesh import outer_surface
from fwdinv.metrics import spearman
from fwdinv.sources import SOURCE_MODELS, Dipole, build_rhs

from oracles import direct_solve


def space_of(positions, mesh, el):
    return SourceSpace.from_positions(positions, outer_surface(mesh), el)


@pytest.fixture(scope="module")
def small_space(ball_setup):
    mesh, el, _, _ = ball_setup
    pts = np.array([[0, 0, 30.0], [20, -10, 15.0], [-25, 5, -10.0], [10, 30, 40.0], [-5, -35, 0.0]])
    return space_of(pts, mesh, el)


def test_pi_columns_match_direct_solve(ball_setup):
    mesh, el, a, tm = ball_setup
    sp1 = space_of([[12.0, -7.0, 25.0]], mesh, el)
    lf = build_leadfield(tm, mesh, sp1, "pi")
    assert lf.matrix.shape == (len(el), 3)
    for k in range(3):
        b = build_rhs(mesh, Dipole(sp1.positions[0], np.eye(3)[k]), "pi").dense(mesh.n_vertices)
        ref = electrode_readout(direct_solve(a, b), el)
        assert np.linalg.norm(lf.matrix[:, k] - ref) <= 10 * tm.tol * np.linalg.norm(ref)


@pytest.mark.parametrize("model", SOURCE_MODELS)
def test_columns_average_referenced(ball_setup, small_space, model):
    mesh, el, _, tm = ball_setup
    lf = build_leadfield(tm, mesh, small_space, model, electrodes=el)
    assert lf.matrix.shape == (len(el), 3 * len(small_space))
    sums = np.abs(lf.matrix.sum(axis=0))
    assert np.all(sums <= 1e-10 * np.abs(lf.matrix).sum(axis=0))
    assert np.allclose(lf.matrix - lf.matrix.mean(axis=0), lf.matrix, rtol=0, atol=1e-12 * np.abs(lf.matrix).max())


def test_column_matches_readout_of_rhs(ball_setup, small_space):
    mesh, el, _, tm = ball_setup
    lf = build_leadfield(tm, mesh, small_space, "whitney-pbo")
    q = np.array([0.2, -0.4, 0.9])
    lv = build_rhs(mesh, Dipole(small_space.positions[3], q), "whitney-pbo")
    v = lv.values @ tm.matrix[lv.indices]
    assert np.allclose(lf.block(3) @ q, v - v.mean(), atol=1e-12 * np.abs(v).max())


def test_permutation_permutes_blocks(ball_setup, small_space):
    mesh, el, _, tm = ball_setup
    lf = build_leadfield(tm, mesh, small_space, "hdiv")
    order = np.array([3, 0, 4, 1, 2])
    lp = build_leadfield(tm, mesh, small_space.subset(order), "hdiv")
    for new, old in enumerate(order):
        assert np.array_equal(lp.block(new), lf.block(old))


def test_failures_collected_with_indices(ball_setup, small_space):
    mesh, el, _, tm = ball_setup
    bad = SourceSpace(np.vstack([small_space.positions, [[0, 0, 200.0]], [[0, 200.0, 0]]]),
                      np.zeros(7), np.zeros(7))
    with pytest.raises(LeadFieldError) as info:
        build_leadfield(tm, mesh, bad, "pi")
    assert sorted(info.value.failures) == [5, 6]


def test_localsub_touching_electrode_fails(ball_setup):
    mesh, el, _, tm = ball_setup
    sp1 = SourceSpace(mesh.vertices[el.vertices[:1]] * 0.97, [1.0], [0.0])
    with pytest.raises(LeadFieldError):
        build_leadfield(tm, mesh, sp1, "localsub", electrodes=el)


def test_unknown_model(ball_setup, small_space):
    mesh, _, _, tm = ball_setup
    with pytest.raises(ValueError):
        build_leadfield(tm, mesh, small_space, "venant")


class TestColumnNorms:
    def test_zero_block_and_scaling(self, rng):
        mat = rng.normal(size=(8, 12))
        mat[:, 3:6] = 0.0
        n = column_norm_map(mat)
        assert n[1] == 0.0
        assert np.allclose(column_norm_map(-2.5 * mat), 2.5 * n)
        assert n[0] == pytest.approx(np.linalg.norm(mat[:, :3]))

    def test_decay_with_depth_along_ray(self, ball_setup):
        mesh, el, _, tm = ball_setup
        pts = np.outer(np.linspace(5.0, 80.0, 16), [0.0, 0.0, 1.0])
        sp_ = space_of(pts, mesh, el)
        norms = column_norm_map(build_leadfield(tm, mesh, sp_, "pi"))
        assert spearman(sp_.depth, norms) < -0.9


class TestQuantileClip:
    def test_identity_at_one(self, rng):
        f = rng.normal(size=50)
        assert np.array_equal(quantile_clip(f, 1.0), f)

    def test_nearest_rank(self):
        f = np.arange(1.0, 101.0)
        out = quantile_clip(f, 0.95)
        assert out.max() == 95.0
        assert np.array_equal(out[:95], f[:95])

    def test_idempotent(self, rng):
        f = rng.exponential(size=200)
        once = quantile_clip(f, 0.9)
        assert np.array_equal(quantile_clip(once, 0.9), once)

    @pytest.mark.parametrize("bad", [0.0, 1.5, -0.1])
    def test_invalid_q(self, bad):
        with pytest.raises(ValueError):
            quantile_clip([1.0, 2.0], bad)

    def test_empty(self):
        with pytest.raises(ValueError):
            quantile_clip([], 0.5)


class TestPersistence:
    @pytest.fixture
    def lf(self, rng):
        space = SourceSpace(rng.normal(size=(7, 3)) * 30, rng.uniform(0, 60, 7), rng.uniform(0, 90, 7))
        mat = rng.normal(size=(11, 21))
        return LeadField(mat - mat.mean(axis=0), "whitney-pbo", "anisotropic", space)

    def test_round_trip_bit_exact(self, lf, tmp_path):
        path = save_leadfield(lf, tmp_path / "L.lead")
        back = load_leadfield(path)
        assert back.matrix.tobytes() == lf.matrix.tobytes()
        assert (back.model, back.conductivity) == (lf.model, lf.conductivity)
        for name in ("positions", "depth", "relheight"):
            assert getattr(back.space, name).tobytes() == getattr(lf.space, name).tobytes()
        save_leadfield(back, tmp_path / "again.lead")
        assert (tmp_path / "again.lead").read_bytes() == path.read_bytes()

    def test_truncated(self, lf, tmp_path):
        path = save_leadfield(lf, tmp_path / "L.lead")
        data = path.read_bytes()
        for cut in (10, len(data) - 8):
            path.write_bytes(data[:cut])
            with pytest.raises(FormatError):
                load_leadfield(path)

    def test_version_bump(self, lf, tmp_path):
        path = save_leadfield(lf, tmp_path / "L.lead")
        data = bytearray(path.read_bytes())
        data[4:8] = (LEAD_VERSION + 1).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError, match="version"):
            load_leadfield(path)

    def test_bad_magic(self, lf, tmp_path):
        path = save_leadfield(lf, tmp_path / "L.lead")
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError, match="magic"):
            load_leadfield(path)

    def test_sidecar_count_mismatch(self, lf, tmp_path):
        path = save_leadfield(lf, tmp_path / "L.lead")
        side = sidecar_path(path)
        side.write_text("\n".join(side.read_text().splitlines()[:-1]) + "\n")
        with pytest.raises(FormatError):
            load_leadfield(path)

    def test_long_tag_rejected(self, lf, tmp_path):
        lf.model = "x" * 17
        with pytest.raises(ValueError):
            save_leadfield(lf, tmp_path / "L.lead")


def test_source_space_requires_matching_lengths():
    with pytest.raises(ValueError):
        SourceSpace(np.zeros((3, 3)), np.zeros(2), np.zeros(3))


def test_check_inside(layered):
    sp_ = SourceSpace([[0, 0, 10.0], [0, 0, 85.0]], [0, 0], [0, 0])
    with pytest.raises(ValueError, match=r"\[1\]"):
        sp_.check_inside(layered)
    sp_.subset([0]).check_inside(layered)


def test_model_agnostic_shape(ball_setup, small_space):
    mesh, el, _, tm = ball_setup
    shapes = {build_leadfield(tm, mesh, small_space, m, electrodes=el).matrix.shape for m in SOURCE_MODELS}
    assert len(shapes) == 1

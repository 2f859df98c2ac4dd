import numpy as np
import pytest

from fwdinv.fem import cap_electrode_positions
from fwdinv.sphere import (homogeneous_degree_gain, infinite_medium_potential_iso, layered_sphere_potential,
                           mag, rdm)
from fwdinv.sphere import _degree_gain

from oracles import homogeneous_sphere_dipole, monopole_pair_dipole, random_dipoles

R = 92.0
SIG = 0.33


@pytest.fixture
def sensors():
    return cap_electrode_positions(50, R, 170.0)


def test_series_matches_brute_force_sum(rng, sensors):
    pos, mom = random_dipoles(rng, 10, R)
    for p, q in zip(pos, mom):
        v = layered_sphere_potential(sensors, p, q, [R], [SIG])
        ref = homogeneous_sphere_dipole(sensors, p, q, R, SIG)
        assert np.allclose(v, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_series_matches_closed_form_monopole_pair(rng, sensors):
    pos, mom = random_dipoles(rng, 5, R, max_ecc=0.7)
    for p, q in zip(pos, mom):
        v = layered_sphere_potential(sensors, p, q, [R], [SIG])
        ref = monopole_pair_dipole(sensors, p, q, R, SIG)
        # finite-difference truncation is O(h^2)
        assert rdm(v, ref) < 1e-6
        assert mag(v, ref) == pytest.approx(1.0, abs=1e-6)


def test_equal_layers_reduce_to_homogeneous(rng, sensors):
    pos, mom = random_dipoles(rng, 3, 78.0, max_ecc=0.9)
    for p, q in zip(pos, mom):
        layered = layered_sphere_potential(sensors, p, q, [78.0, 80.0, 86.0, 92.0], [SIG] * 4)
        ref = homogeneous_sphere_dipole(sensors, p, q, R, SIG)
        assert np.allclose(layered, ref, rtol=1e-9, atol=1e-12 * np.abs(ref).max())


def test_single_layer_gain_closed_form():
    for n in (1, 2, 5, 30):
        assert _degree_gain(n, np.array([R]), np.array([SIG])) == pytest.approx(homogeneous_degree_gain(n))


def test_linear_in_moment(rng, sensors):
    p = np.array([10.0, -20.0, 30.0])
    q1, q2 = rng.normal(size=3), rng.normal(size=3)
    args = ([78.0, 80.0, 86.0, 92.0], [0.33, 1.79, 0.01, 0.43])
    v = layered_sphere_potential(sensors, p, 2 * q1 - q2, *args)
    assert np.allclose(v, 2 * layered_sphere_potential(sensors, p, q1, *args)
                       - layered_sphere_potential(sensors, p, q2, *args), atol=1e-12 * np.abs(v).max())


def test_rotation_invariance(sensors):
    p = np.array([0.0, 0.0, 50.0])
    q = np.array([1.0, 0.0, 0.0])
    c, s = np.cos(0.7), np.sin(0.7)
    rot = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
    v = layered_sphere_potential(sensors, p, q, [R], [SIG])
    v_rot = layered_sphere_potential(sensors @ rot.T, rot @ p, rot @ q, [R], [SIG])
    assert np.allclose(v, v_rot, atol=1e-12 * np.abs(v).max())


def test_skull_attenuates(sensors):
    p, q = np.array([0.0, 0.0, 60.0]), np.array([0.0, 0.0, 1.0])
    homo = layered_sphere_potential(sensors, p, q, [78.0, 80.0, 86.0, 92.0], [0.33] * 4)
    skull = layered_sphere_potential(sensors, p, q, [78.0, 80.0, 86.0, 92.0], [0.33, 1.79, 0.01, 0.43])
    assert np.abs(skull).max() < np.abs(homo).max()


def test_dipole_outside_rejected(sensors):
    with pytest.raises(ValueError):
        layered_sphere_potential(sensors, [0, 0, 80.0], [0, 0, 1.0], [78.0, 92.0], [0.33, 0.43])


def test_infinite_medium_iso():
    x = np.array([[10.0, 0, 0]])
    v = infinite_medium_potential_iso(x, np.zeros(3), np.array([1.0, 0, 0]), 0.5)
    assert v[0] == pytest.approx(1.0 / (4 * np.pi * 0.5 * 100.0))


def test_rdm_mag_identities():
    u = np.array([1.0, -2.0, 3.0])
    assert rdm(u, 5 * u) == pytest.approx(0.0, abs=1e-15)
    assert mag(5 * u, u) == pytest.approx(5.0)
    assert rdm(u, -u) == pytest.approx(2.0)

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepbnd import micro
from deepbnd.micro import (LatticeConfig, Microstructure, SampleSet, is_stratified,
                           isotropic_voigt, lhs_sample, permute_params, radii_from_theta,
                           stiffness_at, theta_from_radii)

LAM, G = 0.576923, 0.384615


def test_lhs_single_row():
    s = lhs_sample(1, 3, 42)
    assert s.shape == (1, 3)
    assert np.all(np.abs(s.theta) <= 1)


def test_lhs_four_strata():
    v = np.sort(lhs_sample(4, 1, 7).theta[:, 0])
    edges = [-1, -0.5, 0, 0.5, 1]
    for k in range(4):
        assert edges[k] <= v[k] <= edges[k + 1]


def test_lhs_deterministic_and_seed_dependent():
    a, b, c = lhs_sample(50, 4, 3), lhs_sample(50, 4, 3), lhs_sample(50, 4, 4)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, c.theta)


def test_uniform_sample_is_not_stratified_in_general():
    assert not is_stratified(micro.uniform_sample(200, 3, 0).theta)


def test_is_stratified_rejects_collisions():
    theta = lhs_sample(10, 2, 0).theta.copy()
    theta[1, 0] = theta[0, 0]
    assert not is_stratified(theta)
    assert not is_stratified(np.array([[1.5]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 300), st.integers(1, 12), st.integers(0, 2 ** 31))
def test_lhs_stratified_property(n, d, seed):
    assert is_stratified(lhs_sample(n, d, seed).theta)


def test_radius_map_examples():
    rmin, rmax = 1 / 60, 1 / 15
    np.testing.assert_allclose(radii_from_theta([1.0], rmin, rmax), [1 / 15], rtol=1e-15)
    np.testing.assert_allclose(radii_from_theta([-1.0], rmin, rmax), [rmin], rtol=1e-15)
    np.testing.assert_allclose(radii_from_theta([0.0], rmin, rmax), [1 / 30], rtol=1e-14)


def test_radius_map_rejects_out_of_range():
    with pytest.raises(ValueError):
        radii_from_theta([1.01], 0.1, 0.2)
    with pytest.raises(ValueError):
        radii_from_theta([0.0], 0.2, 0.1)


@given(st.lists(st.floats(-1, 1), min_size=2, max_size=20))
def test_radius_map_monotone_and_in_range(theta):
    theta = np.sort(np.array(theta))
    r = radii_from_theta(theta, 0.025, 0.1)
    assert np.all(np.diff(r) >= 0)
    assert r.min() >= 0.025 and r.max() <= 0.1
    np.testing.assert_allclose(theta_from_radii(r, 0.025, 0.1), theta, atol=1e-12)


def test_lattice_defaults():
    c = LatticeConfig()
    assert c.n_balls == 16
    assert c.r_max == pytest.approx(0.1)
    assert c.r_min == pytest.approx(0.025)
    cen = c.centres()
    assert cen.shape == (16, 2)
    np.testing.assert_allclose(cen.mean(axis=0), 0.0, atol=1e-15)
    np.testing.assert_allclose(cen[0], [-0.375, -0.375])
    np.testing.assert_allclose(cen[1], [-0.125, -0.375])   # rows run along +y


def test_lattice_rejects_overlap():
    with pytest.raises(ValueError):
        LatticeConfig(n_side=2, r_max=0.3)


def test_stiffness_at_examples():
    m = Microstructure.from_theta(LatticeConfig(), np.zeros(16))
    C1 = np.array([[LAM + 2 * G, LAM, 0], [LAM, LAM + 2 * G, 0], [0, 0, G]])
    np.testing.assert_allclose(stiffness_at(m, (-0.5, -0.5)), C1, rtol=1e-15)
    np.testing.assert_allclose(stiffness_at(m, m.centres[5]), 10 * C1, rtol=1e-15)
    np.testing.assert_allclose(isotropic_voigt(LAM, G), C1)
    h = Microstructure.from_theta(LatticeConfig(gamma=1.0), np.zeros(16))
    pts = np.random.default_rng(0).uniform(-0.5, 0.5, (200, 2))
    assert np.all(h.chi(pts) == 1.0)


def test_chi_matches_brute_force():
    lat = LatticeConfig()
    m = Microstructure.from_theta(lat, lhs_sample(1, 16, 3).theta[0])
    pts = np.random.default_rng(1).uniform(-0.5, 0.5, (5000, 2))
    d = np.linalg.norm(pts[:, None, :] - m.centres[None], axis=2)
    inside = np.any(d < m.radii[None], axis=1)
    np.testing.assert_array_equal(m.chi(pts), np.where(inside, 10.0, 1.0))


def test_permute_example_and_identity():
    p = np.array([1, 2, 3, 4])
    np.testing.assert_array_equal(permute_params(p, 1), [2, 4, 1, 3])
    np.testing.assert_array_equal(permute_params(p, 0), p)
    with pytest.raises(ValueError):
        permute_params(np.arange(5), 1)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_permute_four_turns_identity(n):
    p = np.arange(n * n)
    q = p
    for _ in range(4):
        q = permute_params(q, 1)
    np.testing.assert_array_equal(q, p)
    assert sorted(permute_params(p, 1)) == list(p)
    np.testing.assert_array_equal(permute_params(permute_params(p, 1), -1), p)


@pytest.mark.parametrize("n", [2, 3, 4])
def test_permute_describes_clockwise_turn(n):
    """The permuted pattern turned anticlockwise reproduces the original."""
    lat = LatticeConfig(n_side=n)
    radii = np.linspace(lat.r_min, lat.r_max, n * n)
    m = Microstructure(lat, radii)
    mp = Microstructure(lat, permute_params(radii, 1))
    pts = np.random.default_rng(2).uniform(-0.5, 0.5, (4000, 2))
    rot = np.column_stack([-pts[:, 1], pts[:, 0]])          # Q y
    # chi_p(Q^T x) == chi(x)  <=>  chi_p(y) == chi(Q y)
    np.testing.assert_array_equal(mp.chi(pts), m.chi(rot))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sampled_microstructures_are_disjoint(seed):
    lat = LatticeConfig()
    for th in lhs_sample(8, lat.n_balls, seed).theta:
        m = Microstructure.from_theta(lat, th)
        d = np.linalg.norm(m.centres[:, None] - m.centres[None], axis=2)
        s = m.radii[:, None] + m.radii[None]
        off = ~np.eye(lat.n_balls, dtype=bool)
        assert np.all(d[off] > s[off])
        # balls stay inside the cell
        assert np.all(np.abs(m.centres).max(axis=1) + m.radii <= 0.5)


def test_microstructure_serialisation(tmp_path):
    m = Microstructure.from_theta(LatticeConfig(), lhs_sample(1, 16, 9).theta[0])
    m.save(tmp_path / "m.json")
    m2 = Microstructure.load(tmp_path / "m.json")
    np.testing.assert_array_equal(m.radii, m2.radii)
    assert m2.config == m.config


def test_sample_set_roundtrip(tmp_path):
    s = lhs_sample(5, 3, 11)
    s.save(tmp_path / "s")
    t = SampleSet.load(tmp_path / "s")
    np.testing.assert_array_equal(s.theta, t.theta)
    assert t.seed == 11
    (tmp_path / "s.bin").write_bytes((tmp_path / "s.bin").read_bytes()[:-8])
    with pytest.raises(ValueError):
        SampleSet.load(tmp_path / "s")


def test_central_block():
    lat = LatticeConfig()
    radii = np.linspace(lat.r_min, lat.r_max, 16)
    c = Microstructure(lat, radii).central_block(2)
    np.testing.assert_array_equal(c.radii, radii[[5, 6, 9, 10]])
    assert c.config.length == pytest.approx(0.5)
    assert c.config.r_max == lat.r_max


def test_radius_out_of_range_rejected():
    with pytest.raises(ValueError):
        Microstructure(LatticeConfig(), np.full(16, 0.2))

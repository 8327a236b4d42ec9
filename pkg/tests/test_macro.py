import numpy as np
import pytest

from deepbnd import fem, macro
from deepbnd.corrector import CellGeometry
from deepbnd.macro import (BarMicrostructure, MacroProblem, MacroSolution, PointLocator,
                           TangentProvider)
from deepbnd.micro import LatticeConfig, Microstructure, isotropic_voigt, lhs_sample

LAT = LatticeConfig()
C_HOM = macro.uniform_tangent(LAT)


def test_von_mises_examples():
    np.testing.assert_allclose(macro.von_mises([[2.0, 0.0, 0.0], [-3.0, 0.0, 0.0]]), [2.0, 3.0])
    assert macro.von_mises([0.0, 0.0, 1.5])[0] == pytest.approx(np.sqrt(3) * 1.5)
    assert macro.von_mises([1.0, 1.0, 0.0])[0] == pytest.approx(1.0)


def test_problem_validation():
    mesh = fem.build_mesh((2, 2), 1)
    with pytest.raises(ValueError):
        MacroProblem(mesh, {}, {"right": (1.0, 0.0)})
    with pytest.raises(ValueError):
        MacroProblem(mesh, {"left": (0, 0)}, {"left": (1.0, 0.0)})
    with pytest.raises(ValueError):
        MacroProblem(mesh, {"west": (0, 0)})


def test_patch_uniaxial_tension():
    """Zero Poisson ratio: a clamped edge is compatible with uniform tension."""
    G, t = 0.4, 0.03
    C = isotropic_voigt(0.0, G)
    prob = MacroProblem(fem.build_mesh((6, 3), 1, (0.0, 2.0, 0.0, 1.0)), {"left": (0.0, 0.0)},
                        {"right": (t, 0.0)})
    sol = macro.solve_macro(prob, C)
    np.testing.assert_allclose(sol.stress, np.tile([t, 0.0, 0.0], (sol.stress.shape[0], 1)),
                               atol=1e-10)
    x = prob.mesh.nodes[:, 0]
    u = sol.u.reshape(-1, 2)
    np.testing.assert_allclose(u[:, 0], t / (2 * G) * x, atol=1e-10)
    np.testing.assert_allclose(u[:, 1], 0.0, atol=1e-10)


def test_cook_mesh_and_zero_load():
    prob = macro.cook_problem((5, 5), traction=(0.0, 0.0))
    areas = prob.mesh.jacobians[1].sum() / 2
    assert areas == pytest.approx(0.5 * 48 * (44 + 16), rel=1e-12)
    assert np.abs(macro.solve_macro(prob, C_HOM).u).max() == 0.0
    assert np.abs(macro.solve_macro(macro.cook_problem((5, 5)), C_HOM).u).max() > 0


def test_zero_load_zero_solution():
    sol = macro.solve_macro(macro.bar_problem((8, 2), traction=(0.0, 0.0)), C_HOM)
    assert np.all(sol.u == 0) and np.all(sol.stress == 0)


def test_load_linearity():
    a = macro.solve_macro(macro.bar_problem((8, 2), traction=(0.0, -0.2)), C_HOM)
    b = macro.solve_macro(macro.bar_problem((8, 2), traction=(0.0, -0.6)), C_HOM)
    np.testing.assert_allclose(b.u, 3 * a.u, rtol=1e-12, atol=1e-13 * np.abs(b.u).max())


def test_cantilever_self_convergence():
    tips = []
    for k in (1, 2, 4):
        sol = macro.solve_macro(macro.bar_problem((16 * k, 4 * k)), C_HOM)
        tips.append(sol.displacement_at([macro.BAR_PROBES["A"]])[0, 1])
    assert tips[0] < 0 and abs(tips[2]) > abs(tips[1]) > abs(tips[0])
    assert abs(tips[2] - tips[1]) < 0.02 * abs(tips[2])


def test_tangent_checks():
    prob = macro.bar_problem((4, 1))
    with pytest.raises(ValueError):
        macro.solve_macro(prob, -C_HOM)
    with pytest.raises(ValueError):
        macro.solve_macro(prob, np.broadcast_to(C_HOM, (3, 3, 3)))
    n = prob.mesh.cells.shape[0]
    C = np.broadcast_to(C_HOM, (n, 3, 3)).copy()
    C[2] = np.diag([1.0, -1.0, 1.0])
    with pytest.raises(ValueError, match="tangent 2"):
        macro.solve_macro(prob, C)


def test_point_locator():
    prob = macro.cook_problem((4, 4))
    loc = PointLocator(prob.mesh)
    g = np.random.default_rng(0)
    cells = g.integers(0, prob.mesh.cells.shape[0], 50)
    lam = g.dirichlet(np.ones(3), 50)
    pts = np.einsum("pk,pkd->pd", lam, prob.mesh.nodes[prob.mesh.cells[cells, :3]])
    found, bary = loc.locate(pts)
    x = np.einsum("pk,pkd->pd", bary, prob.mesh.nodes[prob.mesh.cells[found, :3]])
    np.testing.assert_allclose(x, pts, atol=1e-12)
    assert bary.min() >= -1e-8
    for p in macro.COOK_PROBES.values():
        loc.locate([p])
    with pytest.raises(ValueError):
        loc.locate([[100.0, 0.0]])


def test_displacement_at_nodes():
    sol = macro.solve_macro(macro.bar_problem((8, 2)), C_HOM)
    np.testing.assert_allclose(sol.displacement_at(sol.mesh.nodes).ravel(), sol.u, atol=1e-14)


def test_error_report_examples():
    ref = macro.solve_macro(macro.bar_problem((8, 2)), C_HOM)
    rows = macro.error_report(ref, {"same": ref}, macro.BAR_PROBES)
    assert len(rows) == 1 + 2 * len(macro.BAR_PROBES)
    assert all(v == 0.0 for _, _, v in rows)
    scaled = MacroSolution(ref.mesh, 1.01 * ref.u, 1.01 * ref.strain, 1.01 * ref.stress)
    for case, metric, v in macro.error_report(ref, {"x": scaled}, macro.BAR_PROBES):
        assert case == "x"
        assert v == pytest.approx(0.01, rel=1e-8), metric
    csv = macro.rows_to_csv(rows)
    assert csv.splitlines()[0] == "case,metric,value"
    assert len(csv.splitlines()) == len(rows) + 1


def test_l2_error_on_different_meshes():
    fine = macro.solve_macro(macro.bar_problem((32, 8)), C_HOM)
    coarse = macro.solve_macro(macro.bar_problem((16, 4)), C_HOM)
    e = macro.l2_error(fine, coarse)
    assert 0 < e < 0.05


# --------------------------------------------------------------------------
# FE2 and DNS


GEOM = CellGeometry(divisions=4)


def taylor_by_hand(m):
    # window average, the same domain the other providers homogenise over
    mesh = GEOM.reduced_mesh
    pts = mesh.quadrature_points
    d = np.linalg.norm(pts[..., None, :] - m.centres, axis=-1)
    chi = np.where(np.any(d < m.radii, axis=-1), m.config.gamma, 1.0)
    avg = np.sum(chi * mesh.ref.weights * mesh.jacobians[1][:, None]) / mesh.area
    return avg * isotropic_voigt(*m.config.lame)


def test_taylor_fe2_matches_cellwise_average():
    prob = macro.bar_problem((4, 1))
    n = prob.mesh.cells.shape[0]
    pool = macro.random_draw_pool(LAT, n, seed=3)
    assign = macro.random_draw_assignment(pool, n, seed=4)
    sol = macro.fe2(prob, assign, TangentProvider("taylor", GEOM))
    ref = macro.solve_macro(prob, np.array([taylor_by_hand(m) for m in assign]))
    np.testing.assert_allclose(sol.u, ref.u, rtol=1e-12, atol=1e-13 * np.abs(ref.u).max())
    assert sol.meta["provider"] == "taylor"


def test_fe2_reuses_repeated_microstructures():
    calls = []

    def provider(m):
        calls.append(1)
        return C_HOM * (1 + m.radii.sum())

    prob = macro.bar_problem((2, 1))
    pool = macro.random_draw_pool(LAT, 2, seed=5)
    sol = macro.fe2(prob, [pool[0], pool[1]] * 4, provider)
    assert len(calls) == 2
    assert sol.meta["provider"] == "custom"
    with pytest.raises(ValueError):
        macro.fe2(prob, pool, provider)


def test_linear_stiffer_than_minimal():
    prob = macro.bar_problem((4, 1))
    n = prob.mesh.cells.shape[0]
    assign = macro.random_draw_pool(LAT, n, seed=6)
    f = macro.traction_load(prob.mesh, "right", macro.BAR_TRACTION)
    work = {bc: f @ macro.fe2(prob, assign, TangentProvider(bc, GEOM)).u
            for bc in ("taylor", "linear", "periodic", "minimal")}
    assert 0 < work["taylor"] <= work["linear"] <= work["periodic"] <= work["minimal"]


def test_homogeneous_providers_coincide():
    lat = LatticeConfig(gamma=1.0)
    m = Microstructure.from_theta(lat, lhs_sample(1, lat.n_balls, 7).theta[0])
    for kind in ("taylor", "linear", "periodic", "minimal", "hf"):
        np.testing.assert_allclose(TangentProvider(kind, GEOM)(m), C_HOM, atol=1e-9)


def test_provider_validation():
    with pytest.raises(ValueError):
        TangentProvider("voigt", GEOM)
    with pytest.raises(ValueError):
        TangentProvider("deepbnd", GEOM)


def test_random_draw_without_repetition():
    pool = macro.random_draw_pool(LAT, 10, seed=8)
    a = macro.random_draw_assignment(pool, 10, seed=9)
    assert len({id(m) for m in a}) == 10
    b = macro.random_draw_assignment(pool, 10, seed=9)
    assert [id(m) for m in a] == [id(m) for m in b]
    with pytest.raises(ValueError):
        macro.random_draw_assignment(pool, 11, seed=9)


def test_dns_homogeneous_equals_macro_solve():
    bar = BarMicrostructure.sample(4, 1, seed=0, gamma=1.0)
    d = macro.dns(bar, divisions_per_block=4)
    ref = macro.solve_macro(macro.bar_problem((16, 4)), C_HOM)
    np.testing.assert_allclose(d.u, ref.u, atol=1e-8 * np.abs(ref.u).max())
    np.testing.assert_allclose(d.stress, ref.stress, atol=1e-8 * np.abs(ref.stress).max())


def test_dns_memory_guard():
    bar = BarMicrostructure.sample(4, 1, seed=0)
    with pytest.raises(MemoryError):
        macro.dns(bar, divisions_per_block=10, max_dofs=1000)


def test_dns_inclusions_stiffen():
    soft = macro.dns(BarMicrostructure.sample(4, 1, seed=1, gamma=1.0), 4)
    stiff = macro.dns(BarMicrostructure.sample(4, 1, seed=1, gamma=10.0), 4)
    tip = [s.displacement_at([macro.BAR_PROBES["A"]])[0, 1] for s in (soft, stiff)]
    assert abs(tip[1]) < abs(tip[0])


def test_bar_chi_matches_brute_force():
    bar = BarMicrostructure.sample(6, 2, seed=2)
    g = np.random.default_rng(3)
    pts = g.uniform([0, 0], [3.0, 1.0], (500, 2))
    d = np.linalg.norm(pts[:, None] - bar.centres, axis=-1)
    ref = np.where(np.any(d < bar.radii, axis=1), 10.0, 1.0)
    np.testing.assert_array_equal(bar.chi(pts), ref)


def test_sliding_window_nearest_centre():
    bar = BarMicrostructure.sample(8, 4, seed=4)
    H = bar.block
    mesh = fem.build_mesh((10, 5), 1, (0.0, bar.nx * H, 0.0, bar.ny * H))
    assign = macro.sliding_window_assignment(bar, mesh, LAT)
    corners = [(i, j) for i in range(2, bar.ny - 1) for j in range(2, bar.nx - 1)]
    windows = {c: bar.window(c, 4, LAT) for c in corners}
    cen = mesh.nodes[mesh.cells[:, :3]].mean(axis=1)
    for m, c in zip(assign, cen):
        chosen = [k for k, w in windows.items() if np.array_equal(w.radii, m.radii)]
        assert len(chosen) == 1
        i, j = chosen[0]
        dist = {k: np.hypot(c[0] - k[1] * H, c[1] - k[0] * H) for k in corners}
        assert dist[(i, j)] == pytest.approx(min(dist.values()), abs=1e-12)


def test_window_content():
    bar = BarMicrostructure.sample(8, 4, seed=5)
    w = bar.window((2, 3), 4, LAT)
    blocks = bar.radii.reshape(4, 8)[0:4, 1:5].ravel() / bar.block
    np.testing.assert_allclose(w.radii / LAT.spacing, blocks, rtol=1e-12)
    with pytest.raises(ValueError):
        bar.window((1, 3), 4, LAT)

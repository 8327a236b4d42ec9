"""Macroscale elasticity, FE2 coupling and the direct numerical simulation harness.

Macro meshes are affine crossed meshes with one homogenised tangent per
element. Two load cases are provided: a Cook-type tapered membrane and a
clamped bar with a shear load at its free end.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import fem, kernels
from .corrector import CellGeometry, CellProblem, hf_window_tangent
from .micro import LatticeConfig, Microstructure, isotropic_voigt, lhs_sample

COOK_VERTICES = np.array([[0.0, 0.0], [48.0, 44.0], [48.0, 60.0], [0.0, 44.0]])
COOK_PROBES = {"A": (48.0, 60.0), "B": (4.0, 44.5), "C": (4.0, 4.5), "D": (24.0, 36.0)}
COOK_TRACTION = (0.0, 0.05)
BAR_SIZE = (4.0, 1.0)
BAR_TRACTION = (0.0, -0.2)
BAR_PROBES = {"A": (4.0, 0.5), "B": (2.0, 0.5), "C": (1.0, 0.5)}


@dataclass(eq=False)
class MacroProblem:
    mesh: fem.Mesh
    dirichlet: dict = field(default_factory=dict)   # side -> prescribed displacement (2,)
    neumann: dict = field(default_factory=dict)     # side -> traction (2,)
    probes: dict = field(default_factory=dict)
    name: str = "macro"

    def __post_init__(self):
        if not self.dirichlet:
            raise ValueError("at least one side must carry a Dirichlet condition")
        if set(self.dirichlet) & set(self.neumann):
            raise ValueError("a side cannot be both Dirichlet and Neumann")
        for s in (*self.dirichlet, *self.neumann):
            if s not in fem.SIDES:
                raise ValueError(f"unknown side {s!r}")


def cook_problem(divisions=(8, 8), traction=COOK_TRACTION) -> MacroProblem:
    nx, ny = (divisions, divisions) if np.isscalar(divisions) else divisions
    P = COOK_VERTICES

    def bilinear(x):
        s, t = x[:, 0:1], x[:, 1:2]
        return (1 - s) * (1 - t) * P[0] + s * (1 - t) * P[1] + s * t * P[2] + (1 - s) * t * P[3]

    mesh = fem.map_mesh(fem.build_mesh((nx, ny), 1), bilinear)
    return MacroProblem(mesh, {"left": (0.0, 0.0)}, {"right": tuple(traction)},
                        dict(COOK_PROBES), "cook")


def bar_problem(divisions=(16, 4), size=BAR_SIZE, traction=BAR_TRACTION) -> MacroProblem:
    lx, ly = size
    mesh = fem.build_mesh(divisions, 1, (0.0, lx, 0.0, ly))
    return MacroProblem(mesh, {"left": (0.0, 0.0)}, {"right": tuple(traction)},
                        dict(BAR_PROBES), "bar")


@dataclass(eq=False)
class MacroSolution:
    mesh: fem.Mesh
    u: np.ndarray
    strain: np.ndarray   # per cell, Voigt
    stress: np.ndarray   # per cell, Voigt
    meta: dict = field(default_factory=dict)

    @property
    def von_mises(self) -> np.ndarray:
        return von_mises(self.stress)

    @property
    def locator(self):
        if "_locator" not in self.meta:
            self.meta["_locator"] = PointLocator(self.mesh)
        return self.meta["_locator"]

    def displacement_at(self, points) -> np.ndarray:
        cells, bary = self.locator.locate(points)
        ue = self.u.reshape(-1, 2)[self.mesh.cells[cells, :3]]
        return np.einsum("pk,pkd->pd", bary, ue)

    def von_mises_at(self, points) -> np.ndarray:
        cells, _ = self.locator.locate(points)
        return self.von_mises[cells]


def von_mises(stress) -> np.ndarray:
    """Plane-stress von Mises stress from Voigt stresses (rows)."""
    s = np.atleast_2d(stress)
    s11, s22, s12 = s[:, 0], s[:, 1], s[:, 2]
    return np.sqrt(s11 ** 2 - s11 * s22 + s22 ** 2 + 3 * s12 ** 2)


def _check_tangents(C):
    sym = 0.5 * (C + np.swapaxes(C, -1, -2))
    lo = np.linalg.eigvalsh(sym).min(axis=-1)
    if np.any(lo <= 0):
        bad = int(np.argmin(lo))
        raise ValueError(f"tangent {bad} is not positive definite (min eigenvalue {lo[bad]:.3e})")


def traction_load(mesh: fem.Mesh, side: str, t) -> np.ndarray:
    f = np.zeros(mesh.n_dofs)
    seq = mesh.sides[side]
    if mesh.order != 1:
        raise ValueError("traction loads are implemented for affine macro meshes")
    t = np.asarray(t, dtype=np.float64)
    for a, b in zip(seq[:-1], seq[1:]):
        h = np.linalg.norm(mesh.nodes[b] - mesh.nodes[a])
        for n in (a, b):
            f[2 * n:2 * n + 2] += 0.5 * h * t
    return f


def solve_macro(prob: MacroProblem, tangents) -> MacroSolution:
    """Linear elastic solve with one Voigt tangent per cell (or a single one)."""
    mesh = prob.mesh
    C = np.asarray(tangents, dtype=np.float64)
    if C.shape == (3, 3):
        C = np.broadcast_to(C, (mesh.cells.shape[0], 3, 3))
    if C.shape != (mesh.cells.shape[0], 3, 3):
        raise ValueError(f"expected {mesh.cells.shape[0]} tangents, got shape {C.shape}")
    _check_tangents(C)
    blocks = fem.element_blocks(mesh, C)
    K = fem.global_matrix(mesh, blocks.Ke)
    f = np.zeros(mesh.n_dofs)
    for side, t in prob.neumann.items():
        f += traction_load(mesh, side, t)
    dofs, vals = [], []
    for side, ub in prob.dirichlet.items():
        nodes = mesh.sides[side]
        for c in range(2):
            dofs.append(2 * nodes + c)
            vals.append(np.full(nodes.size, float(ub[c])))
    dofs = np.concatenate(dofs)
    vals = np.concatenate(vals)
    dofs, first = np.unique(dofs, return_index=True)
    sys = fem.LinearSystem(mesh, K, f, dirichlet=(dofs, vals[first]), model="macro")
    u = fem.solve(sys)
    eps = fem.cell_strains(mesh, u)
    sig = np.einsum("eij,ej->ei", C, eps)
    return MacroSolution(mesh, u, eps, sig, {"problem": prob.name})


class PointLocator:
    """Find the containing triangle and barycentric coordinates of points."""

    def __init__(self, mesh: fem.Mesh, k: int = 12):
        self.mesh = mesh
        x = mesh.nodes[mesh.cells[:, :3]]
        self.x0 = x[:, 0]
        J = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)
        self.invJ = np.linalg.inv(J)
        self.tree = cKDTree(x.mean(axis=1))
        self.k = min(k, mesh.cells.shape[0])

    def locate(self, points):
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        _, cand = self.tree.query(pts, k=self.k)
        cand = cand.reshape(pts.shape[0], -1)
        cells = np.empty(pts.shape[0], dtype=np.int64)
        bary = np.empty((pts.shape[0], 3))
        for i, p in enumerate(pts):
            c = cand[i]
            st = np.einsum("cij,cj->ci", self.invJ[c], p - self.x0[c])
            lam = np.column_stack([1 - st.sum(axis=1), st])
            j = int(np.argmax(lam.min(axis=1)))
            if lam[j].min() < -1e-8:
                raise ValueError(f"point {p} lies outside the mesh")
            cells[i], bary[i] = c[j], lam[j]
        return cells, bary


# --------------------------------------------------------------------------
# tangent providers and FE2


PROVIDERS = ("taylor", "linear", "periodic", "minimal", "hf", "deepbnd")


class TangentProvider:
    """Homogenised tangent of an HF lattice microstructure for one BC model.

    Classical models and the learned BC act on the reduced window; ``hf``
    homogenises the periodic HF solution over the same window.
    """

    def __init__(self, kind: str, geometry: CellGeometry, dbm=None):
        if kind not in PROVIDERS:
            raise ValueError(f"unknown tangent provider {kind!r}")
        if kind == "deepbnd" and dbm is None:
            raise ValueError("the learned BC needs a trained model bundle")
        self.kind, self.geometry, self.dbm = kind, geometry, dbm
        self._cache = {}

    def __call__(self, m: Microstructure) -> np.ndarray:
        key = m.radii.tobytes() + repr(m.config.to_dict()).encode()
        if key not in self._cache:
            self._cache[key] = self._compute(m)
        return self._cache[key]

    def _compute(self, m):
        g = self.geometry
        if self.kind == "hf":
            return hf_window_tangent(m, g)
        cp = CellProblem(g.reduced_mesh, m)
        if self.kind == "deepbnd":
            from .model import deepbnd_tangent

            return deepbnd_tangent(self.dbm, m.radii, cp)
        return cp.tangent(self.kind)


def fe2(prob: MacroProblem, assignment, provider, workers: int = 1) -> MacroSolution:
    """Two-scale solve: one microstructure per macro cell, tangents from ``provider``."""
    if len(assignment) != prob.mesh.cells.shape[0]:
        raise ValueError("need one microstructure per macro cell")
    from .pipeline import parallel_map

    uniq, inverse = {}, []
    for m in assignment:
        inverse.append(uniq.setdefault(m.radii.tobytes(), (len(uniq), m))[0])
    tangents = np.array(parallel_map(provider, [m for _, m in uniq.values()], workers))
    sol = solve_macro(prob, tangents[inverse])
    sol.meta["provider"] = getattr(provider, "kind", "custom")
    return sol


def random_draw_pool(lattice: LatticeConfig, n: int, seed: int) -> list:
    """Pool of independent HF microstructures for scale-separated FE2."""
    theta = lhs_sample(n, lattice.n_balls, seed).theta
    return [Microstructure.from_theta(lattice, t) for t in theta]


def random_draw_assignment(pool, n_cells: int, seed: int) -> list:
    """Distinct pool members per macro cell (drawn without repetition)."""
    from .micro import rng

    if len(pool) < n_cells:
        raise ValueError("pool smaller than the number of macro cells")
    idx = rng(seed).permutation(len(pool))[:n_cells]
    return [pool[i] for i in idx]


# --------------------------------------------------------------------------
# clamped bar: DNS and sliding windows


@dataclass(eq=False)
class BarMicrostructure:
    """One inclusion per square block of side ``H`` covering ``[0, nx H] x [0, ny H]``."""
    nx: int
    ny: int
    theta: np.ndarray      # (ny * nx,) in [-1, 1], row-major, rows along +y
    gamma: float = 10.0
    lame: tuple = (0.576923, 0.384615)
    height: float = 1.0

    @property
    def block(self) -> float:
        return self.height / self.ny

    @property
    def radii(self) -> np.ndarray:
        from .micro import radii_from_theta

        H = self.block
        return radii_from_theta(self.theta, 0.1 * H, 0.4 * H)

    @property
    def centres(self) -> np.ndarray:
        H = self.block
        yy, xx = np.meshgrid((np.arange(self.ny) + 0.5) * H, (np.arange(self.nx) + 0.5) * H,
                             indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def chi(self, points) -> np.ndarray:
        return kernels.inclusion_indicator(np.atleast_2d(points), 0.0, 0.0, self.block,
                                           self.nx, self.ny, self.centres, self.radii,
                                           self.gamma)

    @property
    def config(self):
        # duck-typed for fem.material_tensor
        return self

    @classmethod
    def sample(cls, nx, ny, seed, gamma=10.0, height=1.0):
        return cls(nx, ny, lhs_sample(1, nx * ny, seed).theta[0], gamma, height=height)

    def window(self, corner, n: int, lattice: LatticeConfig) -> Microstructure:
        """``n x n`` block window centred at block corner ``(i, j)`` in training geometry."""
        i, j = corner
        h = n // 2
        if not (h <= i <= self.ny - h and h <= j <= self.nx - h):
            raise ValueError("window leaves the bar")
        th = self.theta.reshape(self.ny, self.nx)[i - h:i + h, j - h:j + h].ravel()
        return Microstructure.from_theta(lattice, th)


def sliding_window_assignment(bar: BarMicrostructure, mesh: fem.Mesh,
                              lattice: LatticeConfig) -> list:
    """Window with the nearest centre for each macro cell centroid."""
    n = lattice.n_side
    H = bar.block
    h = n // 2
    cen = mesh.nodes[mesh.cells[:, :3]].mean(axis=1)
    j = np.clip(np.rint(cen[:, 0] / H).astype(int), h, bar.nx - h)
    i = np.clip(np.rint(cen[:, 1] / H).astype(int), h, bar.ny - h)
    cache = {}
    out = []
    for a, b in zip(i, j):
        if (a, b) not in cache:
            cache[(a, b)] = bar.window((a, b), n, lattice)
        out.append(cache[(a, b)])
    return out


def dns(bar: BarMicrostructure, divisions_per_block: int = 15, size=None,
        traction=BAR_TRACTION, max_dofs: int = 2_000_000) -> MacroSolution:
    """Fully resolved solve of the heterogeneous bar."""
    nx = bar.nx * divisions_per_block
    ny = bar.ny * divisions_per_block
    if 2 * ((nx + 1) * (ny + 1) + nx * ny) > max_dofs:
        raise MemoryError(f"DNS mesh with {nx}x{ny} blocks exceeds {max_dofs} dofs")
    size = size or (bar.nx * bar.block, bar.ny * bar.block)
    prob = bar_problem((nx, ny), size, traction)
    mesh = prob.mesh
    blocks = fem.element_blocks(mesh, bar)
    K = fem.global_matrix(mesh, blocks.Ke)
    f = sum(traction_load(mesh, s, t) for s, t in prob.neumann.items())
    nodes = mesh.sides["left"]
    dofs = np.concatenate([2 * nodes, 2 * nodes + 1])
    u = fem.solve(fem.LinearSystem(mesh, K, f, dirichlet=(dofs, np.zeros(dofs.size))))
    D = fem.material_tensor(mesh, bar)
    eps = fem.cell_strains(mesh, u)
    # cell stress from the quadrature-averaged material
    sig = np.einsum("eij,ej->ei", D.mean(axis=1), eps)
    return MacroSolution(mesh, u, eps, sig, {"problem": "dns"})


# --------------------------------------------------------------------------
# reporting


def l2_error(reference: MacroSolution, candidate: MacroSolution) -> float:
    """Relative L2 displacement error on the reference mesh."""
    ref_mesh = reference.mesh
    uc = candidate.displacement_at(ref_mesh.nodes).ravel()
    e = uc - reference.u
    M = fem.nodal_mass(ref_mesh)
    def sq(v):
        v2 = v.reshape(-1, 2)
        return sum(float(v2[:, c] @ (M @ v2[:, c])) for c in range(2))
    den = sq(reference.u)
    return float(np.sqrt(sq(e) / den)) if den > 0 else float(np.sqrt(sq(e)))


def error_report(reference: MacroSolution, candidates: dict, probes: dict) -> list:
    """Rows ``(case, metric, value)`` comparing candidates with the reference."""
    rows = []
    names = list(probes)
    pts = np.array([probes[k] for k in names])
    u_ref = reference.displacement_at(pts)
    vm_ref = reference.von_mises_at(pts)
    for case, sol in candidates.items():
        rows.append((case, "l2_rel", l2_error(reference, sol)))
        u = sol.displacement_at(pts)
        vm = sol.von_mises_at(pts)
        for k, name in enumerate(names):
            den = np.linalg.norm(u_ref[k])
            err = np.linalg.norm(u[k] - u_ref[k])
            rows.append((case, f"u_{name}_rel", float(err / den) if den > 0 else float(err)))
            dv = abs(vm[k] - vm_ref[k])
            rows.append((case, f"vm_{name}_rel", float(dv / vm_ref[k]) if vm_ref[k] > 0 else float(dv)))
    return rows


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case", "metric", "value"])
    for case, metric, value in rows:
        w.writerow([case, metric, repr(float(value))])
    return buf.getvalue()


def solution_summary(sol: MacroSolution, probes: dict, case: str) -> list:
    rows = []
    for name, p in probes.items():
        u = sol.displacement_at([p])[0]
        rows.append((case, f"u_{name}_x", u[0]))
        rows.append((case, f"u_{name}_y", u[1]))
        rows.append((case, f"vm_{name}", sol.von_mises_at([p])[0]))
    return rows


def uniform_tangent(lattice: LatticeConfig) -> np.ndarray:
    return isotropic_voigt(*lattice.lame)

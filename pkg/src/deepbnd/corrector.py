"""Microscale corrector problems and homogenisation.

The high-fidelity (HF) cell covers the whole lattice, ``[-L/2, L/2]^2``; the
reduced window is its central ``n_r x n_r`` block. The reduced mesh is cut out
of the HF mesh, so traces move between the two by plain node matching.

Voigt convention throughout: strains ``(e11, e22, 2 e12)``, stresses
``(s11, s22, s12)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import fem
from .micro import Microstructure

BC_MODELS = ("taylor", "linear", "periodic", "minimal")
UNIT_STRAINS = np.eye(3)


def voigt_to_tensor(p) -> np.ndarray:
    p1, p2, p3 = p
    return np.array([[p1, 0.5 * p3], [0.5 * p3, p2]])


def tensor_to_voigt(e) -> np.ndarray:
    e = np.asarray(e)
    return np.array([e[0, 0], e[1, 1], e[0, 1] + e[1, 0]])


class CellProblem:
    """Assembled corrector operators for one microstructure on one mesh.

    The stiffness and the unit-strain loads are assembled once; any number of
    strains and constraint models can then be solved against them.
    """

    def __init__(self, mesh: fem.Mesh, material, backend=None):
        self.mesh = mesh
        self.material = material
        blocks = fem.element_blocks(mesh, material, backend=backend)
        self.K = fem.global_matrix(mesh, blocks.Ke)
        self.L = fem.strain_loads(mesh, blocks.Fe)    # int B^T C, (n_dofs, 3)
        self.S = blocks.Se.sum(axis=0)                # int C, (3, 3)

    @property
    def area(self) -> float:
        return self.mesh.area

    def system(self, eps) -> fem.LinearSystem:
        eps = np.asarray(eps, dtype=np.float64)
        return fem.LinearSystem(self.mesh, self.K, -(self.L @ eps))

    def solve(self, eps, bc: str, trace=None) -> np.ndarray:
        """Fluctuation(s) for strain(s) ``eps`` (shape (3,) or (3, k))."""
        return fem.solve(fem.constrain(self.system(eps), bc, trace))

    def stress(self, eps, fluct) -> np.ndarray:
        """``<C (eps + grad^s u)>`` over the mesh; works column-wise."""
        return (self.S @ np.asarray(eps) + self.L.T @ np.asarray(fluct)) / self.area

    def tangent(self, bc: str) -> np.ndarray:
        if bc == "taylor":
            return self.S / self.area
        return self.stress(UNIT_STRAINS, self.solve(UNIT_STRAINS, bc))

    def energy(self, eps, bc: str) -> float:
        eps = np.asarray(eps, dtype=np.float64)
        return float(eps @ self.tangent(bc) @ eps)


@dataclass(eq=False)
class CellGeometry:
    """HF mesh, reduced window, nested reduced mesh and its boundary discretisation."""
    n_side: int = 4
    n_reduced: int = 2
    divisions: int = 8        # mesh divisions per lattice block
    order: int = 1
    length: float = 1.0

    def __post_init__(self):
        if (self.n_side - self.n_reduced) % 2 or not 0 < self.n_reduced <= self.n_side:
            raise ValueError("reduced window must be a centred sub-block of the lattice")

    @property
    def window(self) -> tuple:
        half = 0.5 * self.n_reduced * self.length / self.n_side
        return (-half, half, -half, half)

    @cached_property
    def hf_mesh(self) -> fem.Mesh:
        h = 0.5 * self.length
        return fem.build_mesh(self.n_side * self.divisions, self.order, (-h, h, -h, h))

    @cached_property
    def _sub(self):
        return fem.submesh(self.hf_mesh, self.window)

    @property
    def reduced_mesh(self) -> fem.Mesh:
        return self._sub[0]

    @property
    def node_map(self) -> np.ndarray:
        return self._sub[1]

    @cached_property
    def boundary(self) -> fem.BoundaryDiscretisation:
        bd = fem.boundary_discretisation(self.reduced_mesh)
        bd.check_symmetric()
        return bd

    @cached_property
    def dof_map(self) -> np.ndarray:
        """Reduced dof -> HF dof."""
        n = self.node_map
        return np.column_stack([2 * n, 2 * n + 1]).ravel()

    def restrict(self, hf_field) -> np.ndarray:
        return np.asarray(hf_field)[self.dof_map]

    def to_dict(self) -> dict:
        return {"n_side": self.n_side, "n_reduced": self.n_reduced,
                "divisions": self.divisions, "order": self.order, "length": self.length}


@dataclass(frozen=True)
class GoalTrace:
    """Boundary trace of the HF fluctuation on the reduced window, zero-mean over the window."""
    values: np.ndarray
    average: np.ndarray   # window average of the HF fluctuation that was removed
    load: int

    def raw(self) -> np.ndarray:
        """The trace before the average shift."""
        return self.values + np.tile(self.average, self.values.shape[0] // 2)


def _mesh_for(m: Microstructure, domain: str, geometry: CellGeometry | None):
    if geometry is None:
        geometry = CellGeometry(n_side=m.config.n_side, n_reduced=m.config.n_side,
                                length=m.config.length)
    return geometry.hf_mesh if domain == "hf" else geometry.reduced_mesh


def solve_corrector(m: Microstructure, eps, bc: str, domain: str = "hf",
                    geometry: CellGeometry | None = None, trace=None) -> np.ndarray:
    """Fluctuation for strain ``eps`` under the constraint model ``bc``.

    ``bc="trace"`` (prescribed boundary values) is only meaningful on the
    reduced window.
    """
    if bc == "trace" and domain != "reduced":
        raise ValueError("prescribed traces apply to the reduced window only")
    mesh = _mesh_for(m, domain, geometry)
    return CellProblem(mesh, m).solve(eps, bc, trace)


def homogenise_stress(m: Microstructure, eps, fluct, mesh: fem.Mesh) -> np.ndarray:
    return CellProblem(mesh, m).stress(eps, fluct)


def homogenised_tangent(m: Microstructure, bc: str, mesh: fem.Mesh) -> np.ndarray:
    return CellProblem(mesh, m).tangent(bc)


def hf_solution(m: Microstructure, geometry: CellGeometry, loads=(1, 2, 3)):
    """Periodic HF fluctuations for the given unit loads (columns)."""
    cp = CellProblem(geometry.hf_mesh, m)
    eps = UNIT_STRAINS[:, [i - 1 for i in loads]]
    return cp.solve(eps, "periodic")


def goal_traces(m: Microstructure, geometry: CellGeometry, loads=(1, 3)) -> list[GoalTrace]:
    """Goal traces for several loads from a single HF factorisation."""
    for i in loads:
        if i not in (1, 2, 3):
            raise ValueError("load index must be 1, 2 or 3")
    U = hf_solution(m, geometry, loads)
    red = geometry.reduced_mesh
    avg_rows = np.vstack(fem.average_rows(red))
    bd = geometry.boundary
    out = []
    for k, i in enumerate(loads):
        u = geometry.restrict(U[:, k])
        avg = avg_rows @ u
        w = fem.trace(u, bd) - np.tile(avg, bd.n_nodes)
        out.append(GoalTrace(w, avg, i))
    return out


def extract_goal_trace(m: Microstructure, load: int, geometry: CellGeometry,
                       window=None) -> GoalTrace:
    if window is not None and not np.allclose(window, geometry.window):
        # an explicit window must still be grid aligned
        fem.submesh(geometry.hf_mesh, window)
        raise ValueError("window differs from the geometry's reduced window")
    return goal_traces(m, geometry, (load,))[0]


def hf_window_tangent(m: Microstructure, geometry: CellGeometry) -> np.ndarray:
    """Reference tangent: HF periodic fluctuations homogenised over the window."""
    U = hf_solution(m, geometry)
    cp = CellProblem(geometry.reduced_mesh, m)
    return cp.stress(UNIT_STRAINS, geometry.restrict(U))


def solve_reduced(m: Microstructure, eps, w, geometry: CellGeometry,
                  problem: CellProblem | None = None) -> np.ndarray:
    """Reduced corrector with prescribed boundary trace ``w`` (column-wise)."""
    cp = problem or CellProblem(geometry.reduced_mesh, m)
    return cp.solve(eps, "trace", w)


def reduced_tangent_from_traces(problem: CellProblem, traces) -> np.ndarray:
    """Tangent whose k-th column uses unit strain k with boundary trace ``traces[:, k]``."""
    U = problem.solve(UNIT_STRAINS, "trace", np.asarray(traces))
    return problem.stress(UNIT_STRAINS, U)


def rotation_equivariance_gap(m: Microstructure, geometry: CellGeometry) -> float:
    """Relative gap between w2(p) and Q w1(pi^-1 p)."""
    from .micro import permute_params

    w2 = goal_traces(m, geometry, (2,))[0].values
    m_rot = Microstructure(m.config, permute_params(m.radii, 1))
    w1 = goal_traces(m_rot, geometry, (1,))[0].values
    qw1 = geometry.boundary.rotate(w1)
    return float(np.linalg.norm(w2 - qw1) / max(np.linalg.norm(w2), 1e-300))

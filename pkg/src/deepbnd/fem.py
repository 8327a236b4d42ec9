"""2D linear elasticity on structured triangular meshes.

Meshes are "crossed" grids: every rectangular block is split into four
triangles around a centre node, which makes the node set symmetric under
quarter turns about the domain centre. Fields are nodal with interleaved
components ``(u_x, u_y)`` per node.

Constraints are handled in one place, :func:`solve`: Dirichlet values and
periodic master/slave pairs are eliminated, remaining linear constraints are
enforced with Lagrange multipliers, and the saddle-point system is factorised
with a sparse direct solver.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels

SIDES = ("bottom", "right", "top", "left")
# pivots this small relative to the largest mark a singular system
PIVOT_TOL = 1e-13

# Symmetric 6-point rule, exact to degree 4, on the reference triangle.
_A1, _W1 = 0.445948490915965, 0.223381589678011
_A2, _W2 = 0.091576213509771, 0.109951743655322
_BARY = np.array([
    [_A1, _A1, 1 - 2 * _A1], [1 - 2 * _A1, _A1, _A1], [_A1, 1 - 2 * _A1, _A1],
    [_A2, _A2, 1 - 2 * _A2], [1 - 2 * _A2, _A2, _A2], [_A2, 1 - 2 * _A2, _A2],
])
_QW = 0.5 * np.array([_W1] * 3 + [_W2] * 3)


class SingularSystemError(RuntimeError):
    def __init__(self, msg, nullity=None):
        if nullity is not None:
            msg = f"{msg} (estimated nullspace dimension {nullity})"
        super().__init__(msg)
        self.nullity = nullity


class DegenerateMeshError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceElement:
    order: int
    points: np.ndarray   # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,)
    shape: np.ndarray    # (nq, nloc)
    dshape: np.ndarray   # (nq, nloc, 2)

    @property
    def nloc(self):
        return self.shape.shape[1]


def reference_element(order: int) -> ReferenceElement:
    # barycentric (l0, l1, l2) with xi = l1, eta = l2
    l0, l1, l2 = _BARY[:, 2], _BARY[:, 0], _BARY[:, 1]
    pts = np.column_stack([l1, l2])
    if order == 1:
        N = np.column_stack([l0, l1, l2])
        dN = np.broadcast_to(np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]]),
                             (len(_QW), 3, 2)).copy()
    elif order == 2:
        N = np.column_stack([l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1),
                             4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0])
        dl = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
        L = np.column_stack([l0, l1, l2])
        dN = np.empty((len(_QW), 6, 2))
        for a in range(3):
            dN[:, a] = (4 * L[:, a] - 1)[:, None] * dl[a]
        for a, (i, j) in enumerate([(0, 1), (1, 2), (2, 0)], start=3):
            dN[:, a] = 4 * (L[:, i, None] * dl[j] + L[:, j, None] * dl[i])
    else:
        raise ValueError("order must be 1 or 2")
    return ReferenceElement(order, pts, _QW.copy(), N, dN)


@dataclass(eq=False)
class Mesh:
    """Triangular mesh of a (possibly mapped) rectangle.

    ``sides`` maps each side name to its node indices, ordered anticlockwise
    around the domain (bottom left-to-right, right bottom-to-top, top
    right-to-left, left top-to-bottom), corners included.
    """
    nodes: np.ndarray
    cells: np.ndarray
    order: int
    sides: dict
    domain: tuple | None = None   # (x0, x1, y0, y1) when the mesh is an axis-aligned rectangle
    divisions: tuple | None = None  # (nx, ny) blocks

    @property
    def n_nodes(self):
        return self.nodes.shape[0]

    @property
    def n_dofs(self):
        return 2 * self.nodes.shape[0]

    @cached_property
    def ref(self) -> ReferenceElement:
        return reference_element(self.order)

    @cached_property
    def mesh_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.nodes, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.cells, dtype="<i8").tobytes())
        h.update(str(self.order).encode())
        return h.hexdigest()[:16]

    @cached_property
    def cell_dofs(self) -> np.ndarray:
        c = self.cells
        d = np.empty((c.shape[0], 2 * c.shape[1]), dtype=np.int64)
        d[:, 0::2] = 2 * c
        d[:, 1::2] = 2 * c + 1
        return d

    @cached_property
    def jacobians(self):
        x = self.nodes[self.cells[:, :3]]
        J = np.stack([x[:, 1] - x[:, 0], x[:, 2] - x[:, 0]], axis=2)
        det = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
        return J, det

    @cached_property
    def quadrature_points(self) -> np.ndarray:
        """Physical quadrature points, shape (n_cells, nq, 2)."""
        x = self.nodes[self.cells[:, :3]]
        bary = np.column_stack([1 - self.ref.points.sum(1), self.ref.points])
        return np.einsum("qk,ekd->eqd", bary, x)

    @cached_property
    def boundary_loop(self) -> np.ndarray:
        """Boundary nodes anticlockwise from the bottom-left corner (no repeats)."""
        return np.concatenate([self.sides[s][:-1] for s in SIDES])

    @cached_property
    def boundary_nodes(self) -> np.ndarray:
        return np.unique(self.boundary_loop)

    @cached_property
    def area(self) -> float:
        return float(0.5 * self.jacobians[1].sum())

    @cached_property
    def centroid(self) -> np.ndarray:
        _, det = self.jacobians
        c = self.nodes[self.cells[:, :3]].mean(axis=1)
        return (0.5 * det) @ c / self.area

    def shape_integrals(self, weight=None) -> np.ndarray:
        """``int N_a w dOmega`` per node (``w`` sampled at quadrature points)."""
        _, det = self.jacobians
        vals = np.einsum("q,qa->qa", self.ref.weights, self.ref.shape)
        if weight is None:
            loc = det[:, None] * vals.sum(axis=0)[None, :]
        else:
            loc = det[:, None] * np.einsum("eq,qa->ea", weight, vals)
        out = np.zeros(self.n_nodes)
        np.add.at(out, self.cells, loc)
        return out

    def check(self):
        _, det = self.jacobians
        if np.any(det <= 0):
            bad = int(np.argmin(det))
            raise DegenerateMeshError(f"cell {bad} is degenerate or inverted (det J = {det[bad]:.3e})")


def build_mesh(divisions, order: int = 1, domain=(0.0, 1.0, 0.0, 1.0)) -> Mesh:
    """Structured crossed-triangle mesh of the rectangle ``(x0, x1, y0, y1)``."""
    nx, ny = (divisions, divisions) if np.isscalar(divisions) else divisions
    nx, ny = int(nx), int(ny)
    if nx < 1 or ny < 1:
        raise ValueError("divisions must be positive")
    x0, x1, y0, y1 = map(float, domain)
    xs = x0 + (x1 - x0) * np.arange(nx + 1) / nx
    ys = y0 + (y1 - y0) * np.arange(ny + 1) / ny
    xc = x0 + (x1 - x0) * (np.arange(nx) + 0.5) / nx
    yc = y0 + (y1 - y0) * (np.arange(ny) + 0.5) / ny
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    cy, cx = np.meshgrid(yc, xc, indexing="ij")
    nodes = np.vstack([np.column_stack([gx.ravel(), gy.ravel()]),
                       np.column_stack([cx.ravel(), cy.ravel()])])
    ng = (nx + 1) * (ny + 1)
    i, j = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = i * (nx + 1) + j
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    c = ng + i * nx + j
    cells = np.stack([np.column_stack([v00, v10, c]), np.column_stack([v10, v11, c]),
                      np.column_stack([v11, v01, c]), np.column_stack([v01, v00, c])],
                     axis=1).reshape(-1, 3)
    grid = np.arange(ng).reshape(ny + 1, nx + 1)
    sides = {"bottom": grid[0, :], "right": grid[:, -1],
             "top": grid[-1, ::-1], "left": grid[::-1, 0]}
    mesh = Mesh(nodes, cells.astype(np.int64), 1, {k: v.copy() for k, v in sides.items()},
                (x0, x1, y0, y1), (nx, ny))
    if order == 2:
        mesh = _elevate(mesh)
    elif order != 1:
        raise ValueError("order must be 1 or 2")
    return mesh


def _elevate(mesh: Mesh) -> Mesh:
    """Add mid-edge nodes to an affine mesh."""
    edge_id = {}
    mids = []
    cells = mesh.cells
    new = np.empty((cells.shape[0], 6), dtype=np.int64)
    new[:, :3] = cells
    n = mesh.n_nodes
    for e, tri in enumerate(cells):
        for k, (a, b) in enumerate(((0, 1), (1, 2), (2, 0))):
            key = (min(tri[a], tri[b]), max(tri[a], tri[b]))
            if key not in edge_id:
                edge_id[key] = n + len(mids)
                mids.append(key)
            new[e, 3 + k] = edge_id[key]
    mids = np.array(mids)
    nodes = np.vstack([mesh.nodes, 0.5 * (mesh.nodes[mids[:, 0]] + mesh.nodes[mids[:, 1]])])
    sides = {}
    for s, seq in mesh.sides.items():
        out = [seq[0]]
        for a, b in zip(seq[:-1], seq[1:]):
            out += [edge_id[(min(a, b), max(a, b))], b]
        sides[s] = np.array(out, dtype=np.int64)
    return Mesh(nodes, new, 2, sides, mesh.domain, mesh.divisions)


def map_mesh(mesh: Mesh, fn) -> Mesh:
    """Push nodes through ``fn`` (an orientation-preserving map)."""
    m = Mesh(np.asarray(fn(mesh.nodes), dtype=np.float64), mesh.cells, mesh.order,
             mesh.sides, None, mesh.divisions)
    m.check()
    return m


def submesh(mesh: Mesh, window) -> tuple[Mesh, np.ndarray]:
    """Restriction of a rectangular structured mesh to an aligned sub-rectangle.

    Returns the new mesh and ``node_map`` with ``new node k == old node node_map[k]``.
    Node coordinates are copied bit for bit.
    """
    if mesh.domain is None:
        raise ValueError("submesh needs an axis-aligned rectangular mesh")
    x0, x1, y0, y1 = map(float, window)
    X0, X1, Y0, Y1 = mesh.domain
    nx, ny = mesh.divisions
    hx, hy = (X1 - X0) / nx, (Y1 - Y0) / ny
    fx = [(x - X0) / hx for x in (x0, x1)]
    fy = [(y - Y0) / hy for y in (y0, y1)]
    if any(abs(f - round(f)) > 1e-9 for f in fx + fy):
        raise ValueError("window is not aligned with the mesh grid")
    ix0, ix1 = (int(round(f)) for f in fx)
    iy0, iy1 = (int(round(f)) for f in fy)
    if not (0 <= ix0 < ix1 <= nx and 0 <= iy0 < iy1 <= ny):
        raise ValueError("window outside the mesh")
    cen = mesh.nodes[mesh.cells[:, :3]].mean(axis=1)
    keep = ((cen[:, 0] > x0) & (cen[:, 0] < x1) & (cen[:, 1] > y0) & (cen[:, 1] < y1))
    cells = mesh.cells[keep]
    node_map = np.unique(cells)
    inv = -np.ones(mesh.n_nodes, dtype=np.int64)
    inv[node_map] = np.arange(node_map.size)
    nodes = mesh.nodes[node_map]
    tol = 1e-9 * max(X1 - X0, Y1 - Y0)
    sides = {}
    on = {
        "bottom": (np.abs(nodes[:, 1] - y0) < tol, 0, False),
        "right": (np.abs(nodes[:, 0] - x1) < tol, 1, False),
        "top": (np.abs(nodes[:, 1] - y1) < tol, 0, True),
        "left": (np.abs(nodes[:, 0] - x0) < tol, 1, True),
    }
    for s, (mask, axis, rev) in on.items():
        idx = np.flatnonzero(mask)
        idx = idx[np.argsort(nodes[idx, axis], kind="stable")]
        sides[s] = idx[::-1].copy() if rev else idx
    sub = Mesh(nodes, inv[cells], mesh.order, sides, (x0, x1, y0, y1),
               (ix1 - ix0, iy1 - iy0))
    return sub, node_map


# --------------------------------------------------------------------------
# assembly


@dataclass(eq=False)
class ElementBlocks:
    """Per-cell integrals produced by the element kernel."""
    Ke: np.ndarray
    Fe: np.ndarray
    Se: np.ndarray


def material_tensor(mesh: Mesh, material) -> np.ndarray:
    """Voigt stiffness at every quadrature point, shape (n_cells, nq, 3, 3).

    ``material`` may be a microstructure (anything with ``chi`` and
    ``config.lame``), a single 3x3 matrix, or per-cell matrices (n_cells, 3, 3).
    """
    from .micro import isotropic_voigt

    nq = mesh.ref.weights.shape[0]
    if hasattr(material, "chi"):
        pts = mesh.quadrature_points
        chi = material.chi(pts.reshape(-1, 2)).reshape(pts.shape[:2])
        return chi[:, :, None, None] * isotropic_voigt(*material.config.lame)
    C = np.asarray(material, dtype=np.float64)
    if C.shape == (3, 3):
        return np.broadcast_to(C, (mesh.cells.shape[0], nq, 3, 3))
    if C.shape == (mesh.cells.shape[0], 3, 3):
        return np.broadcast_to(C[:, None], (mesh.cells.shape[0], nq, 3, 3))
    raise ValueError(f"cannot interpret material of shape {C.shape}")


def element_blocks(mesh: Mesh, material, backend=None) -> ElementBlocks:
    D = material_tensor(mesh, material)
    Ke, Fe, Se, det = kernels.element_matrices(mesh.nodes, mesh.cells, mesh.ref.dshape,
                                               mesh.ref.weights, D, backend=backend)
    if np.any(det <= 0):
        bad = int(np.argmin(det))
        raise DegenerateMeshError(f"cell {bad} is degenerate or inverted (det J = {det[bad]:.3e})")
    return ElementBlocks(Ke, Fe, Se)


def global_matrix(mesh: Mesh, Ke: np.ndarray) -> sp.csr_matrix:
    dofs = mesh.cell_dofs
    rows = np.repeat(dofs, dofs.shape[1], axis=1).ravel()
    cols = np.tile(dofs, (1, dofs.shape[1])).ravel()
    K = sp.coo_matrix((Ke.ravel(), (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    K.sum_duplicates()
    return K


def strain_loads(mesh: Mesh, Fe: np.ndarray) -> np.ndarray:
    """``int B^T D e_k`` assembled, shape (n_dofs, 3)."""
    out = np.zeros((mesh.n_dofs, 3))
    np.add.at(out, mesh.cell_dofs, Fe)
    return out


@dataclass(eq=False)
class LinearSystem:
    """Stiffness, right-hand side(s) and the constraint description.

    ``rhs`` may hold several columns (one solve per column, one factorisation).
    ``constraints`` are ``(coefficients, target)`` rows enforced by multipliers;
    ``gauge`` rows remove zero-energy modes left free by the constraints and
    do not change the energy.
    """
    mesh: Mesh
    stiffness: sp.csr_matrix
    rhs: np.ndarray
    dirichlet: tuple | None = None          # (dofs, values)
    master: np.ndarray | None = None        # periodic dof -> master dof
    constraints: list = field(default_factory=list)
    gauge: list = field(default_factory=list)
    zero_average: bool = False
    model: str = "none"


def assemble_corrector(mesh: Mesh, material, eps=(0.0, 0.0, 0.0), blocks=None) -> LinearSystem:
    """Corrector stiffness and load ``-(C eps, grad^s v)`` for a Voigt strain."""
    if blocks is None:
        blocks = element_blocks(mesh, material)
    K = global_matrix(mesh, blocks.Ke)
    rhs = -strain_loads(mesh, blocks.Fe) @ np.asarray(eps, dtype=np.float64)
    return LinearSystem(mesh, K, rhs)


def average_rows(mesh: Mesh) -> list:
    """Rows of ``<eta_c>_Omega`` for c = x, y."""
    w = mesh.shape_integrals() / mesh.area
    rows = []
    for c in range(2):
        r = np.zeros(mesh.n_dofs)
        r[c::2] = w
        rows.append(r)
    return rows


def rotation_gauge_row(mesh: Mesh) -> np.ndarray:
    """Orthogonality to the infinitesimal rotation about the centroid."""
    pts = mesh.quadrature_points - mesh.centroid
    r = np.zeros(mesh.n_dofs)
    r[0::2] = -mesh.shape_integrals(pts[..., 1])
    r[1::2] = mesh.shape_integrals(pts[..., 0])
    return r / mesh.area


def periodic_master(mesh: Mesh) -> np.ndarray:
    """Node -> master node for left/right and bottom/top pairing."""
    s = mesh.sides
    left_up, right_up = s["left"][::-1], s["right"]
    bot, top_lr = s["bottom"], s["top"][::-1]
    if len(left_up) != len(right_up) or len(bot) != len(top_lr):
        raise ValueError("opposite sides have different node counts")
    dx = mesh.nodes[right_up] - mesh.nodes[left_up]
    dy = mesh.nodes[top_lr] - mesh.nodes[bot]
    tol = 1e-9 * np.ptp(mesh.nodes, axis=0).max()
    if np.ptp(dx[:, 1]) > tol or np.ptp(dy[:, 0]) > tol or np.ptp(dx[:, 0]) > tol or np.ptp(dy[:, 1]) > tol:
        raise ValueError("opposite sides do not match node for node")
    master = np.arange(mesh.n_nodes)
    master[right_up] = left_up
    master[top_lr] = bot
    corner = bot[0]
    master[[bot[-1], top_lr[0], top_lr[-1]]] = corner
    return master


def constrain(sys: LinearSystem, model: str, trace=None) -> LinearSystem:
    """Attach the kinematic constraints of a fluctuation model.

    ``model`` is one of ``taylor``, ``linear``, ``periodic``, ``minimal`` or
    ``trace`` (prescribed boundary values ``trace`` in canonical loop order).
    """
    mesh = sys.mesh
    model = model.lower()
    bnd = mesh.boundary_loop
    bdofs = np.column_stack([2 * bnd, 2 * bnd + 1]).ravel()
    if model == "taylor":
        return replace(sys, dirichlet=(np.arange(mesh.n_dofs), np.zeros(mesh.n_dofs)),
                       model=model)
    if model == "linear":
        return replace(sys, dirichlet=(bdofs, np.zeros(bdofs.size)), model=model)
    if model == "periodic":
        node_master = periodic_master(mesh)
        master = np.empty(mesh.n_dofs, dtype=np.int64)
        master[0::2] = 2 * node_master
        master[1::2] = 2 * node_master + 1
        return replace(sys, master=master,
                       constraints=[(r, 0.0) for r in average_rows(mesh)], model=model)
    if model == "minimal":
        bd = boundary_discretisation(mesh)
        G = bd.moment_operator() / mesh.area
        sym = [G[0], G[3], 0.5 * (G[1] + G[2])]
        rows = []
        for g in sym:
            r = np.zeros(mesh.n_dofs)
            r[bd.dofs] = g
            rows.append((r, 0.0))
        return replace(sys, constraints=[(r, 0.0) for r in average_rows(mesh)] + rows,
                       gauge=[rotation_gauge_row(mesh)], model=model)
    if model == "trace":
        trace = np.asarray(trace, dtype=np.float64)
        if trace.shape[0] != bdofs.size:
            raise ValueError(f"trace has {trace.shape[0]} entries, boundary has {bdofs.size} dofs")
        return replace(sys, dirichlet=(bdofs, trace), zero_average=True, model=model)
    raise ValueError(f"unknown constraint model {model!r}")


def _reduction(sys: LinearSystem):
    """Affine map u = T z + g eliminating Dirichlet and periodic slave dofs."""
    n = sys.mesh.n_dofs
    k = 1 if sys.rhs.ndim == 1 else sys.rhs.shape[1]
    g = np.zeros((n, k))
    if sys.master is not None:
        masters = np.unique(sys.master)
        col = -np.ones(n, dtype=np.int64)
        col[masters] = np.arange(masters.size)
        T = sp.csr_matrix((np.ones(n), (np.arange(n), col[sys.master])), shape=(n, masters.size))
        return T, g
    free = np.ones(n, dtype=bool)
    if sys.dirichlet is not None:
        dofs, vals = sys.dirichlet
        free[dofs] = False
        vals = np.asarray(vals, dtype=np.float64)
        g[dofs] = vals.reshape(len(dofs), -1)
    idx = np.flatnonzero(free)
    T = sp.csr_matrix((np.ones(idx.size), (idx, np.arange(idx.size))), shape=(n, idx.size))
    return T, g


def solve(sys: LinearSystem, rtol: float = 1e-10, return_info: bool = False):
    """Solve the constrained system; returns the nodal field(s).

    The saddle-point system is factorised once; the solution is accepted when
    its normwise backward error ``||r|| / (||M|| ||x|| + ||b||)`` is at most
    ``rtol`` (after up to three refinement steps). Raises
    :class:`SingularSystemError` otherwise, or if the factorisation fails.
    """
    rhs = sys.rhs if sys.rhs.ndim == 2 else sys.rhs[:, None]
    T, g = _reduction(sys)
    if g.shape[1] != rhs.shape[1]:
        g = np.repeat(g, rhs.shape[1], axis=1)
    A = (T.T @ sys.stiffness @ T).tocsr()
    b = T.T @ (rhs - sys.stiffness @ g)
    rows = [c for c, _ in sys.constraints] + list(sys.gauge)
    targets = np.array([t for _, t in sys.constraints] + [0.0] * len(sys.gauge))
    nz = A.shape[0]
    info = {"n_free": nz, "n_multipliers": len(rows), "residual": 0.0}
    if nz == 0:
        u = g
    else:
        if rows:
            C = sp.csr_matrix(np.vstack(rows)) @ T
            rhs_c = targets[:, None] - np.vstack(rows) @ g
            M = sp.bmat([[A, C.T], [C, None]], format="csc")
            full_b = np.vstack([b, rhs_c])
        else:
            M = A.tocsc()
            full_b = b
        try:
            lu = spla.splu(M)
        except RuntimeError as exc:
            raise SingularSystemError(str(exc), _nullity_estimate(sys, T, A, rows)) from None
        piv = np.abs(lu.U.diagonal())
        tiny = int(np.sum(piv <= PIVOT_TOL * piv.max()))
        if tiny:
            raise SingularSystemError("factorisation met vanishing pivots",
                                      max(tiny, _nullity_estimate(sys, T, A, rows)))
        x = lu.solve(full_b)
        # normwise backward error ||r|| / (||M|| ||x|| + ||b||), infinity norms
        norm_m = abs(M).sum(axis=1).max()

        def backward_error(x):
            r = full_b - M @ x
            den = norm_m * np.abs(x).max(axis=0) + np.abs(full_b).max(axis=0)
            den = np.where(den > 0, den, 1.0)
            return r, float((np.abs(r).max(axis=0) / den).max())

        r, err = backward_error(x)
        for _ in range(3):
            if not np.isfinite(err) or err <= rtol:
                break
            x = x + lu.solve(r)
            r, err = backward_error(x)
        info["residual"] = err
        if not np.all(np.isfinite(x)) or err > rtol:
            raise SingularSystemError(f"relative residual {err:.2e} above {rtol:g}",
                                      _nullity_estimate(sys, T, A, rows))
        u = T @ x[:nz] + g
    if sys.zero_average:
        for c, r in enumerate(average_rows(sys.mesh)):
            u[c::2] -= r @ u
    out = u if sys.rhs.ndim == 2 else u[:, 0]
    return (out, info) if return_info else out


def rigid_modes(mesh: Mesh) -> np.ndarray:
    y = mesh.nodes - mesh.centroid
    R = np.zeros((mesh.n_dofs, 3))
    R[0::2, 0] = 1.0
    R[1::2, 1] = 1.0
    R[0::2, 2] = -y[:, 1]
    R[1::2, 2] = y[:, 0]
    return R


def _nullity_estimate(sys, T, A, rows) -> int:
    """Count rigid modes representable in the reduced space and left free."""
    R = rigid_modes(sys.mesh)
    # T only selects or sums dofs, so T^T T is diagonal
    d = np.asarray((T.T @ T).diagonal()).ravel()
    z = (T.T @ R) / np.where(d > 0, d, 1.0)[:, None]
    count = 0
    # representable, zero-energy directions left free by the constraint rows
    basis = []
    for k in range(R.shape[1]):
        zk = z[:, k]
        if np.linalg.norm(T @ zk - R[:, k]) > 1e-8 * np.linalg.norm(R[:, k]):
            continue
        if np.linalg.norm(A @ zk) > 1e-8 * max(1.0, abs(A).max()) * np.linalg.norm(zk):
            continue
        basis.append(zk)
    if basis:
        Z = np.column_stack(basis)
        if rows:
            Cz = (np.vstack(rows) @ T) @ Z
            s = np.linalg.svd(Cz, compute_uv=False)
            count = Z.shape[1] - int(np.sum(s > 1e-10 * max(1.0, s.max())))
        else:
            count = Z.shape[1]
    return count


# --------------------------------------------------------------------------
# boundary discretisation


@dataclass(eq=False)
class BoundaryDiscretisation:
    """The closed outer boundary in canonical (anticlockwise) node order."""
    mesh: Mesh
    nodes: np.ndarray        # mesh node index per loop position
    edges: np.ndarray        # (n_edges, order+1) loop positions: ends first, then mid
    normals: np.ndarray      # (n_edges, 2)
    lengths: np.ndarray      # (n_edges,)
    mass_scalar: sp.csr_matrix

    @property
    def n_nodes(self):
        return self.nodes.size

    @property
    def n_values(self):
        return 2 * self.nodes.size

    @cached_property
    def dofs(self) -> np.ndarray:
        return np.column_stack([2 * self.nodes, 2 * self.nodes + 1]).ravel()

    @cached_property
    def mass(self) -> sp.csr_matrix:
        """Vector-valued boundary mass matrix (interleaved components)."""
        return sp.kron(self.mass_scalar, sp.identity(2), format="csr")

    @property
    def perimeter(self) -> float:
        return float(self.lengths.sum())

    @property
    def coords(self) -> np.ndarray:
        return self.mesh.nodes[self.nodes]

    @property
    def mesh_hash(self) -> str:
        return self.mesh.mesh_hash

    def edge_weights(self) -> np.ndarray:
        """``int_edge N_a ds`` for the local nodes of each edge."""
        if self.edges.shape[1] == 2:
            return np.outer(self.lengths, [0.5, 0.5])
        return np.outer(self.lengths, [1 / 6, 1 / 6, 4 / 6])

    def moment_operator(self) -> np.ndarray:
        """Rows for ``int_G u_i n_j ds`` in order (11, 12, 21, 22)."""
        G = np.zeros((4, self.n_values))
        w = self.edge_weights()
        for (i, j) in ((0, 0), (0, 1), (1, 0), (1, 1)):
            row = G[2 * i + j]
            contrib = w * self.normals[:, j, None]
            np.add.at(row, 2 * self.edges + i, contrib)
        return G

    def boundary_moment(self, trace) -> np.ndarray:
        """``<u (x) n>`` over the boundary, normalised by the enclosed area (2x2)."""
        return (self.moment_operator() @ trace).reshape(2, 2) / self.mesh.area

    def integral(self, trace) -> np.ndarray:
        w = np.zeros(self.n_nodes)
        np.add.at(w, self.edges, self.edge_weights())
        t = np.asarray(trace).reshape(-1, 2)
        return w @ t

    def inner(self, a, b) -> float:
        return float(a @ (self.mass @ b))

    @cached_property
    def quarter_turn_shift(self) -> int:
        n = self.n_nodes
        if n % 4:
            raise ValueError("boundary is not four-fold symmetric")
        return n // 4

    def check_symmetric(self, tol=1e-9):
        """Raise unless the loop is invariant under the quarter-turn shift."""
        y = self.coords - self.mesh.centroid
        s = self.quarter_turn_shift
        rot = np.column_stack([-y[:, 1], y[:, 0]])
        if np.abs(np.roll(rot, s, axis=0) - y).max() > tol * np.abs(y).max():
            raise ValueError("boundary discretisation is not symmetric under a quarter turn")

    def rotate(self, trace, quarter_turns: int = 1) -> np.ndarray:
        """Anticlockwise quarter turn of a boundary function.

        ``(Q u)(y) = Q u(Q^T y)``: vector components rotate and loop positions
        shift by a quarter of the perimeter. Works column-wise on 2D input.
        """
        t = np.asarray(trace, dtype=np.float64)
        squeeze = t.ndim == 1
        if squeeze:
            t = t[:, None]
        s = self.quarter_turn_shift
        v = t.reshape(self.n_nodes, 2, -1)
        for _ in range(quarter_turns % 4):
            v = np.roll(np.stack([-v[:, 1], v[:, 0]], axis=1), s, axis=0)
        out = v.reshape(self.n_values, -1)
        return out[:, 0] if squeeze else out


def boundary_discretisation(mesh: Mesh, curve=SIDES) -> BoundaryDiscretisation:
    """Closed-boundary mass matrix over the given sides (all four required)."""
    if set(curve) != set(SIDES):
        raise ValueError("boundary curve must be closed (all four sides)")
    loop = mesh.boundary_loop
    pos = {int(n): k for k, n in enumerate(loop)}
    step = mesh.order
    edges = []
    for s in SIDES:
        seq = mesh.sides[s]
        for k in range(0, len(seq) - 1, step):
            if step == 1:
                edges.append((pos[int(seq[k])], pos[int(seq[k + 1])]))
            else:
                edges.append((pos[int(seq[k])], pos[int(seq[k + 2])], pos[int(seq[k + 1])]))
    edges = np.array(edges, dtype=np.int64)
    xy = mesh.nodes[loop]
    t = xy[edges[:, 1]] - xy[edges[:, 0]]
    lengths = np.hypot(t[:, 0], t[:, 1])
    normals = np.column_stack([t[:, 1], -t[:, 0]]) / lengths[:, None]
    if step == 1:
        local = np.array([[2.0, 1.0], [1.0, 2.0]]) / 6.0
    else:
        local = np.array([[4.0, -1.0, 2.0], [-1.0, 4.0, 2.0], [2.0, 2.0, 16.0]]) / 30.0
    nl = local.shape[0]
    rows = np.repeat(edges, nl, axis=1).ravel()
    cols = np.tile(edges, (1, nl)).ravel()
    vals = (lengths[:, None, None] * local[None]).ravel()
    M = sp.coo_matrix((vals, (rows, cols)), shape=(loop.size, loop.size)).tocsr()
    return BoundaryDiscretisation(mesh, loop, edges, normals, lengths, M)


def trace(field_values, bd: BoundaryDiscretisation) -> np.ndarray:
    """Boundary values in canonical loop order, components interleaved."""
    f = np.asarray(field_values)
    if f.shape[0] != bd.mesh.n_dofs:
        raise ValueError(f"field has {f.shape[0]} dofs, mesh has {bd.mesh.n_dofs}")
    return f[bd.dofs]


# --------------------------------------------------------------------------
# post-processing


def cell_strains(mesh: Mesh, u) -> np.ndarray:
    """Voigt strain at the first quadrature point of each cell (exact for P1)."""
    J, det = mesh.jacobians
    invJ = np.linalg.inv(J)
    g = np.einsum("eji,aj->eai", invJ, mesh.ref.dshape[0])
    ue = np.asarray(u)[mesh.cell_dofs].reshape(mesh.cells.shape[0], -1, 2)
    grad = np.einsum("eai,eaj->eij", ue, g)  # du_i/dx_j
    return np.column_stack([grad[:, 0, 0], grad[:, 1, 1], grad[:, 0, 1] + grad[:, 1, 0]])


def nodal_mass(mesh: Mesh) -> sp.csr_matrix:
    """Scalar consistent mass matrix."""
    ref = mesh.ref
    _, det = mesh.jacobians
    loc = np.einsum("q,qa,qb->ab", ref.weights, ref.shape, ref.shape)
    Me = det[:, None, None] * loc[None]
    nl = mesh.cells.shape[1]
    rows = np.repeat(mesh.cells, nl, axis=1).ravel()
    cols = np.tile(mesh.cells, (1, nl)).ravel()
    return sp.coo_matrix((Me.ravel(), (rows, cols)), shape=(mesh.n_nodes, mesh.n_nodes)).tocsr()


def save_field(path, values, mesh_hash: str, ordering: str = "node-interleaved") -> None:
    path = Path(path)
    v = np.ascontiguousarray(values, dtype="<f8")
    v.tofile(path.with_suffix(".bin"))
    meta = {"mesh_hash": mesh_hash, "ordering": ordering, "n_dofs": int(v.shape[0])}
    if v.ndim == 2:
        meta["n_cols"] = int(v.shape[1])
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_field(path, mesh_hash: str | None = None):
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    if mesh_hash is not None and meta["mesh_hash"] != mesh_hash:
        raise ValueError(f"{path}: mesh hash {meta['mesh_hash']} does not match {mesh_hash}")
    v = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
    cols = meta.get("n_cols")
    expected = meta["n_dofs"] * (cols or 1)
    if v.size != expected:
        raise ValueError(f"{path}: expected {expected} values, found {v.size}")
    return (v.reshape(meta["n_dofs"], cols) if cols else v), meta

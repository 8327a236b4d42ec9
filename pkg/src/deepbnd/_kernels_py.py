"""Pure NumPy versions of the element kernels.

Used when the compiled extension is unavailable (or when
``DEEPBND_PURE_PYTHON=1``). Both backends agree to round-off.
"""
import numpy as np


def element_matrices(nodes, cells, dshape, qweights, D):
    """Element stiffness, strain-load and stiffness-integral blocks.

    Parameters
    ----------
    nodes : (n_nodes, 2) float array
    cells : (n_cells, n_loc) int array
        The first three local nodes are the (affine) triangle vertices.
    dshape : (n_q, n_loc, 2) float array
        Reference-element shape function gradients at the quadrature points.
    qweights : (n_q,) float array
        Reference quadrature weights (summing to the reference area 1/2).
    D : (n_cells, n_q, 3, 3) float array
        Voigt material matrix at each quadrature point.

    Returns
    -------
    Ke : (n_cells, 2 n_loc, 2 n_loc)
        ``int B^T D B``.
    Fe : (n_cells, 2 n_loc, 3)
        ``int B^T D`` (column k is the load of the unit Voigt strain e_k).
    Se : (n_cells, 3, 3)
        ``int D``.
    detj : (n_cells,)
        Jacobian determinants; cells with ``detj <= 0`` are left zero.
    """
    ncell, nloc = cells.shape
    x = nodes[cells[:, :3]]
    J = np.empty((ncell, 2, 2))
    J[:, :, 0] = x[:, 1] - x[:, 0]
    J[:, :, 1] = x[:, 2] - x[:, 0]
    detj = J[:, 0, 0] * J[:, 1, 1] - J[:, 0, 1] * J[:, 1, 0]
    ok = detj > 0.0
    safe = np.where(ok, detj, 1.0)
    invJ = np.empty_like(J)
    invJ[:, 0, 0] = J[:, 1, 1] / safe
    invJ[:, 0, 1] = -J[:, 0, 1] / safe
    invJ[:, 1, 0] = -J[:, 1, 0] / safe
    invJ[:, 1, 1] = J[:, 0, 0] / safe
    # physical gradients: g = J^{-T} g_ref
    g = np.einsum("eji,qaj->eqai", invJ, dshape)
    nq = qweights.shape[0]
    B = np.zeros((ncell, nq, 3, 2 * nloc))
    B[:, :, 0, 0::2] = g[..., 0]
    B[:, :, 2, 0::2] = g[..., 1]
    B[:, :, 1, 1::2] = g[..., 1]
    B[:, :, 2, 1::2] = g[..., 0]
    w = qweights[None, :] * np.where(ok, detj, 0.0)[:, None]
    DB = np.einsum("eqik,eqkj->eqij", D, B)
    Ke = np.einsum("eq,eqki,eqkj->eij", w, B, DB)
    Fe = np.einsum("eq,eqki->eik", w, DB)
    Se = np.einsum("eq,eqik->eik", w, D)
    return Ke, Fe, Se, detj


def inclusion_indicator(points, x0, y0, spacing, nx, ny, centres, radii, gamma):
    """Phase contrast at each point for a lattice of one ball per square block.

    Block ``(iy, ix)`` holds ball ``iy * nx + ix``; points outside the lattice
    get 1.
    """
    ix = np.floor((points[:, 0] - x0) / spacing).astype(np.int64)
    iy = np.floor((points[:, 1] - y0) / spacing).astype(np.int64)
    inside = (ix >= 0) & (iy >= 0) & (ix < nx) & (iy < ny)
    b = np.where(inside, iy * nx + ix, 0)
    d2 = ((points - centres[b]) ** 2).sum(axis=1)
    hit = inside & (d2 < radii[b] ** 2)
    return np.where(hit, gamma, 1.0)

"""Learned boundary conditions: two MLPs plus reduced bases.

The axial network predicts coefficients of the response to ``E11``, the shear
network those of ``E12``. The ``E22`` response is the axial one for the
quarter-turned microstructure, rotated back onto the original boundary.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import rb
from .corrector import UNIT_STRAINS, CellProblem
from .micro import LatticeConfig, permute_params, theta_from_radii
from .mlp import MlpModel, Scaling, predict


@dataclass(eq=False)
class Submodel:
    net: MlpModel
    scaling: Scaling
    basis: rb.ReducedBasis

    def __post_init__(self):
        if self.net.layer_dims[-1] != self.basis.n_rb:
            raise ValueError(f"network outputs {self.net.layer_dims[-1]} coefficients, "
                             f"basis has {self.basis.n_rb} functions")

    def coefficients(self, theta) -> np.ndarray:
        if self.basis.n_rb == 0:
            return np.zeros((np.atleast_2d(theta).shape[0], 0))
        return np.atleast_2d(predict(self.net, self.scaling, theta))


@dataclass(eq=False)
class DeepBndModel:
    axial: Submodel
    shear: Submodel
    lattice: LatticeConfig
    bd: object                     # fem.BoundaryDiscretisation of the reduced window
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for sub in (self.axial, self.shear):
            if sub.basis.n_gamma != self.bd.n_values:
                raise ValueError("basis does not live on the model's boundary discretisation")
            if sub.basis.mesh_hash and sub.basis.mesh_hash != self.bd.mesh_hash:
                raise ValueError("basis mesh hash does not match the boundary discretisation")
        self.bd.check_symmetric()
        self.vertical_basis = rb.rotate_basis(self.axial.basis, self.bd)

    def theta(self, p_c) -> np.ndarray:
        return theta_from_radii(p_c, self.lattice.r_min, self.lattice.r_max)

    def coefficients(self, p_c) -> list:
        """Predicted coefficients ``[beta1, beta2, beta3]`` for one parameter vector."""
        p_c = np.asarray(p_c, dtype=np.float64)
        if p_c.shape != (self.lattice.n_balls,):
            raise ValueError(f"expected {self.lattice.n_balls} radii")
        b1 = self.axial.coefficients(self.theta(p_c))[0]
        b2 = self.axial.coefficients(self.theta(permute_params(p_c, 1)))[0]
        b3 = self.shear.coefficients(self.theta(p_c))[0]
        return [b1, b2, b3]

    def unit_traces(self, p_c) -> np.ndarray:
        """Predicted traces for the three unit strains, as columns."""
        b1, b2, b3 = self.coefficients(p_c)
        return np.column_stack([rb.reconstruct(b1, self.axial.basis),
                                rb.reconstruct(b2, self.vertical_basis),
                                rb.reconstruct(b3, self.shear.basis)])

    def truncated(self, n: int) -> "DeepBndModel":
        """Model that keeps only the first ``n`` outputs of each network."""
        subs = []
        for s in (self.axial, self.shear):
            k = min(n, s.basis.n_rb)
            W = [w.copy() for w in s.net.weights]
            b = [v.copy() for v in s.net.biases]
            W[-1], b[-1] = W[-1][:k], b[-1][:k]
            sc = Scaling(s.scaling.beta_min[:k], s.scaling.beta_max[:k])
            subs.append(Submodel(MlpModel(W, b), sc, s.basis.truncate(k)))
        return DeepBndModel(subs[0], subs[1], self.lattice, self.bd, dict(self.meta))


def predict_bc(dbm: DeepBndModel, p_c, p_eps) -> np.ndarray:
    """Boundary trace ``sum_I p_eps[I] * (predicted response to unit load I)``."""
    return dbm.unit_traces(p_c) @ np.asarray(p_eps, dtype=np.float64)


@dataclass(frozen=True)
class LearnedSpace:
    """Dirichlet datum and the strain to pair with it in the reduced solve."""
    trace: np.ndarray
    strain: np.ndarray


def make_learned_space(dbm: DeepBndModel, p_c, p_eps, corrected: bool = False) -> LearnedSpace:
    """Space of fluctuations matching the predicted trace.

    ``corrected=True`` gives the equivalent formulation whose datum has zero
    symmetric boundary moment and whose strain carries the removed part.
    """
    w = predict_bc(dbm, p_c, p_eps)
    return learned_space_from_trace(w, p_eps, dbm.bd, corrected)


def learned_space_from_trace(w, eps, bd, corrected: bool = False) -> LearnedSpace:
    eps = np.asarray(eps, dtype=np.float64)
    if not corrected:
        return LearnedSpace(np.asarray(w, dtype=np.float64), eps)
    wp, et = rb.admissibility_correct(w, bd)
    return LearnedSpace(wp, eps + et)


def solve_learned(problem: CellProblem, space: LearnedSpace):
    """Fluctuation and homogenised stress in a learned space."""
    u = problem.solve(space.strain, "trace", space.trace)
    return u, problem.stress(space.strain, u)


def deepbnd_tangent(dbm: DeepBndModel, p_c, problem: CellProblem) -> np.ndarray:
    """Reduced-window tangent with predicted boundary traces (one factorisation)."""
    traces = dbm.unit_traces(p_c)
    U = problem.solve(UNIT_STRAINS, "trace", traces)
    return problem.stress(UNIT_STRAINS, U)


@dataclass(frozen=True)
class ErrorSplit:
    total: float
    dnn: float
    pod: float

    def identity_gap(self) -> float:
        """Relative gap in ``E_T^2 = E_DNN^2 + E_POD^2``."""
        lhs = self.total ** 2
        rhs = self.dnn ** 2 + self.pod ** 2
        return abs(lhs - rhs) / max(lhs, rhs, 1e-300)


def error_split(W, beta_hat, basis: rb.ReducedBasis) -> ErrorSplit:
    """Errors of predicted coefficients ``beta_hat`` against traces ``W`` (rows).

    ``E_POD`` is the mean projection error of ``W`` onto the basis; on the
    snapshot set the basis came from, it equals the eigenvalue tail sum.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    beta_hat = np.atleast_2d(np.asarray(beta_hat, dtype=np.float64)).reshape(W.shape[0], -1)
    beta = rb.project(W, basis)
    R = rb.reconstruct(beta_hat, basis) - W
    e_t = np.mean(np.einsum("ij,ij->i", R, (basis.mass @ R.T).T))
    e_dnn = np.mean(np.sum((beta_hat - beta) ** 2, axis=1))
    e_pod = rb.projection_mse(W, basis, basis.n_rb)
    return ErrorSplit(float(np.sqrt(max(e_t, 0.0))), float(np.sqrt(e_dnn)),
                      float(np.sqrt(max(e_pod, 0.0))))


def error_decomposition(W, P, dbm: DeepBndModel, load: int) -> ErrorSplit:
    """Split of the prediction error over a dataset of traces ``W`` and radii ``P``."""
    if load == 1:
        sub, basis, params = dbm.axial, dbm.axial.basis, P
    elif load == 2:
        sub, basis = dbm.axial, dbm.vertical_basis
        params = np.array([permute_params(p, 1) for p in np.atleast_2d(P)])
    elif load == 3:
        sub, basis, params = dbm.shear, dbm.shear.basis, P
    else:
        raise ValueError("load must be 1, 2 or 3")
    beta_hat = sub.coefficients(dbm.theta(np.atleast_2d(params)))
    return error_split(W, beta_hat, basis)

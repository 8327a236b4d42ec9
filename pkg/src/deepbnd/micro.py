"""Two-phase lattice microstructures and their parameter sampling.

A microstructure is a square cell of side ``L`` holding an ``n x n`` lattice
of disjoint circular inclusions, one per lattice block. Coordinates are local
and centred, so the cell is ``[-L/2, L/2]^2``. Inclusions are stiffer than the
matrix by the contrast factor ``gamma``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

#: Lamé pair of the matrix phase (E = 1, nu = 0.3).
LAME_MATRIX = (0.576923, 0.384615)
GAMMA = 10.0


@dataclass(frozen=True)
class LatticeConfig:
    n_side: int = 4
    length: float = 1.0
    r_min: float | None = None
    r_max: float | None = None
    gamma: float = GAMMA
    lame: tuple[float, float] = LAME_MATRIX

    def __post_init__(self):
        if self.n_side < 1:
            raise ValueError("n_side must be positive")
        block = self.length / self.n_side
        if self.r_max is None:
            object.__setattr__(self, "r_max", 0.4 * block)
        if self.r_min is None:
            object.__setattr__(self, "r_min", 0.1 * block)
        object.__setattr__(self, "lame", tuple(float(v) for v in self.lame))
        if not 0.0 < self.r_min < self.r_max:
            raise ValueError("need 0 < r_min < r_max")
        if self.r_max > 0.5 * block:
            raise ValueError("r_max exceeds half the lattice spacing")
        if self.gamma <= 0 or min(self.lame) <= 0:
            raise ValueError("gamma and the Lamé pair must be positive")

    @property
    def spacing(self) -> float:
        return self.length / self.n_side

    @property
    def n_balls(self) -> int:
        return self.n_side ** 2

    def centres(self) -> np.ndarray:
        """Ball centres, row-major with rows running along +y."""
        n, h = self.n_side, self.spacing
        k = (np.arange(n) + 0.5) * h - 0.5 * self.length
        yy, xx = np.meshgrid(k, k, indexing="ij")
        return np.column_stack([xx.ravel(), yy.ravel()])

    def to_dict(self) -> dict:
        return {"n_side": self.n_side, "L_H": self.length, "r_min": self.r_min,
                "r_max": self.r_max, "gamma": self.gamma, "lame": list(self.lame)}

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeConfig":
        return cls(n_side=int(d["n_side"]), length=float(d["L_H"]),
                   r_min=float(d["r_min"]), r_max=float(d["r_max"]),
                   gamma=float(d["gamma"]), lame=tuple(d["lame"]))


@dataclass(frozen=True)
class Microstructure:
    config: LatticeConfig
    radii: np.ndarray
    centres: np.ndarray = field(default=None)

    def __post_init__(self):
        radii = np.asarray(self.radii, dtype=np.float64).copy()
        radii.setflags(write=False)
        object.__setattr__(self, "radii", radii)
        if self.centres is None:
            object.__setattr__(self, "centres", self.config.centres())
        if radii.shape != (self.config.n_balls,):
            raise ValueError(f"expected {self.config.n_balls} radii, got {radii.shape}")
        c = self.config
        tol = 1e-12 * c.r_max
        if radii.min() < c.r_min - tol or radii.max() > c.r_max + tol:
            raise ValueError("radius outside [r_min, r_max]")

    @classmethod
    def from_theta(cls, config: LatticeConfig, theta) -> "Microstructure":
        return cls(config, radii_from_theta(theta, config.r_min, config.r_max))

    @property
    def theta(self) -> np.ndarray:
        return theta_from_radii(self.radii, self.config.r_min, self.config.r_max)

    def chi(self, points) -> np.ndarray:
        """Contrast field: gamma inside an inclusion, 1 elsewhere."""
        c = self.config
        h = c.spacing
        return kernels.inclusion_indicator(np.atleast_2d(points), -0.5 * c.length,
                                           -0.5 * c.length, h, c.n_side, c.n_side,
                                           self.centres, self.radii, c.gamma)

    def block(self, start: tuple[int, int], n: int) -> "Microstructure":
        """Sub-lattice of ``n x n`` balls starting at block (row, col), re-centred."""
        c = self.config
        i0, j0 = start
        if i0 < 0 or j0 < 0 or i0 + n > c.n_side or j0 + n > c.n_side:
            raise ValueError("block outside the lattice")
        idx = (np.arange(i0, i0 + n)[:, None] * c.n_side + np.arange(j0, j0 + n)).ravel()
        sub = LatticeConfig(n_side=n, length=n * c.spacing, r_min=c.r_min,
                            r_max=c.r_max, gamma=c.gamma, lame=c.lame)
        return Microstructure(sub, self.radii[idx])

    def central_block(self, n: int) -> "Microstructure":
        off = self.config.n_side - n
        if off % 2:
            raise ValueError("central block needs n_side - n even")
        return self.block((off // 2, off // 2), n)

    def volume_fraction(self) -> float:
        return float(np.pi * np.sum(self.radii ** 2) / self.config.length ** 2)

    def to_dict(self) -> dict:
        d = self.config.to_dict()
        d["lame"] = list(self.config.lame)
        d["radii"] = [float(r) for r in self.radii]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Microstructure":
        return cls(LatticeConfig.from_dict(d), np.asarray(d["radii"], dtype=np.float64))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "Microstructure":
        return cls.from_dict(json.loads(Path(path).read_text()))


def isotropic_voigt(lam: float, mu: float) -> np.ndarray:
    """Voigt matrix of ``lam I x I + 2 mu I^s`` (engineering shear strain)."""
    return np.array([[lam + 2 * mu, lam, 0.0],
                     [lam, lam + 2 * mu, 0.0],
                     [0.0, 0.0, mu]])


def stiffness_at(m: Microstructure, y) -> np.ndarray:
    """Voigt stiffness at a single point ``y``."""
    chi = m.chi(np.asarray(y, dtype=np.float64).reshape(1, 2))[0]
    return chi * isotropic_voigt(*m.config.lame)


# --------------------------------------------------------------------------
# sampling


@dataclass(frozen=True)
class SampleSet:
    theta: np.ndarray
    seed: int
    method: str = "lhs"

    @property
    def shape(self):
        return self.theta.shape

    def save(self, path) -> None:
        path = Path(path)
        np.ascontiguousarray(self.theta, dtype="<f8").tofile(path.with_suffix(".bin"))
        meta = {"rows": int(self.theta.shape[0]), "cols": int(self.theta.shape[1]),
                "seed": int(self.seed), "method": self.method}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "SampleSet":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        theta = np.fromfile(path.with_suffix(".bin"), dtype="<f8")
        if theta.size != meta["rows"] * meta["cols"]:
            raise ValueError(f"{path}: sample file size does not match its sidecar")
        return cls(theta.reshape(meta["rows"], meta["cols"]), meta["seed"], meta["method"])


def rng(seed: int) -> np.random.Generator:
    """Counter-based generator so streams are reproducible across platforms."""
    return np.random.Generator(np.random.Philox(int(seed)))


def lhs_sample(n_samples: int, n_dims: int, seed: int) -> SampleSet:
    """Latin hypercube sample on ``[-1, 1]^n_dims``.

    Each dimension is split into ``n_samples`` equal strata; every stratum
    receives exactly one point, uniformly placed inside it.
    """
    if n_samples < 1 or n_dims < 1:
        raise ValueError("n_samples and n_dims must be positive")
    g = rng(seed)
    u = np.empty((n_samples, n_dims))
    for d in range(n_dims):
        u[:, d] = (g.permutation(n_samples) + g.random(n_samples)) / n_samples
    return SampleSet(2.0 * u - 1.0, seed, "lhs")


def uniform_sample(n_samples: int, n_dims: int, seed: int) -> SampleSet:
    return SampleSet(rng(seed).uniform(-1.0, 1.0, size=(n_samples, n_dims)), seed,
                     "uniform-iid")


def is_stratified(theta) -> bool:
    """True when every column puts exactly one point in each stratum of [-1, 1]."""
    theta = np.asarray(theta)
    n = theta.shape[0]
    if np.any(theta < -1) or np.any(theta > 1):
        return False
    k = np.minimum(np.floor((theta + 1.0) * 0.5 * n).astype(np.int64), n - 1)
    return all(np.array_equal(np.sort(k[:, d]), np.arange(n)) for d in range(theta.shape[1]))


def radii_from_theta(theta, r_min: float, r_max: float) -> np.ndarray:
    """Log-uniform map of ``theta`` in [-1, 1] onto ``[r_min, r_max]``."""
    theta = np.asarray(theta, dtype=np.float64)
    if np.any(np.abs(theta) > 1.0):
        raise ValueError("theta must lie in [-1, 1]")
    if not 0.0 < r_min < r_max:
        raise ValueError("need 0 < r_min < r_max")
    a = 0.5 * np.log(r_max * r_min)
    b = 0.5 * np.log(r_max / r_min)
    r = np.exp(a + theta * b)
    # pin the endpoints against exp/log round-off
    return np.clip(r, r_min, r_max)


def theta_from_radii(radii, r_min: float, r_max: float) -> np.ndarray:
    a = 0.5 * np.log(r_max * r_min)
    b = 0.5 * np.log(r_max / r_min)
    return np.clip((np.log(np.asarray(radii, dtype=np.float64)) - a) / b, -1.0, 1.0)


def permute_params(p_c, quarter_turns: int = 1) -> np.ndarray:
    """Reorder lattice parameters to describe the pattern turned clockwise.

    The result, rotated anticlockwise by ``quarter_turns * pi/2``, reproduces
    the input pattern. For a 2x2 lattice ``(1, 2, 3, 4) -> (2, 4, 1, 3)``.
    """
    p = np.asarray(p_c)
    n = int(round(np.sqrt(p.shape[0])))
    if n * n != p.shape[0]:
        raise ValueError("parameter vector length is not a perfect square")
    if not -3 <= quarter_turns <= 3:
        raise ValueError("quarter_turns must lie in -3..3")
    grid = p.reshape(n, n)
    # rows run along +y; a clockwise turn sends (row i, col j) -> (n-1-j, i)
    for _ in range(quarter_turns % 4):
        new = np.empty_like(grid)
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        new[n - 1 - j, i] = grid[i, j]
        grid = new
    return grid.reshape(-1).copy()

"""Lattice densities and critical points of the granular-media free energy.

A measure is critical when its density is proportional to
``exp(-(V + U * mu) / sigma^2)``. Quadratic models have the Gaussian solution
in closed form; general models are solved by a damped fixed-point iteration
on a grid, started from several initial densities to expose every branch.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal

from .transport import WeightedSampleMeasure, wasserstein

__all__ = [
    "GridSpec",
    "MeasureGrid",
    "GridTooSmallError",
    "FixedPointResult",
    "Branch",
    "lattice_convolve",
    "gaussian_reference",
    "gaussian_grid",
    "fixed_point_solve",
    "enumerate_branches",
    "grid_wasserstein",
    "write_grid",
    "read_grid",
]

BOUNDARY_MASS_MAX = 1e-6


class GridTooSmallError(ValueError):
    """The represented mass reaches the edge of the lattice."""


@dataclass(frozen=True)
class GridSpec:
    """Cell-centred lattice ``lower + (i + 1/2) h`` covering ``[lower, upper]`` per axis."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    h: float

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi) or not 1 <= len(lo) <= 2:
            raise ValueError("grids support d in {1, 2}")
        if self.h <= 0 or any(b <= a for a, b in zip(lo, hi)):
            raise ValueError("need h > 0 and upper > lower")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def symmetric(cls, half_width: float, h: float, d: int = 1) -> "GridSpec":
        return cls((-half_width,) * d, (half_width,) * d, h)

    @property
    def d(self) -> int:
        return len(self.lower)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(int(round((b - a) / self.h)) for a, b in zip(self.lower, self.upper))

    def empty(self) -> "MeasureGrid":
        return MeasureGrid(np.asarray(self.lower), self.h, np.zeros(self.shape))


@dataclass(frozen=True)
class MeasureGrid:
    """Probability density sampled at the centres of a regular lattice (d <= 2)."""

    lower: np.ndarray
    h: float
    density: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        rho = np.asarray(self.density, dtype=float)
        if rho.ndim != lo.size or rho.ndim not in (1, 2):
            raise ValueError("density rank must match the number of axes (1 or 2)")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "density", rho)

    @property
    def d(self) -> int:
        return self.density.ndim

    @property
    def shape(self) -> tuple[int, ...]:
        return self.density.shape

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def axis(self, a: int) -> np.ndarray:
        return self.lower[a] + (np.arange(self.shape[a]) + 0.5) * self.h

    def centers(self) -> np.ndarray:
        """Cell centres as an ``(N, d)`` array, C order."""
        axes = np.meshgrid(*(self.axis(a) for a in range(self.d)), indexing="ij")
        return np.stack([g.ravel() for g in axes], axis=1)

    def masses(self) -> np.ndarray:
        return self.density * self.cell_volume

    def mass(self) -> float:
        return float(self.masses().sum())

    def normalized(self) -> "MeasureGrid":
        return MeasureGrid(self.lower, self.h, self.density / self.mass())

    def as_measure(self, floor: float = 0.0) -> WeightedSampleMeasure:
        """Weighted sample at cell centres with cell-mass weights."""
        w = self.masses().ravel()
        keep = w > floor
        w = w[keep]
        return WeightedSampleMeasure(self.centers()[keep], w / w.sum())

    def mean(self) -> np.ndarray:
        return self.masses().ravel() @ self.centers() / self.mass()

    def covariance(self) -> np.ndarray:
        c = self.centers() - self.mean()
        w = self.masses().ravel() / self.mass()
        return (c * w[:, None]).T @ c

    def variance(self) -> float:
        """Per-axis variance averaged over axes."""
        return float(np.trace(self.covariance()) / self.d)

    def boundary_mass(self) -> float:
        m = self.masses()
        if self.d == 1:
            return float(m[0] + m[-1])
        inner = m[1:-1, 1:-1].sum() if min(m.shape) > 2 else 0.0
        return float(m.sum() - inner)

    def validate(self, mass_tol: float = 1e-10) -> None:
        if np.any(self.density < 0):
            raise ValueError("negative density")
        if abs(self.mass() - 1.0) > mass_tol:
            raise ValueError(f"grid mass {self.mass()!r} differs from 1")
        if self.boundary_mass() > BOUNDARY_MASS_MAX:
            raise GridTooSmallError(
                f"boundary shell carries mass {self.boundary_mass():.3g} > {BOUNDARY_MASS_MAX}"
            )

    def translated(self, cells: Sequence[int]) -> "MeasureGrid":
        """Same density values on a lattice shifted by whole cells."""
        return MeasureGrid(self.lower + np.asarray(cells, dtype=float) * self.h, self.h, self.density)

    def spec(self) -> GridSpec:
        return GridSpec(tuple(self.lower), tuple(self.lower + np.asarray(self.shape) * self.h), self.h)


def _offsets(shape: tuple[int, ...], h: float) -> np.ndarray:
    """Lattice differences ``(i - j) h`` for every index offset, shape ``(2N-1, ..., d)``."""
    axes = [np.arange(-(n - 1), n) * h for n in shape]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack(g, axis=-1)


def lattice_convolve(grid: MeasureGrid, fn) -> np.ndarray:
    """``sum_j fn(x_i - x_j) rho_j h^d`` at every cell ``i``.

    ``fn`` maps ``(..., d)`` offsets to scalars or ``d``-vectors; the output
    has shape ``grid.shape`` or ``grid.shape + (d,)``. 1-D grids use direct
    summation; 2-D grids let scipy choose between direct and FFT products.
    """
    off = _offsets(grid.shape, grid.h)
    K = np.asarray(fn(off), dtype=float)
    vector = K.ndim == grid.d + 1
    rho = grid.density * grid.cell_volume
    comps = [K[..., c] for c in range(K.shape[-1])] if vector else [K]
    out = []
    for kern in comps:
        if grid.d == 1:
            res = np.convolve(rho, kern, mode="valid")
        else:
            res = signal.convolve(rho, kern, mode="valid", method="auto")
        out.append(res)
    return np.stack(out, axis=-1) if vector else out[0]


def gaussian_grid(spec: GridSpec, mean, variance: float) -> MeasureGrid:
    """Isotropic Gaussian density sampled at cell centres and renormalised."""
    g = spec.empty()
    x = g.centers() - np.broadcast_to(np.asarray(mean, dtype=float), (spec.d,))
    logp = -0.5 * np.einsum("ij,ij->i", x, x) / variance
    rho = np.exp(logp - logp.max()).reshape(spec.shape)
    return MeasureGrid(g.lower, spec.h, rho).normalized()


def gaussian_reference(lam: float, alpha: float, sigma: float, spec: GridSpec | None = None,
                       d: int = 1) -> tuple[float, MeasureGrid]:
    """Closed-form critical point of ``V = lam|x|^2/2``, ``U = alpha|x|^2/2``.

    For a centred measure ``U * mu (x) = alpha (|x|^2 + kappa_2) / 2``, so the
    density is Gaussian with per-axis variance ``sigma^2 / (lam + alpha)``.
    """
    if lam + alpha <= 0:
        raise ValueError("lam + alpha must be positive")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    var = sigma**2 / (lam + alpha)
    if spec is None:
        sd = math.sqrt(var)
        spec = GridSpec.symmetric(8 * sd, 0.01 if d == 1 else sd / 20, d)
    return var, gaussian_grid(spec, np.zeros(spec.d), var)


def _gibbs_update(grid: MeasureGrid, model) -> np.ndarray:
    x = grid.centers()
    pot = model.V.value(x).reshape(grid.shape)
    if not (model.U.quadratic_coeff == 0.0):
        pot = pot + lattice_convolve(grid, model.U.value)
    logp = -pot / model.sigma**2
    p = np.exp(logp - logp.max())
    return p / (p.sum() * grid.cell_volume)


def _is_even_grid(grid: MeasureGrid, tol: float = 1e-12) -> bool:
    x = grid.centers()
    if not np.allclose(x, -x[::-1], atol=1e-9 * grid.h, rtol=0):
        return False
    rho = grid.density
    return float(np.max(np.abs(rho - np.flip(rho)))) <= tol * max(float(rho.max()), 1e-300)


@dataclass
class FixedPointResult:
    grid: MeasureGrid
    update_residual: float
    iterations: int
    converged: bool
    symmetrized: bool = False
    stationarity: float | None = None


def fixed_point_solve(
    model,
    init: MeasureGrid,
    damping: float = 0.5,
    tol: float = 1e-10,
    max_iter: int = 20000,
    *,
    symmetrize: bool | None = None,
    check_grid: bool = True,
) -> FixedPointResult:
    """Damped iteration ``rho <- (1-t) rho + t normalize(exp(-(V + U*rho)/sigma^2))``.

    Stops when the sup-norm change of the density is at most ``tol``; on
    failure the last iterate is returned with ``converged=False``.
    ``symmetrize`` averages each iterate with its reflection, keeping the
    iteration on the even subspace; by default it is on exactly when ``V``,
    ``U`` and the initial density are all even on a centred lattice (the
    symmetric branch is often unstable and would otherwise break symmetry
    through rounding).
    """
    from .diagnostics import DensityEstimate, stationarity_residual

    if not getattr(model, "sigma", 0) > 0:
        raise ValueError("fixed-point solver needs sigma > 0")
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    rho0 = init.normalized()
    if symmetrize is None:
        symmetrize = bool(model.V.even and model.U.even and _is_even_grid(rho0))
    rho = rho0.density
    lower, h = rho0.lower, rho0.h
    upd = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        g = MeasureGrid(lower, h, rho)
        target = _gibbs_update(g, model)
        new = (1 - damping) * rho + damping * target
        if symmetrize:
            new = 0.5 * (new + np.flip(new))
        new = new / (new.sum() * rho0.cell_volume)
        upd = float(np.max(np.abs(new - rho)))
        rho = new
        if upd <= tol:
            break
    out = MeasureGrid(lower, h, rho)
    converged = upd <= tol
    if check_grid and out.boundary_mass() > BOUNDARY_MASS_MAX:
        raise GridTooSmallError(
            f"solution has boundary mass {out.boundary_mass():.3g}; enlarge the grid"
        )
    stat = stationarity_residual(DensityEstimate(out), model) if converged else None
    return FixedPointResult(out, upd, it, converged, symmetrize, stat)


def _coarsen(grid: MeasureGrid, max_cells: int) -> MeasureGrid:
    f = max(1, int(math.ceil(max(grid.shape) / max_cells)))
    if f == 1:
        return grid
    m = grid.masses()
    s0, s1 = (m.shape[0] // f) * f, (m.shape[1] // f) * f
    c = m[:s0, :s1].reshape(s0 // f, f, s1 // f, f).sum(axis=(1, 3))
    return MeasureGrid(grid.lower, grid.h * f, c / (grid.h * f) ** 2)


def grid_wasserstein(a: MeasureGrid, b: MeasureGrid, p: int = 2) -> float:
    """``W_p`` between two lattice measures (exact in 1-D; 2-D on a coarsened lattice)."""
    if a.d == 1:
        return wasserstein(a.as_measure(), b.as_measure(), p)
    return wasserstein(_coarsen(a, 40).as_measure(1e-14), _coarsen(b, 40).as_measure(1e-14), p)


@dataclass
class Branch:
    grid: MeasureGrid
    residual: float
    mean: np.ndarray
    variance: float
    update_residual: float
    iterations: int
    init_index: list = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "variance": self.variance,
            "residual": self.residual,
            "update_residual": self.update_residual,
            "iterations": self.iterations,
            "inits": self.init_index,
        }


def enumerate_branches(
    model,
    inits: Sequence[MeasureGrid],
    *,
    merge_radius: float | None = None,
    **solve_kw,
) -> list[Branch]:
    """Solve from every initial density and merge solutions closer than ``5 h`` in ``W_2``."""
    if len(inits) == 0:
        return []
    branches: list[Branch] = []
    failures = 0
    for j, init in enumerate(inits):
        res = fixed_point_solve(model, init, **solve_kw)
        if not res.converged:
            failures += 1
            continue
        radius = 5 * res.grid.h if merge_radius is None else merge_radius
        for br in branches:
            if grid_wasserstein(br.grid, res.grid) <= radius:
                br.init_index.append(j)
                break
        else:
            branches.append(Branch(res.grid, float(res.stationarity), res.grid.mean(),
                                   res.grid.variance(), res.update_residual, res.iterations, [j]))
    if failures == len(inits):
        raise RuntimeError("every fixed-point solve failed to converge")
    return branches


# --- binary grid format ----------------------------------------------------------

GRID_MAGIC = b"MKVG"
GRID_VERSION = 1
_GRID_HEADER = struct.Struct("<4sIIIQ")
_GRID_AXIS = struct.Struct("<ddQ")


def write_grid(path, grid: MeasureGrid) -> None:
    """``MKVG`` header (magic, version, d, reserved, cell count), per-axis
    ``(lower, h, size)``, then the density in C order, all little-endian."""
    with open(path, "wb") as fh:
        fh.write(_GRID_HEADER.pack(GRID_MAGIC, GRID_VERSION, grid.d, 0, grid.density.size))
        for a in range(grid.d):
            fh.write(_GRID_AXIS.pack(float(grid.lower[a]), float(grid.h), grid.shape[a]))
        fh.write(np.ascontiguousarray(grid.density, dtype="<f8").tobytes())


def read_grid(path) -> MeasureGrid:
    raw = Path(path).read_bytes()
    magic, version, d, _, count = _GRID_HEADER.unpack_from(raw, 0)
    if magic != GRID_MAGIC:
        raise ValueError(f"{path}: not a grid file (magic {magic!r})")
    if version != GRID_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    off = _GRID_HEADER.size
    lower, shape, h = [], [], None
    for _ in range(d):
        lo, h, size = _GRID_AXIS.unpack_from(raw, off)
        off += _GRID_AXIS.size
        lower.append(lo)
        shape.append(size)
    rho = np.frombuffer(raw, dtype="<f8", offset=off, count=count).reshape(shape)
    return MeasureGrid(np.asarray(lower), h, rho.astype(float))

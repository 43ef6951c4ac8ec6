"""Verification instruments for particle runs.

Martingale test functionals on path samples, free-energy terms and the
stationarity residual on lattice densities, and the step-weighted running
averages that track long-run convergence.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dynamics import RunConfig, path_sample, run
from .fields import TestFunctionBundle, bump, generator_apply
from .stationary import GridSpec, MeasureGrid, lattice_convolve
from .transport import PathSampleSet, WeightedSampleMeasure, as_measure, distance_to_set, wasserstein

__all__ = [
    "GFunctional",
    "DensityEstimate",
    "HelmholtzTerms",
    "ErgodicCurve",
    "ResolutionError",
    "default_G_family",
    "G_terms",
    "evaluate_G",
    "helmholtz",
    "estimate_density",
    "silverman_bandwidth",
    "stationarity_residual",
    "ergodic_distance_curve",
    "lipschitz_functional_average",
    "replica_law_distance",
    "moving_average",
    "excursions",
    "ui_tail",
    "LadderRung",
    "martingale_ladder",
]

MASS_FLOOR = 1e-12


class ResolutionError(ValueError):
    """The path grid is too coarse for the requested time integral."""


@dataclass(frozen=True)
class GFunctional:
    """``int (phi(x_t) - phi(x_s) - int_s^t L(rho_u) phi(x_u) du) prod_j h_j(x_{v_j}) drho``.

    Times are relative to the start of the path window and must satisfy
    ``v_1 <= ... <= v_r <= s <= t``.
    """

    phi: TestFunctionBundle
    s: float
    t: float
    h: tuple = ()
    v: tuple = ()

    def __post_init__(self):
        if len(self.h) != len(self.v):
            raise ValueError("need one time v_j per function h_j")
        times = list(self.v) + [self.s, self.t]
        if any(a > b for a, b in zip(times, times[1:])) or (times and times[0] < 0):
            raise ValueError("times must satisfy 0 <= v_1 <= ... <= v_r <= s <= t")

    @property
    def r(self) -> int:
        return len(self.h)


def default_G_family(window: float = 1.0) -> list[GFunctional]:
    """Bumps at the origin with radii 1, 2, 4, each with ``r = 0`` and ``r = 1``."""
    out = []
    for radius in (1.0, 2.0, 4.0):
        phi = bump([0.0], radius)
        out.append(GFunctional(phi, 0.0, window))
        h1 = bump([0.0], 2.0 * radius).phi
        out.append(GFunctional(phi, 0.0, window, (h1,), (0.0,)))
    return out


def G_terms(G: GFunctional, paths: PathSampleSet, model) -> np.ndarray:
    """Per-path contributions whose mean is :func:`evaluate_G`."""
    if G.t > paths.window + 1e-9:
        raise ValueError(f"t={G.t} beyond path window {paths.window}")
    js, jt = paths.index_of(G.s), paths.index_of(G.t)
    if jt - js + 1 < 8 and jt > js:
        raise ResolutionError(f"only {jt - js + 1} grid points in [s, t]; need at least 8")
    x = paths.values
    if jt > js:
        gen = np.empty((jt - js + 1, paths.n))
        for a, j in enumerate(range(js, jt + 1)):
            xj = x[:, j, :]
            gen[a] = generator_apply(G.phi, xj, WeightedSampleMeasure.uniform(xj), model)
        integral = paths.grid_step * (0.5 * gen[0] + gen[1:-1].sum(axis=0) + 0.5 * gen[-1])
    else:
        integral = np.zeros(paths.n)
    bracket = G.phi.phi(x[:, jt, :]) - G.phi.phi(x[:, js, :]) - integral
    weight = np.ones(paths.n)
    for hj, vj in zip(G.h, G.v):
        weight = weight * np.asarray(hj(x[:, paths.index_of(vj), :]), dtype=float)
    return bracket * weight


def evaluate_G(G: GFunctional, paths: PathSampleSet, model) -> float:
    """Empirical value of the test functional on a set of paths.

    The marginal ``rho_u`` in the generator is the empirical law of the same
    paths at time ``u``; the time integral is trapezoidal on the path grid.
    """
    return float(np.mean(G_terms(G, paths, model)))


@dataclass(frozen=True)
class DensityEstimate:
    grid: MeasureGrid
    bandwidth: np.ndarray | None = None
    dropped_mass: float = 0.0

    def __post_init__(self):
        if abs(self.grid.mass() - 1.0) > 1e-8:
            raise ValueError(f"density not normalized: mass {self.grid.mass()!r}")
        if np.any(self.grid.density < 0):
            raise ValueError("negative density")


def _as_density(obj) -> DensityEstimate:
    return obj if isinstance(obj, DensityEstimate) else DensityEstimate(obj)


def silverman_bandwidth(mu: WeightedSampleMeasure, h: float) -> np.ndarray:
    """``1.06 * std * m**(-1/5)`` per axis, floored at two cells.

    ``m`` is the effective sample size ``1 / sum w^2``.
    """
    w = mu.weights
    mean = w @ mu.points
    std = np.sqrt(w @ (mu.points - mean) ** 2)
    m_eff = 1.0 / float(w @ w)
    return np.maximum(1.06 * std * m_eff ** (-0.2), 2.0 * h)


def _bin_linear(coord: np.ndarray, lower: float, h: float, size: int):
    p = (coord - lower) / h - 0.5
    i0 = np.floor(p).astype(np.int64)
    frac = p - i0
    return i0, frac


def estimate_density(mu, spec: GridSpec, bandwidth=None) -> DensityEstimate:
    """Gaussian kernel density on a lattice (d <= 2).

    Samples are linearly binned onto cell centres and the bins convolved with
    the sampled kernel; the result is renormalised to unit mass. Mass falling
    outside the lattice is dropped and reported.
    """
    mu = as_measure(mu)
    if mu.d > 2 or spec.d != mu.d:
        raise ValueError(f"density estimation supports d <= 2 matching the grid (got d={mu.d})")
    shape = spec.shape
    h = spec.h
    bw = silverman_bandwidth(mu, h) if bandwidth is None else np.broadcast_to(
        np.asarray(bandwidth, float), (mu.d,))
    counts = np.zeros(shape)
    idx, fr = [], []
    for a in range(mu.d):
        i0, f = _bin_linear(mu.points[:, a], spec.lower[a], h, shape[a])
        idx.append(i0)
        fr.append(f)
    corners = [(0,), (1,)] if mu.d == 1 else [(0, 0), (0, 1), (1, 0), (1, 1)]
    for corner in corners:
        w = mu.weights.copy()
        ii = []
        for a, c in enumerate(corner):
            w = w * (fr[a] if c else 1.0 - fr[a])
            ii.append(idx[a] + c)
        ok = np.ones(len(w), dtype=bool)
        for a in range(mu.d):
            ok &= (ii[a] >= 0) & (ii[a] < shape[a])
        flat = np.ravel_multi_index(tuple(x[ok] for x in ii), shape)
        counts += np.bincount(flat, weights=w[ok], minlength=counts.size).reshape(shape)
    dropped = max(0.0, 1.0 - float(counts.sum()))
    rho = counts
    for a in range(mu.d):
        half = int(math.ceil(6.0 * bw[a] / h))
        u = np.arange(-half, half + 1) * h
        kern = np.exp(-0.5 * (u / bw[a]) ** 2) / (math.sqrt(2 * math.pi) * bw[a])
        rho = np.apply_along_axis(
            lambda r: np.convolve(r, kern, mode="full")[half : half + r.size], a, rho
        )
    rho = np.maximum(rho, 0.0)
    grid = MeasureGrid(np.asarray(spec.lower), h, rho).normalized()
    return DensityEstimate(grid, np.asarray(bw, float), dropped)


@dataclass(frozen=True)
class HelmholtzTerms:
    F: float
    V_term: float
    U_term: float
    H: float
    entropy_skipped: bool = False

    def as_tuple(self) -> tuple[float, float, float, float]:
        return self.F, self.V_term, self.U_term, self.H


def helmholtz(density, model) -> HelmholtzTerms:
    """Entropy, confinement and interaction energy of a lattice density.

    ``F = sigma^2 sum rho log rho h^d`` over cells above the mass floor,
    ``V_term = sum V rho h^d`` and ``U_term = 1/2 sum_ij U(x_i - x_j) rho_i rho_j h^2d``.
    """
    g = _as_density(density).grid
    m = g.masses()
    x = g.centers()
    sigma = float(model.sigma)
    keep = m > MASS_FLOOR
    if sigma > 0:
        F = sigma**2 * float(np.sum(m[keep] * np.log(g.density[keep])))
    else:
        F = 0.0
    V_term = float(np.sum(model.V.value(x).reshape(g.shape) * m))
    if model.U.quadratic_coeff == 0.0:
        U_term = 0.0
    else:
        U_term = 0.5 * float(np.sum(m * lattice_convolve(g, model.U.value)))
    return HelmholtzTerms(F, V_term, U_term, F + V_term + U_term, sigma == 0)


def _log_gradient(g: MeasureGrid) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference ``grad log rho`` and the mask of cells where it is defined."""
    rho = g.density
    m = g.masses()
    pos = m > MASS_FLOOR
    logr = np.where(rho > 0, np.log(np.where(rho > 0, rho, 1.0)), 0.0)
    grad = np.zeros(rho.shape + (g.d,))
    valid = pos.copy()
    for a in range(g.d):
        fwd = np.roll(logr, -1, axis=a)
        bwd = np.roll(logr, 1, axis=a)
        grad[..., a] = (fwd - bwd) / (2 * g.h)
        nb = np.roll(pos, -1, axis=a) & np.roll(pos, 1, axis=a)
        edge = np.zeros_like(pos)
        sl = [slice(None)] * g.d
        sl[a] = 0
        edge[tuple(sl)] = True
        sl[a] = -1
        edge[tuple(sl)] = True
        valid &= nb & ~edge
        holes = (rho <= 0) & np.roll(pos, -1, axis=a) & np.roll(pos, 1, axis=a) & ~edge
        if np.any(holes):
            raise ValueError("density vanishes inside its effective support")
    return grad, valid


def stationarity_residual(density, model) -> float:
    """``L^2(mu)`` norm of ``-grad V - grad U * rho - sigma^2 grad log rho``.

    It vanishes, up to lattice error, exactly on the critical densities.
    Cells below the mass floor or without two supported neighbours are left
    out of the norm.
    """
    g = _as_density(density).grid
    x = g.centers()
    v = -model.V.grad(x).reshape(g.shape + (g.d,))
    if model.U.quadratic_coeff != 0.0:
        v = v - lattice_convolve(g, model.U.grad)
    sigma = float(model.sigma)
    if sigma > 0:
        glog, valid = _log_gradient(g)
        v = v - sigma**2 * glog
    else:
        valid = g.masses() > MASS_FLOOR
    sq = np.einsum("...i,...i->...", v, v)
    return float(math.sqrt(np.sum(sq[valid] * g.masses()[valid])))


@dataclass
class ErgodicCurve:
    """Step-weighted running average of a distance, evaluated at recorded steps."""

    ks: np.ndarray
    taus: np.ndarray
    values: np.ndarray
    distances: np.ndarray
    argmins: list
    meta: dict = field(default_factory=dict)

    def value_at_tau(self, t: float) -> float:
        j = int(np.searchsorted(self.taus, t, side="left"))
        return float(self.values[min(j, len(self.values) - 1)])


def _held_average(ks_rec: np.ndarray, vals_rec: np.ndarray, gammas: np.ndarray):
    """Running ``sum_{l<=k} g_l D(l) / sum_{l<=k} g_l`` with ``D`` held between records."""
    K = len(gammas)
    l = np.arange(1, K + 1)
    r = np.searchsorted(ks_rec, l, side="right") - 1
    held = vals_rec[r]
    num = np.cumsum(gammas * held)
    den = np.cumsum(gammas)
    return num / den


def _run_gammas(run) -> np.ndarray:
    taus = np.asarray(run.diagnostics["tau"], dtype=float)
    sched = run.store.schedule
    if sched is not None:
        return sched.steps(len(taus) - 1)
    return np.diff(taus)


def ergodic_distance_curve(run, refs, p: int = 2, *, power: bool = False) -> ErgodicCurve:
    """``sum_l gamma_l W_p(mu_l, refs) / sum_l gamma_l`` at every recorded step ``k >= 1``.

    ``refs`` is a list of reference measures, or a callable ``k -> list``.
    Distances are evaluated at recorded states only; an unrecorded step
    contributes its step size with the last recorded distance. ``power=True``
    averages ``W_p**p`` instead.
    """
    store = run.store
    if len(store) == 0:
        raise ValueError("run has no recorded states")
    ks = np.asarray(store.ks)
    dists, args = [], []
    for r, k in enumerate(ks):
        ref_list = refs(int(k)) if callable(refs) else refs
        dval, j = distance_to_set(WeightedSampleMeasure.uniform(store.positions[r]), ref_list, p)
        dists.append(dval**p if power else dval)
        args.append(j)
    dists = np.asarray(dists)
    gam = _run_gammas(run)
    avg = _held_average(ks, dists, gam)
    sel = ks >= 1
    vals = avg[ks[sel] - 1]
    taus = np.asarray(run.diagnostics["tau"])[ks[sel]]
    meta = {"p": p, "power": power, "estimator": "distance held between recorded steps",
            "record_stride": store.stride}
    return ErgodicCurve(ks[sel], taus, vals, dists[sel], [a for a, s in zip(args, sel) if s], meta)


def lipschitz_functional_average(run, f: Callable, L: float | None = None) -> float:
    """``sum_{i,l} gamma_l f(X_l^i) / (n sum_l gamma_l)`` over the whole run.

    Unrecorded steps use the last recorded state. If ``L`` is given, the
    Lipschitz bound is spot-checked on pairs of visited points and a warning
    is issued when it fails.
    """
    store = run.store
    ks = np.asarray(store.ks)
    means = np.array([float(np.mean(f(x))) for x in store.positions])
    if L is not None:
        x = store.positions[-1]
        m = min(len(x), 256)
        a, b = x[:m], x[::-1][:m]
        fa, fb = np.asarray(f(a)), np.asarray(f(b))
        dist = np.linalg.norm(a - b, axis=1)
        ok = dist > 0
        if np.any(np.abs(fa - fb)[ok] > L * dist[ok] * (1 + 1e-9)):
            warnings.warn("f violates the stated Lipschitz bound on visited states", RuntimeWarning)
    gam = _run_gammas(run)
    if len(gam) == 0:
        return float(means[0])
    return float(_held_average(ks, means, gam)[-1])


def replica_law_distance(runs: Sequence, j: int, k: int, reference, p: int = 2,
                         min_replicas: int = 64) -> float:
    """``W_p`` between the law of ``(X_k^1, ..., X_k^j)`` across replicas and a reference sample.

    One sample per replica; ``k = -1`` selects each run's final step.
    ``reference`` is an ``(R', j d)`` array of draws from the product law.
    """
    if len(runs) < min_replicas:
        raise ValueError(f"need at least {min_replicas} replicas, got {len(runs)}")
    if j > 3:
        raise ValueError("marginal order j is limited to 3")
    rows = []
    for rec in runs:
        kk = rec.store.ks[-1] if k == -1 else k
        rows.append(rec.store.state_at_k(kk)[:j].ravel())
    sample = np.asarray(rows)
    ref = np.asarray(reference, dtype=float).reshape(-1, sample.shape[1])
    return float(wasserstein(WeightedSampleMeasure.uniform(sample),
                             WeightedSampleMeasure.uniform(ref), p))


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    """Trailing mean over ``window`` points (shorter at the start)."""
    x = np.asarray(x, dtype=float)
    c = np.cumsum(np.concatenate(([0.0], x)))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def excursions(x: np.ndarray) -> dict:
    """Total upward and downward movement and net decrease of a series."""
    dx = np.diff(np.asarray(x, dtype=float))
    return {
        "up": float(dx[dx > 0].sum()),
        "down": float(-dx[dx < 0].sum()),
        "net_decrease": float(x[0] - x[-1]) if len(x) else 0.0,
    }


def ui_tail(paths: PathSampleSet, a: float, p: int = 2, T: float | None = None) -> float:
    """``int 1{sup_[0,T] |x| > a} sup_[0,T] |x|^p drho`` for the uniform measure on paths."""
    last = paths.n_times - 1 if T is None else paths.index_of(T)
    sup = np.sqrt(np.einsum("ntd,ntd->nt", paths.values[:, : last + 1], paths.values[:, : last + 1])).max(axis=1)
    return float(np.mean(np.where(sup > a, sup**p, 0.0)))


@dataclass(frozen=True)
class LadderRung:
    t: float
    n: int
    mean_abs: float
    stderr: float
    values: tuple


def martingale_ladder(template: RunConfig, ladder: Sequence[tuple[float, int]], G: GFunctional,
                      replicas: int = 16, grid_step: float = 0.01,
                      threads: int = 1) -> list[LadderRung]:
    """Mean ``|G|`` over replicas on the path window starting at ``t``, for each ``(t, n)``.

    Each replica runs ``template`` (with ``n`` and the horizon replaced) up
    to ``t + G.t`` and stores every step meeting the window, so the path
    sample is the exact piecewise-linear interpolation.
    """
    from concurrent.futures import ThreadPoolExecutor

    rungs = []
    for t0, n in ladder:
        t0, n = float(t0), int(n)

        def one(r, t0=t0, n=n):
            cfg = RunConfig(**{**template.__dict__, "n": n, "steps": None, "horizon_tau": t0 + G.t,
                               "replica": r, "record_stride": 2**62,
                               "record_window": (t0, t0 + G.t), "threads": 1, "lanes": None})
            rec = run(cfg)
            return evaluate_G(G, path_sample(rec.store, t0, G.t, grid_step), template.model)

        if threads > 1:
            with ThreadPoolExecutor(threads) as ex:
                vals = list(ex.map(one, range(replicas)))
        else:
            vals = [one(r) for r in range(replicas)]
        a = np.abs(np.asarray(vals))
        se = float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else math.nan
        rungs.append(LadderRung(t0, n, float(a.mean()), se, tuple(float(v) for v in vals)))
    return rungs

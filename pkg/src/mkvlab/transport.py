"""Wasserstein distances between point clouds and between sets of paths."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

__all__ = [
    "WeightedSampleMeasure",
    "PathSampleSet",
    "WassersteinResult",
    "wasserstein",
    "wasserstein_bruteforce",
    "path_wasserstein",
    "distance_to_set",
    "as_measure",
    "EXACT_CAP",
]

EXACT_CAP = 1024


@dataclass(frozen=True)
class WeightedSampleMeasure:
    """Finitely supported probability measure ``sum_j w_j delta_{x_j}``."""

    points: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        w = np.asarray(self.weights, dtype=float)
        if pts.ndim != 2 or w.shape != (pts.shape[0],):
            raise ValueError("points must be (m, d) and weights (m,)")
        if not np.all(np.isfinite(pts)):
            raise ValueError("measure points must be finite")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights must be nonnegative and sum to 1, got sum {w.sum()!r}")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)

    @classmethod
    def uniform(cls, points) -> "WeightedSampleMeasure":
        pts = np.asarray(points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        return cls(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))

    @property
    def m(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))

    def mean(self) -> np.ndarray:
        return self.weights @ self.points

    def moment(self, order: float) -> float:
        r2 = np.einsum("ij,ij->i", self.points, self.points)
        return float(self.weights @ r2 ** (order / 2))


def as_measure(obj) -> WeightedSampleMeasure:
    """Coerce an ensemble, grid, point array or measure to a weighted sample."""
    if isinstance(obj, WeightedSampleMeasure):
        return obj
    if hasattr(obj, "as_measure"):
        return obj.as_measure()
    if hasattr(obj, "positions"):
        return WeightedSampleMeasure.uniform(obj.positions)
    return WeightedSampleMeasure.uniform(obj)


@dataclass(frozen=True)
class WassersteinResult:
    """A transport distance together with how it was obtained."""

    value: float
    method: str
    exact: bool
    epsilon: float | None = None
    info: dict = field(default_factory=dict)

    def __float__(self) -> float:
        return self.value


def _cost_matrix(x: np.ndarray, y: np.ndarray, p: int) -> np.ndarray:
    c = cdist(x, y, metric="euclidean")
    return c if p == 1 else c * c


def _matching_cost(cost: np.ndarray, perm: np.ndarray) -> float:
    # shared by every matching-based route so equal matchings give equal floats
    return float(np.mean(cost[np.arange(cost.shape[0]), perm]))


def _check_pair(mu: WeightedSampleMeasure, nu: WeightedSampleMeasure, p: int):
    if p not in (1, 2):
        raise ValueError(f"p must be 1 or 2, got {p}")
    if mu.d != nu.d:
        raise ValueError(f"dimension mismatch: {mu.d} vs {nu.d}")


def _quantile_1d(mu: WeightedSampleMeasure, nu: WeightedSampleMeasure, p: int) -> float:
    """Exact 1-D transport cost through the monotone (quantile) coupling."""
    ix = np.argsort(mu.points[:, 0], kind="stable")
    iy = np.argsort(nu.points[:, 0], kind="stable")
    x, wx = mu.points[ix, 0], mu.weights[ix]
    y, wy = nu.points[iy, 0], nu.weights[iy]
    cx = np.cumsum(wx)
    cy = np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    levels = np.union1d(cx, cy)
    dl = np.diff(np.concatenate(([0.0], levels)))
    # quantile index of the left end of each level interval
    jx = np.minimum(np.searchsorted(cx, levels - 0.5 * dl, side="left"), len(x) - 1)
    jy = np.minimum(np.searchsorted(cy, levels - 0.5 * dl, side="left"), len(y) - 1)
    gap = np.abs(x[jx] - y[jy])
    return float(np.sum(dl * gap**p))


def _sinkhorn_cost(
    a: np.ndarray,
    b: np.ndarray,
    cost: np.ndarray,
    eps_final_rel: float = 0.005,
    eps_factor: float = 0.7,
    inner_iter: int = 200,
    tol: float = 1e-9,
) -> tuple[float, float, int]:
    """Transport cost of the entropic plan, log-domain with epsilon scaling.

    Returns ``(cost, final_epsilon, total_iterations)``.
    """
    scale = float(np.median(cost[cost > 0])) if np.any(cost > 0) else 1.0
    eps = scale
    eps_final = eps_final_rel * scale
    la, lb = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    total = 0
    while True:
        for _ in range(inner_iter):
            total += 1
            f = eps * la - eps * logsumexp((g[None, :] - cost) / eps, axis=1)
            g_new = eps * lb - eps * logsumexp((f[:, None] - cost) / eps, axis=0)
            if np.max(np.abs(g_new - g)) < tol * max(scale, 1e-300):
                g = g_new
                break
            g = g_new
        if eps <= eps_final:
            break
        eps = max(eps * eps_factor, eps_final)
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    plan /= plan.sum()
    return float(np.sum(plan * cost)), eps, total


def wasserstein(
    mu,
    nu,
    p: int = 2,
    *,
    exact_cap: int = EXACT_CAP,
    full: bool = False,
) -> float | WassersteinResult:
    """Wasserstein distance ``W_p`` between finitely supported measures.

    Routes:

    * ``d == 1``: monotone coupling, exact for any weights.
    * equal sizes, uniform weights, ``m <= exact_cap``: optimal assignment, exact.
    * otherwise: entropic transport with epsilon scaling, flagged approximate.

    Set ``full=True`` to receive a :class:`WassersteinResult` with the route.
    """
    mu, nu = as_measure(mu), as_measure(nu)
    _check_pair(mu, nu, p)
    same_uniform = mu.m == nu.m and mu.is_uniform() and nu.is_uniform()
    if mu.d == 1:
        if same_uniform:
            cost = _cost_matrix(mu.points, nu.points, p) if mu.m <= exact_cap else None
            ix = np.argsort(mu.points[:, 0], kind="stable")
            iy = np.argsort(nu.points[:, 0], kind="stable")
            perm = np.empty(mu.m, dtype=np.intp)
            perm[ix] = iy
            if cost is not None:
                c = _matching_cost(cost, perm)
            else:
                c = float(np.mean(np.abs(mu.points[:, 0] - nu.points[perm, 0]) ** p))
        else:
            c = _quantile_1d(mu, nu, p)
        res = WassersteinResult(max(c, 0.0) ** (1.0 / p), "quantile", True)
    elif same_uniform and mu.m <= exact_cap:
        cost = _cost_matrix(mu.points, nu.points, p)
        rows, cols = linear_sum_assignment(cost)
        perm = np.empty(mu.m, dtype=np.intp)
        perm[rows] = cols
        res = WassersteinResult(_matching_cost(cost, perm) ** (1.0 / p), "assignment", True)
    else:
        cost = _cost_matrix(mu.points, nu.points, p)
        c, eps, iters = _sinkhorn_cost(mu.weights, nu.weights, cost)
        res = WassersteinResult(c ** (1.0 / p), "entropic", False, eps, {"iterations": iters})
    return res if full else res.value


def wasserstein_bruteforce(mu, nu, p: int = 2) -> float:
    """Exact ``W_p`` between equal-size uniform measures by enumerating all matchings."""
    mu, nu = as_measure(mu), as_measure(nu)
    _check_pair(mu, nu, p)
    if mu.m != nu.m or not (mu.is_uniform() and nu.is_uniform()):
        raise ValueError("brute force needs equal-size uniform measures")
    if mu.m > 8:
        raise ValueError(f"brute force limited to 8 atoms, got {mu.m}")
    cost = _cost_matrix(mu.points, nu.points, p)
    best = math.inf
    best_perm = None
    rows = np.arange(mu.m)
    for perm in itertools.permutations(range(mu.m)):
        s = cost[rows, perm].sum()
        if s < best:
            best, best_perm = s, np.array(perm)
    return _matching_cost(cost, best_perm) ** (1.0 / p)


@dataclass(frozen=True)
class PathSampleSet:
    """``n`` paths sampled on the common grid ``0, h, 2h, ..., window``.

    ``values`` has shape ``(n, T, d)``; the uniform measure over its rows is a
    finite-sample measure on path space.
    """

    values: np.ndarray
    grid_step: float
    t_start: float = 0.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValueError("path values must have shape (n, T, d)")
        if not self.grid_step > 0:
            raise ValueError("grid_step must be positive")
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def n_times(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_times) * self.grid_step

    @property
    def window(self) -> float:
        return (self.n_times - 1) * self.grid_step

    def index_of(self, u: float) -> int:
        """Grid index of time ``u`` (window-relative); ``u`` must sit on the grid."""
        j = u / self.grid_step
        jr = int(round(j))
        if abs(j - jr) > 1e-7 or not (0 <= jr < self.n_times):
            raise ValueError(f"time {u} is not a grid point of the path set")
        return jr

    def marginal(self, j: int) -> WeightedSampleMeasure:
        return WeightedSampleMeasure.uniform(self.values[:, j, :])


def path_wasserstein(
    P: PathSampleSet,
    Q: PathSampleSet,
    p: int = 2,
    horizon_terms: int | None = None,
    *,
    full: bool = False,
):
    """Truncated path-space distance ``sum_{n<=N} 2^-n (1 ^ W_p on [0, n])``.

    Each restriction treats a path as one point in the product space, with the
    maximum over grid points of ``|x_u - y_u|`` as the norm. The omitted tail
    is at most ``2**-horizon_terms``; with ``full=True`` that bound and the
    per-window distances are returned as well.
    """
    if P.grid_step != Q.grid_step or P.n_times != Q.n_times or P.d != Q.d:
        raise ValueError("path sets must share their time grid and dimension")
    if horizon_terms is None:
        horizon_terms = int(math.floor(P.window + 1e-9))
    if horizon_terms < 1:
        raise ValueError("window shorter than one time unit")
    if P.window + 1e-9 < horizon_terms:
        raise ValueError(f"window {P.window} shorter than horizon_terms={horizon_terms}")
    a = np.full(P.n, 1.0 / P.n)
    b = np.full(Q.n, 1.0 / Q.n)
    total = 0.0
    per_window = []
    for N in range(1, horizon_terms + 1):
        last = int(math.floor(N / P.grid_step + 1e-9))
        diff = P.values[:, None, : last + 1, :] - Q.values[None, :, : last + 1, :]
        sup = np.sqrt(np.einsum("ijtd,ijtd->ijt", diff, diff)).max(axis=2)
        cost = sup if p == 1 else sup**2
        if P.n == Q.n and P.n <= EXACT_CAP:
            rows, cols = linear_sum_assignment(cost)
            perm = np.empty(P.n, dtype=np.intp)
            perm[rows] = cols
            w = _matching_cost(cost, perm) ** (1.0 / p)
        else:
            w = _sinkhorn_cost(a, b, cost)[0] ** (1.0 / p)
        per_window.append(w)
        total += 2.0**-N * min(1.0, w)
    if full:
        return total, {"truncation_bound": 2.0**-horizon_terms, "per_window": per_window,
                       "horizon_terms": horizon_terms}
    return total


def distance_to_set(mu, refs, p: int = 2) -> tuple[float, int | None]:
    """``min_r W_p(mu, refs[r])`` and its argmin; ``(inf, None)`` for an empty set."""
    if len(refs) == 0:
        return math.inf, None
    dists = [wasserstein(mu, r, p) for r in refs]
    j = int(np.argmin(dists))
    return float(dists[j]), j

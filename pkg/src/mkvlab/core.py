"""Step-size schedules, algorithmic time, counter-based noise, particle ensembles."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np
from scipy.special import ndtri

__all__ = [
    "StepSchedule",
    "TimeGrid",
    "RngStream",
    "ParticleEnsemble",
    "gamma",
    "tau",
    "k_of_t",
    "philox4x32",
    "UnreachableTimeError",
]


class UnreachableTimeError(ValueError):
    """Raised when a finite step table never accumulates to the requested time."""


_KINDS = ("power_law", "constant", "table")


@dataclass(frozen=True)
class StepSchedule:
    """Deterministic sequence of positive step sizes ``gamma_k``, ``k >= 1``.

    Parameters
    ----------
    kind : {"power_law", "constant", "table"}
        ``power_law`` gives ``gamma0 * k**(-exponent)``; ``constant`` gives
        ``gamma0``; ``table`` reads explicit steps from ``table``.
    gamma0 : float
        Step scale.
    exponent : float
        Decay exponent in ``(0, 1]``. Larger exponents make the partial sums
        converge, so the algorithmic time would stay bounded.
    table : sequence of float, optional
        Explicit steps for ``kind="table"``.
    """

    kind: str = "power_law"
    gamma0: float = 0.5
    exponent: float = 0.7
    table: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {_KINDS}")
        if self.kind == "table":
            if not self.table:
                raise ValueError("table schedule needs a nonempty table")
            tab = tuple(float(g) for g in self.table)
            if any(not (g > 0 and math.isfinite(g)) for g in tab):
                raise ValueError("table steps must be finite and positive")
            object.__setattr__(self, "table", tab)
            return
        if not (self.gamma0 > 0 and math.isfinite(self.gamma0)):
            raise ValueError(f"gamma0 must be positive, got {self.gamma0}")
        if self.kind == "power_law" and not (0 < self.exponent <= 1):
            raise ValueError(
                f"power_law exponent must lie in (0, 1], got {self.exponent}: "
                "steps must vanish while their sum diverges"
            )

    @classmethod
    def harmonic(cls, gamma0: float = 1.0) -> "StepSchedule":
        return cls("power_law", gamma0, 1.0)

    def steps(self, k_max: int) -> np.ndarray:
        """``gamma_1 .. gamma_{k_max}`` as an array."""
        if self.kind == "constant":
            return np.full(k_max, float(self.gamma0))
        if self.kind == "power_law":
            # scalar pow keeps every entry bit-identical to gamma()
            g0, a = float(self.gamma0), -float(self.exponent)
            return np.array([g0 * math.pow(k, a) for k in range(1, k_max + 1)])
        if k_max > len(self.table):
            raise IndexError(f"table schedule exhausted at k={len(self.table) + 1}")
        return np.asarray(self.table[:k_max], dtype=float)

    def check_scale(self, lipschitz: float) -> None:
        """Warn when the first step is large relative to a drift Lipschitz scale."""
        g1 = gamma(self, 1)
        if g1 * lipschitz > 1.0:
            warnings.warn(
                f"gamma_1 * lipschitz = {g1 * lipschitz:.3g} > 1; early iterates may oscillate",
                RuntimeWarning,
                stacklevel=2,
            )


def gamma(schedule: StepSchedule, k: int) -> float:
    """Step size ``gamma_k`` for ``k >= 1``."""
    if k < 1:
        raise IndexError(f"step index must be >= 1, got {k}")
    if schedule.kind == "constant":
        return float(schedule.gamma0)
    if schedule.kind == "power_law":
        return float(schedule.gamma0) * math.pow(k, -float(schedule.exponent))
    if k > len(schedule.table):
        raise IndexError(f"table schedule exhausted at k={k}")
    return schedule.table[k - 1]


@dataclass(frozen=True)
class TimeGrid:
    """Cumulative step sums ``tau_0 = 0 < tau_1 < ... < tau_K``.

    Built with Kahan summation; ``taus[k] - taus[k-1]`` reproduces ``gamma_k``
    up to a few ulps.
    """

    schedule: StepSchedule
    taus: np.ndarray

    @classmethod
    def build(cls, schedule: StepSchedule, k_max: int) -> "TimeGrid":
        steps = schedule.steps(k_max)
        taus = np.empty(k_max + 1)
        taus[0] = 0.0
        s = 0.0
        comp = 0.0
        for j, g in enumerate(steps, start=1):
            y = g - comp
            t = s + y
            comp = (t - s) - y
            s = t
            taus[j] = s
        taus.setflags(write=False)
        return cls(schedule, taus)

    def __len__(self) -> int:
        return len(self.taus)

    @property
    def k_max(self) -> int:
        return len(self.taus) - 1

    def gammas(self) -> np.ndarray:
        return self.schedule.steps(self.k_max)


def tau(schedule: StepSchedule, k: int) -> float:
    """Algorithmic time ``tau_k = gamma_1 + ... + gamma_k`` (compensated sum)."""
    if k < 0:
        raise IndexError(f"k must be >= 0, got {k}")
    if k == 0:
        return 0.0
    return float(TimeGrid.build(schedule, k).taus[-1])


def k_of_t(schedule: StepSchedule, t: float) -> int:
    """Smallest ``k`` with ``tau_k >= t``; ``k_of_t(0) == 0`` by convention."""
    if t < 0:
        raise ValueError(f"t must be nonnegative, got {t}")
    if t == 0:
        return 0
    if schedule.kind == "table":
        grid = TimeGrid.build(schedule, len(schedule.table))
        if grid.taus[-1] < t:
            raise UnreachableTimeError(f"table schedule sums to {grid.taus[-1]} < t={t}")
        return int(np.searchsorted(grid.taus, t, side="left"))
    if schedule.kind == "constant":
        guess = max(1, int(math.ceil(t / schedule.gamma0)) + 2)
    elif schedule.exponent == 1:
        guess = max(1, int(math.exp(t / schedule.gamma0)) + 2)
    else:
        a = schedule.exponent
        # tau_k >= gamma0 * ((k+1)^(1-a) - 1) / (1-a)
        guess = int(((1 - a) * t / schedule.gamma0 + 1) ** (1 / (1 - a))) + 2
    while True:
        grid = TimeGrid.build(schedule, guess)
        if grid.taus[-1] >= t:
            return int(np.searchsorted(grid.taus, t, side="left"))
        guess *= 2


# --- counter-based noise ----------------------------------------------------

@numba.njit(cache=True, nogil=True)
def _philox_kernel(c0, c1, c2, c3, k0, k1, out):
    m0 = np.uint64(0xD2511F53)
    m1 = np.uint64(0xCD9E8D57)
    w0 = np.uint64(0x9E3779B9)
    w1 = np.uint64(0xBB67AE85)
    mask = np.uint64(0xFFFFFFFF)
    s32 = np.uint64(32)
    for i in range(c0.shape[0]):
        x0 = np.uint64(c0[i])
        x1 = np.uint64(c1[i])
        x2 = np.uint64(c2[i])
        x3 = np.uint64(c3[i])
        a = np.uint64(k0)
        b = np.uint64(k1)
        for _ in range(10):
            p0 = m0 * x0
            p1 = m1 * x2
            y0 = ((p1 >> s32) ^ x1 ^ a) & mask
            y1 = p1 & mask
            y2 = ((p0 >> s32) ^ x3 ^ b) & mask
            y3 = p0 & mask
            x0, x1, x2, x3 = y0, y1, y2, y3
            a = (a + w0) & mask
            b = (b + w1) & mask
        out[i, 0] = x0
        out[i, 1] = x1
        out[i, 2] = x2
        out[i, 3] = x3


def philox4x32(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox-4x32-10 block function.

    Parameters
    ----------
    counter : array of shape (m, 4)
        32-bit counter words.
    key : (int, int)
        32-bit key words.

    Returns
    -------
    ndarray of uint64, shape (m, 4)
        Output words, each below ``2**32``.
    """
    counter = np.ascontiguousarray(counter, dtype=np.uint64)
    if counter.ndim != 2 or counter.shape[1] != 4:
        raise ValueError("counter must have shape (m, 4)")
    out = np.empty_like(counter)
    _philox_kernel(
        np.ascontiguousarray(counter[:, 0]),
        np.ascontiguousarray(counter[:, 1]),
        np.ascontiguousarray(counter[:, 2]),
        np.ascontiguousarray(counter[:, 3]),
        np.uint64(key[0] & 0xFFFFFFFF),
        np.uint64(key[1] & 0xFFFFFFFF),
        out,
    )
    return out


# purpose tags occupy the top nibble of the draw word
PURPOSE_XI = 0
PURPOSE_INIT = 1
PURPOSE_ZETA = 2
PURPOSE_REFERENCE = 3
PURPOSE_USER = 4
_DRAW_BITS = 28


@dataclass(frozen=True)
class RngStream:
    """Stateless, counter-based random numbers.

    A draw is addressed by ``(replica, particle, step, draw)`` plus a purpose
    tag; the same address always produces the same number, whatever the
    evaluation order or thread count.
    """

    master_seed: int

    def __post_init__(self):
        if not (0 <= int(self.master_seed) < 2**64):
            raise ValueError("master_seed must be a 64-bit unsigned integer")

    @property
    def key(self) -> tuple[int, int]:
        s = int(self.master_seed)
        return s & 0xFFFFFFFF, s >> 32

    def counters(self, replica, particle, step, draw, purpose: int = PURPOSE_XI) -> np.ndarray:
        replica, particle, step, draw = np.broadcast_arrays(
            *(np.asarray(v, dtype=np.int64) for v in (replica, particle, step, draw))
        )
        if draw.size:
            if draw.min() < 0 or draw.max() >= 2**_DRAW_BITS:
                raise ValueError("draw index out of range")
            for name, v in (("replica", replica), ("particle", particle), ("step", step)):
                if v.min() < 0 or v.max() >= 2**32:
                    raise ValueError(f"{name} index must fit in 32 bits")
        c = np.empty(replica.shape + (4,), dtype=np.uint64)
        c[..., 0] = (np.uint64(purpose) << np.uint64(_DRAW_BITS)) | draw.astype(np.uint64)
        c[..., 1] = step.astype(np.uint64)
        c[..., 2] = particle.astype(np.uint64)
        c[..., 3] = replica.astype(np.uint64)
        return c

    def uniform(self, replica, particle, step, draw, purpose: int = PURPOSE_XI) -> np.ndarray:
        """Uniforms on the open interval (0, 1) with 53 bits of resolution."""
        c = self.counters(replica, particle, step, draw, purpose)
        shape = c.shape[:-1]
        words = philox4x32(c.reshape(-1, 4), self.key)
        bits = ((words[:, 0] << np.uint64(32)) | words[:, 1]) >> np.uint64(11)
        u = (bits.astype(np.float64) + 0.5) * 2.0**-53
        return u.reshape(shape)

    def normal(self, replica, particle, step, draw, purpose: int = PURPOSE_XI) -> np.ndarray:
        """Standard normals by inverse CDF of :meth:`uniform`."""
        return ndtri(self.uniform(replica, particle, step, draw, purpose))

    def particle_normals(
        self,
        replica: int,
        lanes: np.ndarray,
        step: int,
        dim: int,
        purpose: int = PURPOSE_XI,
    ) -> np.ndarray:
        """``(len(lanes), dim)`` standard normals for one step; row ``i`` uses lane ``lanes[i]``."""
        lanes = np.asarray(lanes, dtype=np.int64)
        return self.normal(replica, lanes[:, None], step, np.arange(dim)[None, :], purpose)

    def particle_uniforms(
        self,
        replica: int,
        lanes: np.ndarray,
        step: int,
        dim: int,
        purpose: int = PURPOSE_XI,
    ) -> np.ndarray:
        lanes = np.asarray(lanes, dtype=np.int64)
        return self.uniform(replica, lanes[:, None], step, np.arange(dim)[None, :], purpose)


@dataclass
class ParticleEnsemble:
    """Positions ``X_k^{i,n}`` of ``n`` particles in ``R^d`` at step ``k``.

    The uniform empirical measure over the rows is the step-``k`` measure
    entering the drift.
    """

    positions: np.ndarray
    k: int = 0
    tau: float = 0.0
    tau_comp: float = 0.0  # Kahan compensation carried across steps

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=float)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[0] < 1:
            raise ValueError("positions must be an (n, d) array with n >= 1")
        if not np.all(np.isfinite(pos)):
            raise FloatingPointError("ensemble positions must be finite")
        self.positions = pos

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def d(self) -> int:
        return self.positions.shape[1]

    def weights(self) -> np.ndarray:
        return np.full(self.n, 1.0 / self.n)

    def moment(self, order: int) -> float:
        """``kappa_order`` of the empirical measure: mean of ``|x|**order``."""
        r2 = np.einsum("ij,ij->i", self.positions, self.positions)
        return float(np.mean(r2 ** (order / 2)))

    def advance_time(self, step: float) -> tuple[float, float]:
        """``(tau, compensation)`` after adding ``step`` with Kahan summation."""
        y = step - self.tau_comp
        t = self.tau + y
        return t, (t - self.tau) - y

    def copy(self) -> "ParticleEnsemble":
        return ParticleEnsemble(self.positions.copy(), self.k, self.tau, self.tau_comp)


def initial_positions(
    rng: RngStream,
    n: int,
    d: int,
    kind: str = "gaussian",
    *,
    scale: float = 1.0,
    center: float | Sequence[float] = 0.0,
    low: float = -1.0,
    high: float = 1.0,
    replica: int = 0,
    lanes: np.ndarray | None = None,
) -> np.ndarray:
    """Exchangeable initial condition drawn from the counter-based stream.

    ``kind`` is ``"gaussian"`` (iid ``N(center, scale**2 I)``), ``"uniform"``
    (iid on ``[low, high]^d``) or ``"point"`` (all at ``center``).
    """
    lanes = np.arange(n) if lanes is None else np.asarray(lanes)
    c = np.broadcast_to(np.asarray(center, dtype=float), (d,))
    if kind == "gaussian":
        z = rng.particle_normals(replica, lanes, 0, d, purpose=PURPOSE_INIT)
        return c + scale * z
    if kind == "uniform":
        u = rng.particle_uniforms(replica, lanes, 0, d, purpose=PURPOSE_INIT)
        return low + (high - low) * u
    if kind == "point":
        return np.tile(c, (n, 1))
    raise ValueError(f"unknown init kind {kind!r}")

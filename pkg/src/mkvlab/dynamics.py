"""The interacting particle iteration, trajectory recording and path sampling."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .core import (
    PURPOSE_XI,
    ParticleEnsemble,
    RngStream,
    StepSchedule,
    TimeGrid,
    gamma,
    initial_positions,
    k_of_t,
)
from .transport import PathSampleSet, WeightedSampleMeasure

__all__ = [
    "NoiseModel",
    "TrajectoryStore",
    "RunConfig",
    "RunRecord",
    "METRIC_COLUMNS",
    "DivergenceError",
    "step",
    "interpolate",
    "path_sample",
    "run",
    "run_replicas",
    "write_trajectory",
    "read_trajectory",
    "DIVERGENCE_BOUND",
]

DIVERGENCE_BOUND = 1e12


class DivergenceError(FloatingPointError):
    """An iterate left the finite region; carries the step context."""

    def __init__(self, k: int, i: int, gamma_k: float, record=None):
        super().__init__(f"divergence at step k={k}, particle i={i}, gamma={gamma_k:.6g}")
        self.k, self.i, self.gamma = k, i, gamma_k
        self.record = record


@dataclass(frozen=True)
class NoiseModel:
    """Martingale noise ``xi`` and perturbation ``zeta`` of the iteration.

    ``xi`` is Gaussian with conditional covariance ``sigma sigma^T``.
    ``zeta_kind="vanishing_bias"`` adds the deterministic vector
    ``zeta_scale * k**(-zeta_exponent) * zeta_direction``, whose conditional
    mean vanishes as ``k`` grows.
    """

    xi_kind: str = "gaussian_iid"
    zeta_kind: str = "zero"
    zeta_scale: float = 0.0
    zeta_exponent: float = 1.0
    zeta_direction: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.xi_kind != "gaussian_iid":
            raise ValueError(f"unsupported xi_kind {self.xi_kind!r}")
        if self.zeta_kind not in ("zero", "vanishing_bias"):
            raise ValueError(f"unsupported zeta_kind {self.zeta_kind!r}")
        if self.zeta_kind == "vanishing_bias" and self.zeta_exponent <= 0:
            raise ValueError("vanishing_bias needs a positive exponent")

    def beta(self, k: int) -> float:
        if self.zeta_kind == "zero":
            return 0.0
        return self.zeta_scale * float(k) ** (-self.zeta_exponent)

    def zeta(self, k: int, d: int) -> np.ndarray | None:
        """``zeta_k`` (shared by all particles), or ``None`` when absent."""
        if self.zeta_kind == "zero":
            return None
        v = np.ones(d) if self.zeta_direction is None else np.asarray(self.zeta_direction, float)
        return self.beta(k) * v


def _drift_threads(model, x: np.ndarray, mu: WeightedSampleMeasure, threads: int) -> np.ndarray:
    if threads <= 1 or x.shape[0] < 2 * threads:
        return model.drift(x, mu)
    chunks = np.array_split(np.arange(x.shape[0]), threads)
    with ThreadPoolExecutor(threads) as ex:
        parts = list(ex.map(lambda idx: model.drift(x[idx], mu), chunks))
    return np.concatenate(parts, axis=0)


def step(
    ensemble: ParticleEnsemble,
    model,
    schedule: StepSchedule,
    noise: NoiseModel | None,
    rng: RngStream,
    *,
    replica: int = 0,
    lanes: np.ndarray | None = None,
    threads: int = 1,
    noiseless: bool = False,
) -> ParticleEnsemble:
    """One iteration ``X + g b(X, mu_k) + sqrt(2 g) xi + g zeta`` with ``g = gamma_{k+1}``.

    Every drift is evaluated on the pre-step positions. Particle ``i`` takes
    its noise from lane ``lanes[i]`` (default ``i``).
    """
    noise = noise or NoiseModel()
    x = ensemble.positions
    n, d = x.shape
    k1 = ensemble.k + 1
    g = gamma(schedule, k1)
    mu = WeightedSampleMeasure.uniform(x)
    b = _drift_threads(model, x, mu, threads)
    x_new = x + g * b
    if not noiseless:
        sig = np.asarray(model.diffusion(x, mu), dtype=float)
        dprime = sig.shape[-1]
        if np.any(sig != 0):
            lanes = np.arange(n) if lanes is None else lanes
            z = rng.particle_normals(replica, lanes, k1, dprime, purpose=PURPOSE_XI)
            xi = z @ sig.T if sig.ndim == 2 else np.einsum("mij,mj->mi", sig, z)
            x_new = x_new + math.sqrt(2.0 * g) * xi
    zeta = noise.zeta(k1, d)
    if zeta is not None:
        x_new = x_new + g * zeta
    bad = ~np.all(np.isfinite(x_new) & (np.abs(x_new) <= DIVERGENCE_BOUND), axis=1)
    if np.any(bad):
        raise DivergenceError(k1, int(np.flatnonzero(bad)[0]), g)
    t, comp = ensemble.advance_time(g)
    return ParticleEnsemble(x_new, k1, t, comp)


@dataclass
class TrajectoryStore:
    """Positions recorded on a subset of the time grid.

    Between recorded points the path is taken affine, which reproduces the
    piecewise-linear interpolated process exactly when every step is recorded.
    """

    schedule: StepSchedule | None = None
    stride: int = 1
    times: list = field(default_factory=list)
    ks: list = field(default_factory=list)
    positions: list = field(default_factory=list)

    def add(self, ensemble: ParticleEnsemble) -> None:
        if self.times and ensemble.tau <= self.times[-1]:
            raise ValueError("recorded times must increase strictly")
        self.times.append(float(ensemble.tau))
        self.ks.append(int(ensemble.k))
        self.positions.append(ensemble.positions.copy())

    @classmethod
    def from_arrays(cls, times, positions, ks=None, schedule=None, stride=1):
        times = [float(t) for t in times]
        ks = list(range(len(times))) if ks is None else [int(k) for k in ks]
        return cls(schedule, stride, times, ks, [np.asarray(p, float) for p in positions])

    def __len__(self) -> int:
        return len(self.times)

    @property
    def n(self) -> int:
        return self.positions[0].shape[0]

    @property
    def d(self) -> int:
        return self.positions[0].shape[1]

    def time_array(self) -> np.ndarray:
        return np.asarray(self.times)

    def array(self) -> np.ndarray:
        """Recorded positions stacked as ``(count, n, d)``."""
        return np.stack(self.positions)

    def state_at_k(self, k: int) -> np.ndarray:
        try:
            return self.positions[self.ks.index(k)]
        except ValueError:
            raise KeyError(f"step {k} was not recorded") from None

    def shift(self, t0: float) -> "TrajectoryStore":
        """Store of the time-shifted paths ``u -> X_{t0 + u}``."""
        times = self.time_array()
        if not (times[0] <= t0 <= times[-1]):
            raise ValueError(f"shift {t0} outside recorded range")
        j = int(np.searchsorted(times, t0, side="right"))
        new_t = [0.0]
        new_p = [_interp_at(self, t0)]
        new_k = [self.ks[j - 1]]
        for r in range(j, len(times)):
            if times[r] > t0:
                new_t.append(times[r] - t0)
                new_p.append(self.positions[r])
                new_k.append(self.ks[r])
        return TrajectoryStore(self.schedule, self.stride, new_t, new_k, new_p)


def _interp_at(store: TrajectoryStore, t: float, i=slice(None)) -> np.ndarray:
    times = store.time_array()
    if not (times[0] <= t <= times[-1]):
        raise ValueError(f"t={t} outside recorded range [{times[0]}, {times[-1]}]")
    r = int(np.searchsorted(times, t, side="right")) - 1
    if r >= len(times) - 1:
        return store.positions[-1][i].copy()
    x0, x1 = store.positions[r][i], store.positions[r + 1][i]
    w = (t - times[r]) / (times[r + 1] - times[r])
    return x0 + w * (x1 - x0)


def interpolate(store: TrajectoryStore, i: int, t: float) -> np.ndarray:
    """Position of particle ``i`` at time ``t`` on the piecewise-linear path."""
    return _interp_at(store, t, i)


def path_sample(store: TrajectoryStore, t_start: float, window: float, grid_step: float) -> PathSampleSet:
    """Paths ``u -> X_{t_start + u}`` for ``u`` on a uniform grid over ``[0, window]``."""
    if not grid_step > 0:
        raise ValueError("grid_step must be positive")
    times = store.time_array()
    if t_start < times[0] or t_start + window > times[-1] * (1 + 1e-12) + 1e-12:
        raise ValueError(
            f"window [{t_start}, {t_start + window}] exceeds recorded horizon [{times[0]}, {times[-1]}]"
        )
    count = int(math.floor(window / grid_step + 1e-9)) + 1
    u = t_start + np.arange(count) * grid_step
    u = np.minimum(u, times[-1])
    r = np.clip(np.searchsorted(times, u, side="right") - 1, 0, len(times) - 1)
    arr = store.array()
    out = np.empty((store.n, count, store.d))
    last = r >= len(times) - 1
    rr = np.where(last, len(times) - 2, r)
    w = np.where(last, 1.0, (u - times[rr]) / (times[rr + 1] - times[rr]))
    x0 = arr[rr]
    x1 = arr[rr + 1]
    vals = x0 + w[:, None, None] * (x1 - x0)
    # exact copies at coincident grid points
    hit = (u == times[r]) | last
    vals[hit] = arr[r[hit]]
    out[:] = vals.transpose(1, 0, 2)
    return PathSampleSet(out, grid_step, t_start)


@dataclass
class RunConfig:
    """Everything that determines one particle run.

    The run length is ``steps`` or ``horizon_tau`` (exactly one). Every
    ``record_stride``-th state is stored, plus every state whose neighbouring
    grid interval meets ``record_window``.
    """

    model: object
    schedule: StepSchedule
    n: int
    d: int = 1
    steps: int | None = None
    horizon_tau: float | None = None
    seed: int = 0
    replica: int = 0
    init_kind: str = "gaussian"
    init_scale: float = 1.0
    init_center: float | Sequence[float] = 0.0
    init_low: float = -1.0
    init_high: float = 1.0
    record_stride: int = 1
    record_window: tuple[float, float] | None = None
    noise: NoiseModel = field(default_factory=NoiseModel)
    threads: int = 1
    lanes: np.ndarray | None = None

    def __post_init__(self):
        if (self.steps is None) == (self.horizon_tau is None):
            raise ValueError("exactly one of steps and horizon_tau must be set")
        if self.n < 1 or self.d < 1:
            raise ValueError("n and d must be positive")
        if self.record_stride < 1:
            raise ValueError("record_stride must be >= 1")

    def total_steps(self) -> int:
        if self.steps is not None:
            return int(self.steps)
        return k_of_t(self.schedule, float(self.horizon_tau))

    def describe(self) -> dict:
        model = self.model
        desc = {"name": getattr(model, "name", type(model).__name__)}
        for attr in ("sigma", "lam", "C_gm", "beta", "exact_pairwise"):
            if hasattr(model, attr):
                desc[attr] = getattr(model, attr)
        for part in ("V", "U"):
            pot = getattr(model, part, None)
            if pot is not None:
                desc[part] = {"name": pot.name, **pot.params}
        return {
            "model": desc,
            "schedule": asdict(self.schedule),
            "noise": asdict(self.noise),
            "n": self.n,
            "d": self.d,
            "steps": self.steps,
            "horizon_tau": self.horizon_tau,
            "total_steps": self.total_steps(),
            "seed": int(self.seed),
            "replica": int(self.replica),
            "init": {
                "kind": self.init_kind,
                "scale": self.init_scale,
                "center": self.init_center if np.isscalar(self.init_center) else list(self.init_center),
                "low": self.init_low,
                "high": self.init_high,
            },
            "record_stride": self.record_stride,
            "record_window": list(self.record_window) if self.record_window else None,
            "lanes_permuted": self.lanes is not None,
        }


METRIC_COLUMNS = ["k", "tau", "m2", "m4", "w2_ref", "wp_erg", "helmholtz_F", "helmholtz_V",
                  "helmholtz_U", "helmholtz_H", "residual", "g_value"]


@dataclass
class RunRecord:
    """Manifest, per-step moment series and the recorded trajectory of one run."""

    manifest: dict
    diagnostics: dict
    store: TrajectoryStore
    failure: str | None = None

    def measure_at(self, r: int) -> WeightedSampleMeasure:
        return WeightedSampleMeasure.uniform(self.store.positions[r])

    def save(self, directory) -> dict:
        """Write ``trajectory.bin``, ``metrics.csv`` and ``record.json``; returns checksums."""
        from .io import write_csv, json_dumps

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_trajectory(directory / "trajectory.bin", self.store)
        cols = METRIC_COLUMNS[:4] + [c for c in METRIC_COLUMNS[4:] if c in self.diagnostics]
        write_csv(directory / "metrics.csv", cols, [self.diagnostics[c] for c in cols])
        sums = {name: _sha256(directory / name) for name in ("trajectory.bin", "metrics.csv")}
        body = {
            "manifest": self.manifest,
            "recorded_ks": list(self.store.ks),
            "failure": self.failure,
            "checksums": sums,
        }
        (directory / "record.json").write_text(json_dumps(body))
        return sums

    @classmethod
    def load(cls, directory) -> "RunRecord":
        from .io import read_csv

        directory = Path(directory)
        body = json.loads((directory / "record.json").read_text())
        times, arr = read_trajectory(directory / "trajectory.bin")
        m = body["manifest"]
        sched = StepSchedule(**{k: (tuple(v) if isinstance(v, list) else v)
                                for k, v in m["schedule"].items()})
        store = TrajectoryStore.from_arrays(times, arr, body["recorded_ks"], sched,
                                            m.get("record_stride", 1))
        cols = read_csv(directory / "metrics.csv")
        diag = {"k": np.asarray(cols["k"], dtype=np.int64)}
        for c in METRIC_COLUMNS[1:]:
            if c in cols:
                diag[c] = np.array([np.nan if v is None else v for v in cols[c]], dtype=float)
        return cls(m, diag, store, body.get("failure"))


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(config: RunConfig) -> RunRecord:
    """Iterate the particle system; a pure function of ``config``.

    On divergence the partial record (with ``failure`` set) is attached to the
    raised :class:`DivergenceError`.
    """
    K = config.total_steps()
    grid = TimeGrid.build(config.schedule, K)
    rng = RngStream(int(config.seed))
    lanes = np.arange(config.n) if config.lanes is None else np.asarray(config.lanes)
    if sorted(lanes.tolist()) != list(range(config.n)):
        raise ValueError("lanes must be a permutation of range(n)")
    x0 = initial_positions(
        rng, config.n, config.d, config.init_kind,
        scale=config.init_scale, center=config.init_center,
        low=config.init_low, high=config.init_high,
        replica=config.replica, lanes=lanes,
    )
    lip = getattr(config.model, "lipschitz_scale", None)
    if lip:
        config.schedule.check_scale(lip)
    ens = ParticleEnsemble(x0, 0, 0.0)
    store = TrajectoryStore(config.schedule, config.record_stride)
    store.add(ens)
    taus = grid.taus
    win = config.record_window

    def wanted(k: int) -> bool:
        if k % config.record_stride == 0 or k == K:
            return True
        if win is None:
            return False
        lo = taus[k - 1]
        hi = taus[min(k + 1, K)]
        return hi >= win[0] and lo <= win[1]

    m2 = np.empty(K + 1)
    m4 = np.empty(K + 1)
    r2 = np.einsum("ij,ij->i", ens.positions, ens.positions)
    m2[0], m4[0] = r2.mean(), (r2 * r2).mean()
    manifest = {**config.describe(), "code_version": __version__}
    failure = None
    k_done = 0
    try:
        for k in range(1, K + 1):
            ens = step(ens, config.model, config.schedule, config.noise, rng,
                       replica=config.replica, lanes=lanes, threads=config.threads)
            r2 = np.einsum("ij,ij->i", ens.positions, ens.positions)
            m2[k], m4[k] = r2.mean(), (r2 * r2).mean()
            k_done = k
            if wanted(k):
                store.add(ens)
    except DivergenceError as err:
        failure = str(err)
        diag = {"k": np.arange(k_done + 1), "tau": np.asarray(taus[: k_done + 1]),
                "m2": m2[: k_done + 1], "m4": m4[: k_done + 1]}
        err.record = RunRecord(manifest, diag, store, failure)
        raise
    diag = {"k": np.arange(K + 1), "tau": np.asarray(taus), "m2": m2, "m4": m4}
    return RunRecord(manifest, diag, store, failure)


def run_replicas(config: RunConfig, replicas: int, threads: int = 1) -> list[RunRecord]:
    """Independent replicas ``0..replicas-1`` (replica index enters the noise lane)."""
    def one(r):
        c = RunConfig(**{**config.__dict__, "replica": r, "threads": 1})
        return run(c)

    if threads <= 1:
        return [one(r) for r in range(replicas)]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(one, range(replicas)))


# --- binary trajectory format --------------------------------------------------

TRAJ_MAGIC = b"MKVT"
FORMAT_VERSION = 1
_TRAJ_HEADER = struct.Struct("<4sIIIQ")


def write_trajectory(path, store_or_times, positions=None) -> None:
    """Write ``MKVT`` records: little-endian header then ``(time, n*d floats)`` per record."""
    if positions is None:
        times, arr = store_or_times.time_array(), store_or_times.array()
    else:
        times = np.asarray(store_or_times, dtype=float)
        arr = np.asarray(positions, dtype=float)
        if arr.ndim == 2:
            arr = arr[None]
    count, n, d = arr.shape
    body = np.empty((count, 1 + n * d), dtype="<f8")
    body[:, 0] = times
    body[:, 1:] = arr.reshape(count, n * d)
    with open(path, "wb") as fh:
        fh.write(_TRAJ_HEADER.pack(TRAJ_MAGIC, FORMAT_VERSION, n, d, count))
        fh.write(body.tobytes())


def read_trajectory(path) -> tuple[np.ndarray, np.ndarray]:
    """Read an ``MKVT`` file into ``(times (count,), positions (count, n, d))``."""
    raw = Path(path).read_bytes()
    magic, version, n, d, count = _TRAJ_HEADER.unpack_from(raw, 0)
    if magic != TRAJ_MAGIC:
        raise ValueError(f"{path}: not a trajectory file (magic {magic!r})")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    body = np.frombuffer(raw, dtype="<f8", offset=_TRAJ_HEADER.size)
    if body.size != count * (1 + n * d):
        raise ValueError(f"{path}: truncated file")
    body = body.reshape(count, 1 + n * d)
    return body[:, 0].astype(float), body[:, 1:].reshape(count, n, d).astype(float)

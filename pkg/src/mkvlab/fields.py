"""Measure-dependent drift and diffusion, granular-media potentials, generator,
and probe-based checks of the growth and dissipativity conditions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .transport import WeightedSampleMeasure, as_measure

__all__ = [
    "Potential",
    "quadratic",
    "double_well",
    "gaussian_kernel",
    "zero_potential",
    "MeanFieldModel",
    "GranularMediaModel",
    "TestFunctionBundle",
    "bump",
    "drift_granular",
    "generator_apply",
    "dissipativity_probe",
    "DissipativityReport",
    "check_growth",
    "check_granular",
    "sorted_support",
]


def _sqnorm(x: np.ndarray) -> np.ndarray:
    return np.einsum("...i,...i->...", x, x)


@dataclass(frozen=True)
class Potential:
    """Scalar potential on ``R^d`` with its gradient, both acting on the last axis.

    ``quadratic_coeff`` is set for ``c |x|^2 / 2`` potentials; drift evaluation
    uses it to replace the pairwise interaction sum by the exact mean form.
    """

    name: str
    value: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    params: dict = field(default_factory=dict)
    even: bool = True
    quadratic_coeff: float | None = None
    lipschitz: float | None = None

    def __call__(self, x):
        return self.value(np.asarray(x, dtype=float))


def quadratic(coeff: float = 1.0) -> Potential:
    """``coeff * |x|^2 / 2``."""
    c = float(coeff)
    return Potential(
        "quadratic",
        lambda x: 0.5 * c * _sqnorm(x),
        lambda x: c * x,
        {"coeff": c},
        quadratic_coeff=c,
        lipschitz=abs(c),
    )


def double_well() -> Potential:
    """``|x|^4 / 4 - |x|^2 / 2``, minima on the unit sphere."""

    def value(x):
        r2 = _sqnorm(x)
        return 0.25 * r2 * r2 - 0.5 * r2

    def grad(x):
        return (_sqnorm(x) - 1.0)[..., None] * x

    return Potential("double_well", value, grad, {})


def gaussian_kernel(width: float = 1.0, amplitude: float = 1.0) -> Potential:
    """Attractive kernel ``-amplitude * exp(-|x|^2 / (2 width^2))``."""
    w2 = float(width) ** 2
    a = float(amplitude)

    def value(x):
        return -a * np.exp(-0.5 * _sqnorm(x) / w2)

    def grad(x):
        return (a / w2) * np.exp(-0.5 * _sqnorm(x) / w2)[..., None] * x

    return Potential("gaussian_kernel", value, grad, {"width": float(width), "amplitude": a},
                     lipschitz=a / w2)


def zero_potential() -> Potential:
    return Potential("zero", lambda x: np.zeros(np.shape(x)[:-1]), lambda x: np.zeros_like(x),
                     {}, quadratic_coeff=0.0, lipschitz=0.0)


def sorted_support(mu: WeightedSampleMeasure) -> tuple[np.ndarray, np.ndarray]:
    """Atoms and weights in lexicographic order of the coordinates.

    Summing in this order makes interaction sums exactly invariant under
    relabelling of the atoms.
    """
    pts = mu.points
    order = np.lexsort(pts.T[::-1])
    return pts[order], mu.weights[order]


@dataclass(frozen=True)
class MeanFieldModel:
    """General drift ``b(x, mu)`` and diffusion ``sigma(x, mu)``.

    ``drift(x, mu)`` maps an ``(m, d)`` array of points and a
    :class:`WeightedSampleMeasure` to an ``(m, d)`` array. ``diffusion(x, mu)``
    returns either one ``(d, d')`` matrix or an ``(m, d, d')`` stack.
    """

    drift_fn: Callable
    diffusion_fn: Callable
    growth_constant: float = 1.0
    diffusion_bound: float = 1.0
    name: str = "mean_field"

    def drift(self, x, mu) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.drift_fn(x, as_measure(mu)), dtype=float)

    def diffusion(self, x, mu) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.asarray(self.diffusion_fn(x, as_measure(mu)), dtype=float)


@dataclass(frozen=True)
class GranularMediaModel:
    """Drift ``-grad V(x) - int grad U(x - y) dmu(y)`` with constant noise ``sigma I``.

    ``lam``, ``C_gm`` and ``beta`` are the constants of the granular-media
    growth conditions; ``beta`` (Hoelder exponent) is metadata only.
    ``exact_pairwise=True`` forces the O(nm) interaction sum even for a
    quadratic ``U``.
    """

    V: Potential
    U: Potential
    sigma: float = 1.0
    lam: float = 1.0
    C_gm: float = 1.0
    beta: float = 1.0
    exact_pairwise: bool = False
    block: int = 1 << 22

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")

    @property
    def name(self) -> str:
        return f"granular[{self.V.name},{self.U.name}]"

    @property
    def lipschitz_scale(self) -> float | None:
        if self.V.lipschitz is None or self.U.lipschitz is None:
            return None
        return self.V.lipschitz + self.U.lipschitz

    def interaction(self, x: np.ndarray, mu: WeightedSampleMeasure) -> np.ndarray:
        """``sum_j w_j grad U(x - y_j)`` for each row of ``x``."""
        pts, w = sorted_support(mu)
        if self.U.quadratic_coeff is not None and not self.exact_pairwise:
            if self.U.quadratic_coeff == 0.0:
                return np.zeros_like(x)
            if mu.is_uniform():
                mean = pts.sum(axis=0) / mu.m
            else:
                mean = w @ pts
            return self.U.quadratic_coeff * (x - mean)
        out = np.empty_like(x)
        m, d = pts.shape
        rows = max(1, self.block // max(1, m * d))
        for s in range(0, x.shape[0], rows):
            xs = x[s : s + rows]
            g = self.U.grad(xs[:, None, :] - pts[None, :, :])
            g = np.ascontiguousarray((g * w[None, :, None]).transpose(0, 2, 1))
            out[s : s + rows] = g.sum(axis=-1)
        return out

    def drift(self, x, mu) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mu = as_measure(mu)
        gv = self.V.grad(x)
        out = -gv - self.interaction(x, mu)
        bad = ~np.all(np.isfinite(out), axis=1)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise FloatingPointError(f"non-finite potential gradient at point index {i}: x={x[i]}")
        return out

    def diffusion(self, x, mu) -> np.ndarray:
        d = np.atleast_2d(x).shape[1]
        return self.sigma * np.eye(d)

    def as_mean_field(self) -> MeanFieldModel:
        return MeanFieldModel(self.drift, self.diffusion, self.C_gm, self.sigma, self.name)

    @classmethod
    def quadratic(cls, lam: float = 1.0, alpha: float = 1.0, sigma: float = 1.0, **kw):
        """``V = lam |x|^2/2``, ``U = alpha |x|^2/2``."""
        return cls(quadratic(lam), quadratic(alpha) if alpha else zero_potential(), sigma,
                   lam=lam, C_gm=max(abs(lam) + abs(alpha), 1e-12), **kw)

    @classmethod
    def double_well(cls, alpha: float = 0.5, sigma: float = math.sqrt(0.2), **kw):
        """``V = |x|^4/4 - |x|^2/2``, ``U = alpha |x|^2/2``.

        ``grad V`` grows cubically, so the linear-growth bound only holds on
        bounded probe sets.
        """
        return cls(double_well(), quadratic(alpha) if alpha else zero_potential(), sigma,
                   lam=1.0, C_gm=1.0, **kw)

    @classmethod
    def gaussian(cls, lam: float = 1.0, alpha: float = 1.0, width: float = 1.0,
                 sigma: float = 1.0, **kw):
        """``V = lam |x|^2/2`` with the attractive Gaussian-kernel interaction."""
        c = max(lam + alpha / (width**2 * math.sqrt(math.e)), 1e-12)
        return cls(quadratic(lam), gaussian_kernel(width, alpha), sigma, lam=lam, C_gm=c, **kw)


def drift_granular(model: GranularMediaModel, x, ensemble) -> np.ndarray:
    """``-grad V(x) - (1/n) sum_j grad U(x - X_j)`` at one point or a batch.

    A 1-D ``x`` returns a vector of shape ``(d,)``.
    """
    mu = as_measure(ensemble)
    if mu.m == 0:
        raise ValueError("empty ensemble")
    x = np.asarray(x, dtype=float)
    out = model.drift(x.reshape(-1, mu.d), mu)
    return out[0] if x.ndim <= 1 else out


@dataclass(frozen=True)
class TestFunctionBundle:
    """Compactly supported ``C^2`` test function with gradient and Hessian.

    All three callables act on ``(m, d)`` arrays and return ``(m,)``,
    ``(m, d)`` and ``(m, d, d)`` arrays respectively.
    """

    phi: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    center: np.ndarray
    support_radius: float

    __test__ = False  # not a pytest class

    def __add__(self, other: "TestFunctionBundle") -> "TestFunctionBundle":
        c1, c2 = np.asarray(self.center, float), np.asarray(other.center, float)
        r = max(self.support_radius + np.linalg.norm(c1 - c2), other.support_radius)
        return TestFunctionBundle(
            lambda x: self.phi(x) + other.phi(x),
            lambda x: self.grad(x) + other.grad(x),
            lambda x: self.hess(x) + other.hess(x),
            c2,
            float(r),
        )

    def __rmul__(self, a: float) -> "TestFunctionBundle":
        a = float(a)
        return TestFunctionBundle(
            lambda x: a * self.phi(x),
            lambda x: a * self.grad(x),
            lambda x: a * self.hess(x),
            self.center,
            self.support_radius,
        )


def bump(center, radius: float) -> TestFunctionBundle:
    """Radial bump ``exp(1 - 1/(1 - |x-c|^2/r^2))`` inside the ball, zero outside.

    Takes the value 1 at the center. Gradient and Hessian are closed form.
    """
    c = np.atleast_1d(np.asarray(center, dtype=float))
    r2 = float(radius) ** 2

    def parts(x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = x - c
        s = _sqnorm(y) / r2
        inside = s < 1.0
        q = np.where(inside, 1.0 - s, 1.0)
        g = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
        return y, q, g, inside

    def phi(x):
        return parts(x)[2]

    def grad(x):
        y, q, g, _ = parts(x)
        dg = -g / q**2
        return (2.0 / r2) * dg[:, None] * y

    def hess(x):
        y, q, g, _ = parts(x)
        dg = -g / q**2
        d2g = g / q**4 - 2.0 * g / q**3
        d = y.shape[1]
        return (4.0 / r2**2) * d2g[:, None, None] * y[:, :, None] * y[:, None, :] + (
            2.0 / r2
        ) * dg[:, None, None] * np.eye(d)[None]

    return TestFunctionBundle(phi, grad, hess, c, float(radius))


def generator_apply(phi: TestFunctionBundle, x, mu, model) -> np.ndarray | float:
    """``<b(x, mu), grad phi(x)> + tr(sigma^T H_phi(x) sigma)``.

    ``x`` may be one point or an ``(m, d)`` batch; a single point gives a float.
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim <= 1
    mu = as_measure(mu)
    x2 = x_arr.reshape(-1, mu.d)
    b = model.drift(x2, mu)
    sig = np.asarray(model.diffusion(x2, mu), dtype=float)
    H = phi.hess(x2)
    if sig.ndim == 2:
        sig = np.broadcast_to(sig, (x2.shape[0],) + sig.shape)
    if sig.shape[1] != H.shape[1]:
        raise ValueError(f"diffusion has {sig.shape[1]} rows but the Hessian is {H.shape[1:]}")
    first = np.einsum("md,md->m", b, phi.grad(x2))
    second = np.einsum("mak,mab,mbk->m", sig, H, sig)
    out = first + second
    return float(out[0]) if single else out


@dataclass
class DissipativityReport:
    """Per-probe moment-drift integrals and fitted constants.

    ``c1_fit`` is the largest ``c`` with ``D1 <= -c kappa2 + C1`` on every probe
    for the budget ``C1``; ``C1_min`` is the least ``C`` for ``c = lam``.
    The same pair is reported for the fourth-moment inequality.
    """

    D1: np.ndarray
    D2: np.ndarray
    kappa2: np.ndarray
    kappa4: np.ndarray
    C1: float
    C2: float
    c1_fit: float
    c2_fit: float
    C1_min: float
    C2_min: float
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations


def dissipativity_probe(
    model,
    sample_measures: Sequence,
    *,
    C1: float | None = None,
    C2: float | None = None,
    c_ref: float | None = None,
) -> DissipativityReport:
    """Evaluate the second- and fourth-moment dissipativity integrals on probes.

    ``D1(mu) = int <x, b(x, mu)> dmu`` and ``D2(mu) = int <x, b(x, mu)> |x|^2 dmu``.
    Default budgets come from the granular constants: ``C1 = 1.5 C_gm`` and
    ``C2 = 4 C_gm``, which the quadratic-type bounds on ``grad V`` and
    ``grad U`` imply.
    """
    if len(sample_measures) == 0:
        raise ValueError("empty probe list")
    Cg = float(getattr(model, "C_gm", getattr(model, "growth_constant", 1.0)))
    C1 = 1.5 * Cg if C1 is None else float(C1)
    C2 = 4.0 * Cg if C2 is None else float(C2)
    c_ref = float(getattr(model, "lam", 1.0)) if c_ref is None else float(c_ref)
    D1, D2, k2, k4 = [], [], [], []
    for mu in sample_measures:
        mu = as_measure(mu)
        b = model.drift(mu.points, mu)
        inner = np.einsum("md,md->m", mu.points, b)
        r2 = _sqnorm(mu.points)
        D1.append(float(mu.weights @ inner))
        D2.append(float(mu.weights @ (inner * r2)))
        k2.append(float(mu.weights @ r2))
        k4.append(float(mu.weights @ r2**2))
    D1, D2, k2, k4 = map(np.asarray, (D1, D2, k2, k4))
    growth2 = (1 + k2) * (1 + np.sqrt(k4))
    pos2 = k2 > 0
    pos4 = k4 > 0
    c1_fit = float(np.min((C1 - D1[pos2]) / k2[pos2])) if np.any(pos2) else math.inf
    c2_fit = float(np.min((C2 * growth2[pos4] - D2[pos4]) / k4[pos4])) if np.any(pos4) else math.inf
    C1_min = float(max(0.0, np.max(D1 + c_ref * k2)))
    C2_min = float(max(0.0, np.max((D2 + c_ref * k4) / growth2)))
    violations = []
    if np.any(D1[~pos2] > C1):
        violations.append("dis1: D1 exceeds C1 on a probe with zero second moment")
    if c1_fit <= 0:
        violations.append(f"dis1: no positive c for C1={C1} (c1_fit={c1_fit:.4g})")
    if c2_fit <= 0:
        violations.append(f"dis2: no positive c for C2={C2} (c2_fit={c2_fit:.4g})")
    return DissipativityReport(D1, D2, k2, k4, C1, C2, c1_fit, c2_fit, C1_min, C2_min, violations)


def check_growth(model, probes: Sequence, points: np.ndarray) -> dict:
    """Spot-check ``|b(x, mu)| <= C (1 + |x| + int |y| dmu)`` and ``|sigma| <= C``.

    Returns the worst observed ratios; a ratio above 1 is a violation.
    """
    C = float(getattr(model, "growth_constant", getattr(model, "C_gm", 1.0)))
    Csig = float(getattr(model, "diffusion_bound", getattr(model, "sigma", C)))
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    worst_b, worst_s = 0.0, 0.0
    for mu in probes:
        mu = as_measure(mu)
        b = model.drift(pts, mu)
        m1 = float(mu.weights @ np.sqrt(_sqnorm(mu.points)))
        ratio = np.sqrt(_sqnorm(b)) / (C * (1 + np.sqrt(_sqnorm(pts)) + m1))
        worst_b = max(worst_b, float(ratio.max()))
        sig = np.asarray(model.diffusion(pts, mu))
        sig = sig.reshape((-1,) + sig.shape[-2:])
        snorm = np.linalg.norm(sig, ord=2, axis=(1, 2))
        worst_s = max(worst_s, float(snorm.max()) / Csig if Csig > 0 else float(snorm.max() > 0))
    return {"drift_ratio": worst_b, "diffusion_ratio": worst_s,
            "ok": worst_b <= 1 + 1e-12 and worst_s <= 1 + 1e-12}


def check_granular(model: GranularMediaModel, points: np.ndarray) -> dict:
    """Probe the granular-media conditions on a set of points.

    Checks oddness of ``grad U``, ``<x, grad V> >= lam |x|^2 - C``,
    ``<x, grad U> >= -C`` and ``|grad V| + |grad U| <= C (1 + |x|)``.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    C, lam = model.C_gm, model.lam
    gV, gU = model.V.grad(x), model.U.grad(x)
    odd = float(np.max(np.abs(model.U.grad(-x) + gU)))
    r2 = _sqnorm(x)
    conf = float(np.min(np.einsum("md,md->m", x, gV) - lam * r2 + C))
    inter = float(np.min(np.einsum("md,md->m", x, gU) + C))
    growth = float(np.max((np.sqrt(_sqnorm(gV)) + np.sqrt(_sqnorm(gU))) / (C * (1 + np.sqrt(r2)))))
    out = {
        "odd_grad_U": odd,
        "confinement_margin": conf,
        "interaction_margin": inter,
        "growth_ratio": growth,
    }
    out["ok"] = odd <= 1e-12 and conf >= -1e-12 and inter >= -1e-12 and growth <= 1 + 1e-12
    return out

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvlab.core import RngStream, StepSchedule
from mkvlab.diagnostics import (
    DensityEstimate,
    GFunctional,
    ResolutionError,
    G_terms,
    default_G_family,
    ergodic_distance_curve,
    estimate_density,
    evaluate_G,
    excursions,
    helmholtz,
    lipschitz_functional_average,
    moving_average,
    replica_law_distance,
    silverman_bandwidth,
    stationarity_residual,
    ui_tail,
)
from mkvlab.dynamics import RunConfig, RunRecord, TrajectoryStore, path_sample, run
from mkvlab.fields import (
    GranularMediaModel,
    MeanFieldModel,
    Potential,
    bump,
    double_well,
    quadratic,
    zero_potential,
)
from mkvlab.stationary import GridSpec, MeasureGrid, gaussian_grid
from mkvlab.transport import PathSampleSet, WeightedSampleMeasure

U_ = WeightedSampleMeasure.uniform
STILL = MeanFieldModel(lambda x, mu: np.zeros_like(x), lambda x, mu: np.zeros((x.shape[1], x.shape[1])))


def _random_paths(seed, n=5, n_t=21, step=0.05):
    v = np.random.default_rng(seed).normal(size=(n, n_t, 1)).cumsum(axis=1) * 0.2
    return PathSampleSet(v, step)


# --- martingale functionals ----------------------------------------------------------

def test_G_vanishes_on_constant_paths_without_dynamics():
    v = np.repeat(np.linspace(-1, 1, 7)[:, None, None], 41, axis=1)
    P = PathSampleSet(v, 0.025)
    for G in default_G_family(1.0):
        assert evaluate_G(G, P, STILL) == 0.0


def test_G_vanishes_when_phi_misses_every_path():
    P = _random_paths(0)
    P = PathSampleSet(P.values + 50.0, P.grid_step)
    G = GFunctional(bump([0.0], 3.0), 0.0, 1.0)
    assert evaluate_G(G, P, GranularMediaModel.quadratic()) == 0.0


def test_G_time_ordering_and_resolution():
    phi = bump([0.0], 1.0)
    with pytest.raises(ValueError):
        GFunctional(phi, 0.5, 0.2)
    with pytest.raises(ValueError):
        GFunctional(phi, 0.0, 1.0, (phi.phi,), (0.5,))
    with pytest.raises(ValueError):
        GFunctional(phi, 0.0, 1.0, (phi.phi,), ())
    P = _random_paths(1)
    with pytest.raises(ValueError):
        evaluate_G(GFunctional(phi, 0.0, 2.0), P, STILL)
    with pytest.raises(ResolutionError):
        evaluate_G(GFunctional(phi, 0.0, 0.3), P, STILL)


def test_G_single_step_bracket_by_hand():
    # two grid points are below the resolution limit, so build eight by hand
    step = 0.1
    x = np.linspace(0.0, 0.7, 8)
    P = PathSampleSet(x[None, :, None], step)
    phi = bump([0.0], 2.0)
    G = GFunctional(phi, 0.0, 0.7)
    m = GranularMediaModel(zero_potential(), zero_potential(), sigma=1.0)
    gen = [generator_value(phi, xi) for xi in x]
    integral = step * (0.5 * gen[0] + sum(gen[1:-1]) + 0.5 * gen[-1])
    ref = phi.phi(np.array([[0.7]]))[0] - phi.phi(np.array([[0.0]]))[0] - integral
    assert evaluate_G(G, P, m) == pytest.approx(ref, abs=1e-14)


def generator_value(phi, x):
    # sigma = 1 and b = 0: L phi = phi''
    return float(phi.hess(np.array([[x]]))[0, 0, 0])


def test_G_ou_martingale_mean_zero():
    # with U = 0 the particles are independent copies of the one-particle process,
    # so each particle gives an independent replica window
    m = GranularMediaModel(quadratic(1.0), zero_potential(), sigma=1.0)
    rec = run(RunConfig(m, StepSchedule("constant", 0.001), n=1000, steps=1000, seed=8))
    P = path_sample(rec.store, 0.0, 1.0, 0.01)
    terms = G_terms(GFunctional(bump([0.0], 3.0), 0.0, 1.0), P, m)
    se = terms.std(ddof=1) / math.sqrt(len(terms))
    assert se > 0
    assert abs(terms.mean()) <= 3 * se


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10**6), st.floats(-3, 3), st.floats(-3, 3), st.floats(0.1, 4))
def test_G_linear_in_phi_and_multiplicative_in_h(seed, a, b, c):
    P = _random_paths(seed)
    m = GranularMediaModel.quadratic(1.0, 0.5, 0.7)
    p1, p2 = bump([0.0], 2.0), bump([0.3], 1.5)
    h1, h2 = bump([0.0], 3.0).phi, bump([0.2], 2.5).phi
    lhs = evaluate_G(GFunctional(a * p1 + b * p2, 0.2, 1.0), P, m)
    rhs = a * evaluate_G(GFunctional(p1, 0.2, 1.0), P, m) + b * evaluate_G(GFunctional(p2, 0.2, 1.0), P, m)
    assert lhs == pytest.approx(rhs, abs=1e-12)
    both = evaluate_G(GFunctional(p1, 0.2, 1.0, (h1, h2), (0.1, 0.1)), P, m)
    prod = evaluate_G(GFunctional(p1, 0.2, 1.0, (lambda x: h1(x) * h2(x),), (0.1,)), P, m)
    assert both == pytest.approx(prod, abs=1e-13)
    scaled = evaluate_G(GFunctional(p1, 0.2, 1.0, (lambda x: c * h1(x),), (0.1,)), P, m)
    assert scaled == pytest.approx(c * evaluate_G(GFunctional(p1, 0.2, 1.0, (h1,), (0.1,)), P, m), abs=1e-13)


def test_default_family_shape():
    fam = default_G_family(2.0)
    assert len(fam) == 6
    assert sorted(G.r for G in fam) == [0, 0, 0, 1, 1, 1]
    assert {G.phi.support_radius for G in fam} == {1.0, 2.0, 4.0}


# --- free energy ------------------------------------------------------------------

def test_helmholtz_standard_gaussian():
    g = gaussian_grid(GridSpec.symmetric(10.0, 0.01), 0.0, 1.0)
    m = GranularMediaModel(quadratic(1.0), zero_potential(), sigma=1.0)
    t = helmholtz(g, m)
    assert t.F == pytest.approx(-0.5 * math.log(2 * math.pi * math.e), abs=1e-3)
    assert t.V_term == pytest.approx(0.5, abs=1e-3)
    assert t.U_term == 0.0
    assert t.H == pytest.approx(-0.91894, abs=1e-3)
    assert t.H == t.F + t.V_term + t.U_term


def test_helmholtz_quadratic_interaction_closed_form():
    # U = alpha x^2/2: U_term = alpha/2 * Var for a centred law
    g = gaussian_grid(GridSpec.symmetric(10.0, 0.01), 0.0, 0.5)
    t = helmholtz(g, GranularMediaModel.quadratic(1.0, 1.0, 1.0))
    assert t.U_term == pytest.approx(0.5 * 0.5, abs=1e-6)
    assert t.F == pytest.approx(-0.5 * math.log(2 * math.pi * math.e * 0.5), abs=1e-3)


def test_helmholtz_sigma_scaling():
    g = gaussian_grid(GridSpec.symmetric(8.0, 0.02), 0.3, 0.7)
    a = helmholtz(g, GranularMediaModel.quadratic(1.0, 2.0, 0.6))
    b = helmholtz(g, GranularMediaModel.quadratic(1.0, 2.0, 1.2))
    assert b.F == pytest.approx(4 * a.F, rel=1e-13)
    assert (b.V_term, b.U_term) == (a.V_term, a.U_term)
    z = helmholtz(g, GranularMediaModel.quadratic(1.0, 2.0, 0.0))
    assert z.F == 0.0 and z.entropy_skipped


def test_density_estimate_requires_normalization():
    with pytest.raises(ValueError):
        DensityEstimate(MeasureGrid([0.0], 0.1, np.ones(5)))


# --- density estimation --------------------------------------------------------------

def test_kde_million_normal_samples():
    z = RngStream(17).normal(0, np.arange(1_000_000), 0, 0)
    est = estimate_density(z, GridSpec.symmetric(6.0, 0.01))
    x = est.grid.centers()[:, 0]
    exact = np.exp(-0.5 * x**2) / math.sqrt(2 * math.pi)
    assert np.max(np.abs(est.grid.density - exact)) <= 0.01
    assert est.dropped_mass < 1e-6


def test_kde_point_mass():
    spec = GridSpec.symmetric(3.0, 0.01)
    est = estimate_density(np.full(100, 0.5), spec)
    assert est.grid.mass() == pytest.approx(1.0, abs=1e-12)
    bw = est.bandwidth[0]
    assert bw == 2 * spec.h
    x = est.grid.centers()[:, 0]
    assert est.grid.masses()[np.abs(x - 0.5) <= 4 * bw].sum() > 0.999
    assert abs(x[np.argmax(est.grid.density)] - 0.5) <= bw


def test_kde_bimodal_mixture():
    rng = np.random.default_rng(6)
    s = np.where(rng.uniform(size=200_000) < 0.5, -2.0, 2.0) + rng.normal(0, math.sqrt(0.1), 200_000)
    est = estimate_density(s, GridSpec.symmetric(5.0, 0.01))
    x, rho = est.grid.centers()[:, 0], est.grid.density
    bw = est.bandwidth[0]
    left = x[np.argmax(np.where(x < 0, rho, -1))]
    right = x[np.argmax(np.where(x > 0, rho, -1))]
    assert abs(left + 2) <= bw and abs(right - 2) <= bw
    assert rho[np.argmin(np.abs(x))] < 0.01 * rho.max()


def test_kde_2d_and_dimension_limit():
    rng = np.random.default_rng(2)
    est = estimate_density(rng.normal(size=(50_000, 2)), GridSpec.symmetric(5.0, 0.05, d=2))
    assert np.allclose(est.grid.covariance(), np.eye(2), atol=0.05)
    with pytest.raises(ValueError):
        estimate_density(rng.normal(size=(10, 3)), GridSpec.symmetric(5.0, 0.05, d=2))


def test_silverman_rule():
    x = np.random.default_rng(3).normal(size=(1000, 1)) * 2.0
    bw = silverman_bandwidth(U_(x), 1e-4)
    assert bw[0] == pytest.approx(1.06 * x.std() * 1000 ** -0.2, rel=1e-12)


# --- stationarity residual -----------------------------------------------------------

def test_residual_vanishes_on_closed_form():
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    for h in (0.04, 0.02, 0.01):
        g = gaussian_grid(GridSpec.symmetric(6.0, h), 0.0, 0.5)
        assert stationarity_residual(g, m) <= h


def test_residual_wrong_variance():
    # for rho = N(0, 1): v = -x - x + x = -x, so the L^2 norm is 1
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    for h in (0.05, 0.01):
        r = stationarity_residual(gaussian_grid(GridSpec.symmetric(8.0, h), 0.0, 1.0), m)
        assert r > 0.1
        assert r == pytest.approx(1.0, abs=1e-3)


def test_residual_zero_without_forces():
    m = GranularMediaModel(zero_potential(), zero_potential(), sigma=0.0)
    g = MeasureGrid([0.0], 0.1, np.random.default_rng(0).uniform(size=30)).normalized()
    assert stationarity_residual(g, m) == 0.0


def test_residual_hole_inside_support():
    rho = np.ones(20)
    rho[10] = 0.0
    g = MeasureGrid([0.0], 0.1, rho).normalized()
    with pytest.raises(ValueError):
        stationarity_residual(g, GranularMediaModel.quadratic())


@pytest.mark.parametrize("cells", [3, -17, 40])
def test_residual_translation_invariance(cells):
    h = 0.02
    spec = GridSpec.symmetric(4.0, h)
    g = gaussian_grid(spec, 0.4, 0.3)
    c = cells * h
    dw = double_well()
    shifted = Potential("shifted", lambda x: dw.value(x - c), lambda x: dw.grad(x - c), even=False)
    m0 = GranularMediaModel(dw, quadratic(0.5), sigma=0.6)
    m1 = GranularMediaModel(shifted, quadratic(0.5), sigma=0.6)
    r0 = stationarity_residual(g, m0)
    r1 = stationarity_residual(g.translated([cells]), m1)
    assert r1 == pytest.approx(r0, rel=1e-9)


# --- ergodic averages ---------------------------------------------------------------

def _record_from_states(states, schedule):
    from mkvlab.core import TimeGrid

    K = len(states) - 1
    taus = TimeGrid.build(schedule, K).taus
    store = TrajectoryStore.from_arrays(taus, states, schedule=schedule)
    diag = {"k": np.arange(K + 1), "tau": taus}
    return RunRecord({}, diag, store)


def test_ergodic_curve_self_reference_is_zero():
    rng = np.random.default_rng(0)
    states = [rng.normal(size=(20, 1)) for _ in range(15)]
    rec = _record_from_states(states, StepSchedule())
    curve = ergodic_distance_curve(rec, lambda k: [U_(states[k])])
    assert np.all(curve.values == 0.0)
    assert curve.ks[0] == 1 and len(curve.values) == 14


def test_ergodic_curve_constant_distance():
    D = 0.37
    states = [np.zeros((8, 1)) for _ in range(30)]
    rec = _record_from_states(states, StepSchedule("power_law", 0.5, 0.6))
    curve = ergodic_distance_curve(rec, [U_([[D]])])
    assert np.allclose(curve.values, D, rtol=0, atol=1e-15)
    pw = ergodic_distance_curve(rec, [U_([[D]])], p=2, power=True)
    assert np.allclose(pw.values, D**2, atol=1e-15)


def test_ergodic_curve_weights_by_step_size():
    # distances 1 at k = 1 and 0 afterwards: average is gamma_1 / tau_k
    s = StepSchedule.harmonic()
    states = [np.ones((1, 1))] * 2 + [np.zeros((1, 1))] * 4
    rec = _record_from_states(states, s)
    curve = ergodic_distance_curve(rec, [U_([[0.0]])], p=1)
    taus = np.cumsum([1 / k for k in range(1, 6)])
    assert np.allclose(curve.values, 1.0 / taus, atol=1e-15)


def test_ergodic_curve_holds_distance_between_records():
    s = StepSchedule("constant", 0.5)
    m = GranularMediaModel.quadratic()
    rec = run(RunConfig(m, s, n=8, steps=9, record_stride=3))
    curve = ergodic_distance_curve(rec, [U_([[0.0]])])
    assert list(curve.ks) == [3, 6, 9]
    d = curve.distances
    assert curve.meta["estimator"].startswith("distance held")
    # step l uses the last record at or before l; with a constant step the
    # weights are step counts
    D0 = ergodic_distance_curve(RunRecord({}, rec.diagnostics, TrajectoryStore.from_arrays(
        [0.0], [rec.store.positions[0]], schedule=s)), [U_([[0.0]])])
    assert len(D0.values) == 0
    w0 = np.sqrt(np.mean(rec.store.positions[0][:, 0] ** 2))
    assert curve.values[0] == pytest.approx((2 * w0 + d[0]) / 3, abs=1e-12)
    assert curve.values[1] == pytest.approx((2 * w0 + 3 * d[0] + d[1]) / 6, abs=1e-12)
    assert curve.values[2] == pytest.approx((2 * w0 + 3 * d[0] + 3 * d[1] + d[2]) / 9, abs=1e-12)


def test_lipschitz_average_constant():
    rec = run(RunConfig(GranularMediaModel.quadratic(), StepSchedule(), n=8, steps=40, record_stride=5))
    assert lipschitz_functional_average(rec, lambda x: np.full(len(x), 2.5)) == pytest.approx(2.5, abs=1e-14)


def test_lipschitz_average_symmetry_and_second_moment():
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    firsts, seconds = [], []
    for r in range(16):
        rec = run(RunConfig(m, StepSchedule("power_law", 0.25, 0.5), n=64, horizon_tau=20.0, seed=9,
                            replica=r, record_stride=5))
        firsts.append(lipschitz_functional_average(rec, lambda x: x[:, 0], L=1.0))
        seconds.append(lipschitz_functional_average(rec, lambda x: x[:, 0] ** 2))
    se = np.std(firsts, ddof=1) / 4
    assert abs(np.mean(firsts)) <= 3 * se
    # start-up transient and step-size bias each contribute about 0.01
    assert np.mean(seconds) == pytest.approx(0.5, abs=0.05)


def test_lipschitz_bound_violation_warns():
    rec = run(RunConfig(GranularMediaModel.quadratic(), StepSchedule(), n=16, steps=5))
    with pytest.warns(RuntimeWarning):
        lipschitz_functional_average(rec, lambda x: 100 * x[:, 0], L=1.0)


# --- replica laws ------------------------------------------------------------------

def _replicas(R, n, cfg_kw, centers=None):
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    out = []
    for r in range(R):
        kw = dict(cfg_kw)
        if centers is not None:
            kw.update(init_kind="gaussian", init_center=float(centers[r]), init_scale=0.05)
        out.append(run(RunConfig(m, StepSchedule("power_law", 0.5, 0.7), n=n, seed=12, replica=r, **kw)))
    return out


def test_replica_law_self_reference():
    runs = _replicas(64, 4, {"steps": 3})
    sample = np.array([rec.store.positions[-1][:2].ravel() for rec in runs])
    assert replica_law_distance(runs, 2, -1, sample) == 0.0
    with pytest.raises(ValueError):
        replica_law_distance(runs[:10], 1, -1, sample)
    with pytest.raises(ValueError):
        replica_law_distance(runs, 4, -1, sample)


def test_replica_law_long_run_one_marginal():
    R = 64
    runs = _replicas(R, 32, {"horizon_tau": 8.0})
    ref = np.random.default_rng(5).normal(0, math.sqrt(0.5), size=(R, 1))
    assert replica_law_distance(runs, 1, -1, ref) <= 4 / math.sqrt(R)


def test_replica_law_chaos_not_yet_propagated():
    R = 128
    centers = np.random.default_rng(1).normal(0, math.sqrt(0.5), R)
    runs = _replicas(R, 16, {"steps": 2}, centers)
    rng = np.random.default_rng(2)
    d1 = replica_law_distance(runs, 1, 2, rng.normal(0, math.sqrt(0.5), (R, 1)))
    d2 = replica_law_distance(runs, 2, 2, rng.normal(0, math.sqrt(0.5), (R, 2)))
    assert d2 > d1


# --- series helpers -----------------------------------------------------------------

def test_moving_average_and_excursions():
    x = np.array([4.0, 2.0, 3.0, 1.0])
    assert np.allclose(moving_average(x, 2), [4.0, 3.0, 2.5, 2.0])
    e = excursions(x)
    assert e == {"up": 1.0, "down": 4.0, "net_decrease": 3.0}


def test_ui_tail():
    v = np.array([0.0, 3.0, -1.0])[:, None, None] * np.ones((1, 5, 1))
    P = PathSampleSet(v, 0.25)
    assert ui_tail(P, 2.0) == pytest.approx(9.0 / 3)
    assert ui_tail(P, 0.5, p=1) == pytest.approx(4.0 / 3)
    assert ui_tail(P, 10.0) == 0.0

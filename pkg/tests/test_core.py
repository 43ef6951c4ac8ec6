import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mkvlab.core import (
    PURPOSE_INIT,
    PURPOSE_XI,
    ParticleEnsemble,
    RngStream,
    StepSchedule,
    TimeGrid,
    UnreachableTimeError,
    gamma,
    initial_positions,
    k_of_t,
    philox4x32,
    tau,
)

EPS = np.finfo(float).eps


# --- step schedules ------------------------------------------------------------

def test_gamma_examples():
    assert gamma(StepSchedule("power_law", 0.5, 0.7), 1) == 0.5
    assert gamma(StepSchedule.harmonic(), 4) == 0.25
    assert gamma(StepSchedule("constant", 0.1), 999) == 0.1


def test_gamma_rejects_k0_and_exhausted_table():
    with pytest.raises(IndexError):
        gamma(StepSchedule(), 0)
    tab = StepSchedule("table", table=(0.3, 0.2))
    assert gamma(tab, 2) == 0.2
    with pytest.raises(IndexError):
        gamma(tab, 3)


@pytest.mark.parametrize("a", [0.0, -0.3, 1.5, 2.0])
def test_power_law_exponent_outside_unit_interval_rejected(a):
    with pytest.raises(ValueError, match="sum diverges"):
        StepSchedule("power_law", 0.5, a)


def test_bad_schedules_rejected():
    with pytest.raises(ValueError):
        StepSchedule("geometric")
    with pytest.raises(ValueError):
        StepSchedule("constant", 0.0)
    with pytest.raises(ValueError):
        StepSchedule("table", table=())
    with pytest.raises(ValueError):
        StepSchedule("table", table=(0.1, -0.1))


def test_tau_examples():
    assert tau(StepSchedule.harmonic(), 3) == pytest.approx(1 + 1 / 2 + 1 / 3, abs=1e-15)
    assert tau(StepSchedule(), 0) == 0.0
    assert tau(StepSchedule("constant", 0.5), 10) == 5.0


def test_tau_compensated_sum_accuracy():
    # exact partial sum of the harmonic series via math.fsum
    s = StepSchedule.harmonic()
    K = 200_000
    exact = math.fsum(1.0 / k for k in range(1, K + 1))
    assert abs(tau(s, K) - exact) <= 8 * EPS * K * 1.0
    # in practice Kahan summation is far better than the bound
    assert abs(tau(s, K) - exact) <= 4 * EPS * exact


def test_k_of_t_examples():
    assert k_of_t(StepSchedule("constant", 0.5), 1.2) == 3
    assert k_of_t(StepSchedule(), 0.0) == 0
    assert k_of_t(StepSchedule.harmonic(), 1.9) == 4


def test_k_of_t_negative_and_unreachable():
    with pytest.raises(ValueError):
        k_of_t(StepSchedule(), -1.0)
    with pytest.raises(UnreachableTimeError):
        k_of_t(StepSchedule("table", table=(0.5, 0.5)), 1.5)
    assert k_of_t(StepSchedule("table", table=(0.5, 0.5)), 1.0) == 2


def test_power_law_divergence_and_vanishing():
    s = StepSchedule("power_law", 0.5, 1.0)
    assert tau(s, 100_000) > 5.0
    assert gamma(s, 100_000) < 1e-5


def test_time_grid_strict_and_exact_increments():
    s = StepSchedule("power_law", 0.5, 0.7)
    g = TimeGrid.build(s, 5000)
    assert g.taus[0] == 0.0
    assert np.all(np.diff(g.taus) > 0)
    inc = np.diff(g.taus)
    steps = g.gammas()
    assert np.all(np.abs(inc - steps) <= 4 * EPS * np.maximum(g.taus[1:], 1.0))


def test_steps_array_matches_scalar_gamma():
    s = StepSchedule("power_law", 0.37, 0.61)
    arr = s.steps(1000)
    assert all(arr[k - 1] == gamma(s, k) for k in range(1, 1001))


def test_check_scale_warns():
    with pytest.warns(RuntimeWarning):
        StepSchedule("constant", 2.0).check_scale(1.0)


schedules = st.one_of(
    st.builds(StepSchedule, st.just("power_law"), st.floats(0.01, 2.0), st.floats(0.05, 1.0)),
    st.builds(StepSchedule, st.just("constant"), st.floats(0.01, 2.0)),
)


@settings(max_examples=60, deadline=None)
@given(schedules, st.integers(1, 3000))
def test_tau_increment_equals_gamma(s, k):
    diff = tau(s, k) - tau(s, k - 1)
    assert abs(diff - gamma(s, k)) <= 4 * EPS * max(tau(s, k), 1.0)


@settings(max_examples=60, deadline=None)
@given(schedules, st.integers(1, 3000))
def test_k_of_t_hits_grid_exactly(s, k):
    assert k_of_t(s, tau(s, k)) == k


@settings(max_examples=60, deadline=None)
@given(schedules, st.floats(1e-6, 1.0))
def test_k_of_t_is_first_passage(s, frac):
    t = frac * tau(s, 3000)
    k = k_of_t(s, t)
    assert tau(s, k) >= t
    assert k == 1 or tau(s, k - 1) < t


# --- counter-based RNG ---------------------------------------------------------

# known-answer vectors published with the Random123 library (philox4x32, 10 rounds)
KAT = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF, 0xFFFFFFFF), (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
]


@pytest.mark.parametrize("ctr,key,expected", KAT)
def test_philox_known_answers(ctr, key, expected):
    out = philox4x32(np.array([ctr], dtype=np.uint64), key)
    assert tuple(int(w) for w in out[0]) == expected


def test_philox_shape_check():
    with pytest.raises(ValueError):
        philox4x32(np.zeros((3, 3), dtype=np.uint64), (0, 0))


def test_rng_same_address_same_value_any_order():
    rng = RngStream(2024)
    lanes = np.arange(100)
    a = rng.particle_normals(3, lanes, 17, 2)
    perm = np.random.default_rng(0).permutation(100)
    b = rng.particle_normals(3, lanes[perm], 17, 2)
    assert np.array_equal(a[perm], b)
    # element-wise evaluation agrees with the batch
    assert rng.normal(3, 5, 17, 1) == a[5, 1]


def test_rng_distinct_lanes_and_purposes_differ():
    rng = RngStream(1)
    base = rng.uniform(0, 0, 0, 0)
    others = [rng.uniform(1, 0, 0, 0), rng.uniform(0, 1, 0, 0), rng.uniform(0, 0, 1, 0),
              rng.uniform(0, 0, 0, 1), rng.uniform(0, 0, 0, 0, purpose=PURPOSE_INIT),
              RngStream(2).uniform(0, 0, 0, 0)]
    assert all(o != base for o in others)


def test_rng_seed_uses_all_64_bits():
    assert RngStream(1).uniform(0, 0, 0, 0) != RngStream(1 + 2**32).uniform(0, 0, 0, 0)
    with pytest.raises(ValueError):
        RngStream(2**64)
    with pytest.raises(ValueError):
        RngStream(0).counters(0, 0, 0, 2**28)


def test_rng_million_normals_mean_and_variance():
    rng = RngStream(99)
    N = 1_000_000
    z = rng.normal(0, np.arange(N), 0, 0, PURPOSE_XI)
    assert abs(z.mean()) <= 5 / math.sqrt(N)
    assert abs(z.var() - 1.0) <= 5 * math.sqrt(2 / N)


def test_uniforms_open_interval():
    u = RngStream(5).uniform(0, np.arange(100_000), 0, 0)
    assert u.min() > 0 and u.max() < 1


# --- ensembles -----------------------------------------------------------------

def test_ensemble_basics():
    e = ParticleEnsemble(np.array([-1.0, 1.0]))
    assert (e.n, e.d) == (2, 1)
    assert e.moment(2) == 1.0
    assert np.array_equal(e.weights(), [0.5, 0.5])
    with pytest.raises(FloatingPointError):
        ParticleEnsemble(np.array([[np.nan]]))


def test_initial_positions_kinds():
    rng = RngStream(0)
    g = initial_positions(rng, 5000, 2, "gaussian", scale=2.0, center=1.0)
    assert g.shape == (5000, 2)
    assert np.allclose(g.mean(axis=0), 1.0, atol=0.15)
    assert np.allclose(g.std(axis=0), 2.0, atol=0.1)
    u = initial_positions(rng, 1000, 1, "uniform", low=-2, high=3)
    assert u.min() >= -2 and u.max() <= 3
    p = initial_positions(rng, 3, 2, "point", center=[1.0, 2.0])
    assert np.array_equal(p, [[1, 2]] * 3)
    with pytest.raises(ValueError):
        initial_positions(rng, 3, 1, "sobol")

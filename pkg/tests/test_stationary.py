import math
import struct

import numpy as np
import pytest
from scipy import integrate

from mkvlab.diagnostics import DensityEstimate, stationarity_residual
from mkvlab.fields import GranularMediaModel, double_well, gaussian_kernel, quadratic, zero_potential
from mkvlab.stationary import (
    GridSpec,
    GridTooSmallError,
    MeasureGrid,
    enumerate_branches,
    fixed_point_solve,
    gaussian_grid,
    gaussian_reference,
    grid_wasserstein,
    lattice_convolve,
    read_grid,
    write_grid,
)


def _gibbs_quad_double_well(sigma2):
    # independent quadrature oracle for the alpha = 0 Gibbs density of the double well
    f = lambda x: math.exp(-(x**4 / 4 - x**2 / 2) / sigma2)
    Z = integrate.quad(f, -6, 6)[0]
    return f, Z


# --- closed form -----------------------------------------------------------------

def test_gaussian_reference_examples():
    assert gaussian_reference(1.0, 0.0, 1.0)[0] == 1.0
    var, g = gaussian_reference(1.0, 1.0, 1.0)
    assert var == 0.5
    assert g.variance() == pytest.approx(0.5, abs=1e-8)
    assert g.mass() == pytest.approx(1.0, abs=1e-12)
    for s in (0.5, 2.0, 3.0):
        assert gaussian_reference(1.0, 1.0, s)[0] == pytest.approx(0.5 * s**2, rel=1e-15)


def test_gaussian_reference_errors():
    with pytest.raises(ValueError):
        gaussian_reference(1.0, -1.0, 1.0)
    with pytest.raises(ValueError):
        gaussian_reference(1.0, 1.0, 0.0)


def test_gaussian_reference_two_dimensional():
    var, g = gaussian_reference(1.0, 1.0, 1.0, d=2)
    assert g.d == 2
    assert np.allclose(g.covariance(), 0.5 * np.eye(2), atol=1e-6)


def test_closed_form_is_self_consistent():
    spec = GridSpec.symmetric(6.0, 0.01)
    _, g = gaussian_reference(1.0, 1.0, 1.0, spec)
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    res = fixed_point_solve(m, g, damping=1.0, max_iter=1)
    assert np.max(np.abs(res.grid.density - g.density)) <= 1e-10


# --- convolution -----------------------------------------------------------------

def test_lattice_convolve_against_loop():
    rng = np.random.default_rng(0)
    g = MeasureGrid([-1.0], 0.1, rng.uniform(size=20)).normalized()
    U = gaussian_kernel(0.5)
    out = lattice_convolve(g, U.value)
    x = g.centers()[:, 0]
    ref = [sum(U.value(np.array([[xi - yj]]))[0] * rj * g.h for yj, rj in zip(x, g.density)) for xi in x]
    assert np.allclose(out, ref, atol=1e-14)


def test_lattice_convolve_2d_against_loop():
    rng = np.random.default_rng(1)
    g = MeasureGrid([-0.5, 0.0], 0.25, rng.uniform(size=(5, 4))).normalized()
    U = quadratic(1.3)
    out = lattice_convolve(g, U.grad)
    c = g.centers()
    w = g.masses().ravel()
    ref = np.array([sum(wj * U.grad((ci - cj)[None, :])[0] for cj, wj in zip(c, w)) for ci in c])
    assert np.allclose(out.reshape(-1, 2), ref, atol=1e-12)


# --- fixed point ------------------------------------------------------------------

def test_quadratic_fixed_point_matches_closed_form():
    spec = GridSpec.symmetric(6.0, 0.01)
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    res = fixed_point_solve(m, gaussian_grid(spec, 0.0, 1.0), tol=1e-10)
    assert res.converged and res.update_residual <= 1e-10
    assert abs(res.grid.variance() - 0.5) <= 1e-3
    assert res.stationarity <= 0.02
    res.grid.validate()


def test_no_interaction_reaches_gibbs_in_one_step():
    spec = GridSpec.symmetric(4.0, 0.01)
    sigma2 = 0.3
    m = GranularMediaModel(double_well(), zero_potential(), sigma=math.sqrt(sigma2))
    start = gaussian_grid(spec, 0.7, 0.2)
    one = fixed_point_solve(m, start, damping=1.0, max_iter=1, symmetrize=False)
    f, Z = _gibbs_quad_double_well(sigma2)
    x = one.grid.centers()[:, 0]
    exact = np.array([f(v) for v in x]) / Z
    assert np.max(np.abs(one.grid.density - exact)) <= 1e-6
    two = fixed_point_solve(m, one.grid, damping=1.0, max_iter=1, symmetrize=False)
    assert np.max(np.abs(two.grid.density - one.grid.density)) <= 1e-13


def test_double_well_three_branches():
    spec = GridSpec.symmetric(4.0, 0.01)
    m = GranularMediaModel.double_well(alpha=0.5, sigma=math.sqrt(0.2))
    inits = [gaussian_grid(spec, c, 0.1) for c in (-1.0, 0.0, 1.0)]
    br = enumerate_branches(m, inits)
    assert len(br) >= 3
    for i in range(len(br)):
        assert br[i].residual <= 0.02
        for j in range(i):
            assert grid_wasserstein(br[i].grid, br[j].grid) > 10 * spec.h
    means = sorted(b.mean[0] for b in br)
    assert means[0] < -0.3 and abs(means[1]) < 1e-8 and means[2] > 0.3
    assert means[0] == pytest.approx(-means[2], abs=1e-6)


def test_quadratic_model_single_branch():
    spec = GridSpec.symmetric(6.0, 0.02)
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    inits = [gaussian_grid(spec, c, v) for c, v in ((-1.5, 0.2), (0.0, 1.0), (2.0, 0.5), (0.3, 2.0))]
    br = enumerate_branches(m, inits)
    assert len(br) == 1 and br[0].init_index == [0, 1, 2, 3]
    assert br[0].variance == pytest.approx(0.5, abs=1e-3)


def test_empty_inits():
    assert enumerate_branches(GranularMediaModel.quadratic(), []) == []


def test_all_solves_failing_raises():
    spec = GridSpec.symmetric(4.0, 0.05)
    m = GranularMediaModel.double_well()
    with pytest.raises(RuntimeError):
        enumerate_branches(m, [gaussian_grid(spec, 0.3, 0.1)], max_iter=2, tol=1e-14)


def test_nonconvergence_is_flagged():
    spec = GridSpec.symmetric(6.0, 0.02)
    res = fixed_point_solve(GranularMediaModel.quadratic(), gaussian_grid(spec, 0.5, 1.0), max_iter=3)
    assert not res.converged and res.iterations == 3 and res.stationarity is None


def test_solver_rejects_bad_arguments():
    spec = GridSpec.symmetric(4.0, 0.05)
    with pytest.raises(ValueError):
        fixed_point_solve(GranularMediaModel.quadratic(sigma=0.0), gaussian_grid(spec, 0, 1))
    with pytest.raises(ValueError):
        fixed_point_solve(GranularMediaModel.quadratic(), gaussian_grid(spec, 0, 1), damping=0.0)


def test_grid_too_small():
    spec = GridSpec.symmetric(1.0, 0.01)
    with pytest.raises(GridTooSmallError):
        fixed_point_solve(GranularMediaModel.quadratic(1.0, 0.0, 1.0), gaussian_grid(spec, 0, 0.1))


def test_symmetric_branch_is_even():
    spec = GridSpec.symmetric(4.0, 0.01)
    m = GranularMediaModel.double_well()
    res = fixed_point_solve(m, gaussian_grid(spec, 0.0, 0.3))
    assert res.converged and res.symmetrized
    rho = res.grid.density
    assert np.max(np.abs(rho - rho[::-1])) <= 1e-8


def test_richardson_refinement_quadratic_variance():
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    v = {}
    for h in (0.04, 0.02, 0.01):
        spec = GridSpec.symmetric(6.0, h)
        v[h] = fixed_point_solve(m, gaussian_grid(spec, 0.0, 1.0), tol=1e-11).grid.variance()
    assert abs(v[0.02] - v[0.04]) <= 0.04**2
    assert abs(v[0.01] - v[0.02]) <= 0.02**2
    assert abs(v[0.01] - 0.5) <= 1e-3


@pytest.mark.parametrize("iters", [1, 2, 5, 17])
def test_mass_preserved_each_iterate(iters):
    spec = GridSpec.symmetric(4.0, 0.02)
    m = GranularMediaModel.double_well()
    res = fixed_point_solve(m, gaussian_grid(spec, 0.4, 0.2), max_iter=iters, check_grid=False)
    assert abs(res.grid.mass() - 1.0) <= 1e-12
    assert np.all(res.grid.density >= 0)


def test_residual_cross_check_with_diagnostics():
    spec = GridSpec.symmetric(4.0, 0.01)
    m = GranularMediaModel.double_well()
    res = fixed_point_solve(m, gaussian_grid(spec, 1.0, 0.1))
    assert res.stationarity == stationarity_residual(DensityEstimate(res.grid), m)
    assert res.stationarity <= 0.02


def test_two_dimensional_solve():
    spec = GridSpec.symmetric(4.0, 0.1, d=2)
    m = GranularMediaModel.quadratic(1.0, 1.0, 1.0)
    res = fixed_point_solve(m, gaussian_grid(spec, [0.2, -0.1], 1.0))
    assert res.converged
    assert np.allclose(res.grid.covariance(), 0.5 * np.eye(2), atol=2e-3)


# --- grid files --------------------------------------------------------------------

def test_grid_file_round_trip(tmp_path):
    g = gaussian_grid(GridSpec.symmetric(3.0, 0.1), 0.2, 0.4)
    p = tmp_path / "g.mkvg"
    write_grid(p, g)
    raw = p.read_bytes()
    magic, ver, d, _, count = struct.unpack("<4sIIIQ", raw[:24])
    assert (magic, ver, d, count) == (b"MKVG", 1, 1, g.density.size)
    lo, h, size = struct.unpack("<ddQ", raw[24:48])
    assert (lo, h, size) == (g.lower[0], g.h, g.density.size)
    back = read_grid(p)
    assert np.array_equal(back.density, g.density) and np.array_equal(back.lower, g.lower)


def test_grid_file_2d_and_bad_magic(tmp_path):
    g = gaussian_grid(GridSpec.symmetric(2.0, 0.25, d=2), [0, 0], 0.3)
    p = tmp_path / "g2.mkvg"
    write_grid(p, g)
    back = read_grid(p)
    assert back.shape == g.shape and np.array_equal(back.density, g.density)
    p.write_bytes(b"MKVT" + p.read_bytes()[4:])
    with pytest.raises(ValueError):
        read_grid(p)


def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec((0.0,), (-1.0,), 0.1)
    with pytest.raises(ValueError):
        GridSpec((0.0, 0.0, 0.0), (1.0, 1.0, 1.0), 0.1)
    g = MeasureGrid([0.0], 0.5, np.array([1.0, 1.0]))
    with pytest.raises(ValueError):
        MeasureGrid([0.0], 0.5, np.array([-1.0, 3.0])).validate()
    with pytest.raises(GridTooSmallError):
        g.validate()

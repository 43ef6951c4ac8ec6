"""Particle approximation of the quadratic granular medium.

Runs the decreasing-step particle iteration for V = x^2/2, U = x^2/2 and
sigma = 1, whose unique stationary law is N(0, 1/2), and prints how the
empirical measure approaches it: the W2 distance at a few times, the
step-weighted ergodic average of that distance, the Helmholtz energy of a
kernel density estimate, and the running second moment.

    python3 demos/quadratic_attractor.py [n]
"""

import sys
import time

import numpy as np

from mkvlab import (
    GranularMediaModel,
    GridSpec,
    RunConfig,
    StepSchedule,
    ergodic_distance_curve,
    estimate_density,
    gaussian_reference,
    helmholtz,
    run,
    wasserstein,
)


def main(n=512):
    model = GranularMediaModel.quadratic(lam=1.0, alpha=1.0, sigma=1.0)
    schedule = StepSchedule("power_law", gamma0=0.5, exponent=0.7)
    cfg = RunConfig(model, schedule, n=n, horizon_tau=20.0, seed=1, init_scale=2.0, record_stride=10,
                    record_window=(0.0, 2.0))

    t0 = time.perf_counter()
    rec = run(cfg)
    print(f"{rec.diagnostics['k'][-1]} steps for n={n} in {time.perf_counter() - t0:.1f} s")

    var, ref_grid = gaussian_reference(1.0, 1.0, 1.0, GridSpec.symmetric(10.0, 0.01))
    ref = ref_grid.as_measure(1e-14)
    H_ref = helmholtz(ref_grid, model).H
    print(f"stationary variance {var}, free energy {H_ref:.5f}")

    curve = ergodic_distance_curve(rec, [ref])
    spec = GridSpec.symmetric(10.0, 0.02)
    print(f"\n{'tau':>6} {'W2':>8} {'ergodic':>8} {'H':>9} {'m2':>7}")
    for target in (0.5, 1, 2, 5, 10, 20):
        r = int(np.searchsorted(rec.store.times, target))
        r = min(r, len(rec.store) - 1)
        mu = rec.measure_at(r)
        w2 = wasserstein(mu, ref)
        H = helmholtz(estimate_density(mu, spec), model).H
        k = rec.store.ks[r]
        erg = curve.values[np.searchsorted(curve.ks, k)] if k > 0 else float("nan")
        print(f"{rec.store.times[r]:6.2f} {w2:8.4f} {erg:8.4f} {H:9.5f} {rec.diagnostics['m2'][k]:7.4f}")

    # stationary noise floor: W2 between n iid draws and the exact law
    z = np.random.default_rng(0).normal(0.0, np.sqrt(var), size=(n, 1))
    print(f"\niid sample of size {n}: W2 = {wasserstein(z, ref):.4f}")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 512)

"""Several stationary laws for a double-well confinement.

With V = x^4/4 - x^2/2, a weak quadratic attraction U = 0.5 x^2/2 and
sigma^2 = 0.2 the free energy has three critical points: two asymmetric
laws centred near the wells and one even law. The lattice fixed-point
solver finds all three from different starting densities; particle runs
started in either well settle on the matching asymmetric branch.

    python3 demos/double_well_branches.py
"""

import math

import numpy as np

from mkvlab import (
    GranularMediaModel,
    GridSpec,
    RunConfig,
    StepSchedule,
    distance_to_set,
    enumerate_branches,
    gaussian_grid,
    helmholtz,
    run,
)


def main():
    model = GranularMediaModel.double_well(alpha=0.5, sigma=math.sqrt(0.2))
    spec = GridSpec.symmetric(4.0, 0.01)
    inits = [gaussian_grid(spec, c, 0.1) for c in (-1.0, -0.3, 0.0, 0.3, 1.0)]
    branches = enumerate_branches(model, inits)

    print(f"{len(branches)} branches from {len(inits)} starting densities")
    print(f"{'mean':>8} {'var':>7} {'residual':>9} {'H':>9}  inits")
    for b in branches:
        H = helmholtz(b.grid, model).H
        print(f"{b.mean[0]:8.4f} {b.variance:7.4f} {b.residual:9.2e} {H:9.5f}  {b.init_index}")

    # the even branch has the higher free energy; a start at 0 drifts away from it
    refs = [b.grid.as_measure(1e-14) for b in branches]
    schedule = StepSchedule("power_law", 0.5, 0.7)
    for center in (-1.0, 1.0, 0.0):
        cfg = RunConfig(model, schedule, n=512, horizon_tau=20.0, seed=3, init_center=center,
                        init_scale=0.1, record_stride=1000)
        rec = run(cfg)
        d, j = distance_to_set(rec.measure_at(len(rec.store) - 1), refs)
        x = rec.store.positions[-1][:, 0]
        print(f"start at {center:+.0f}: final mean {x.mean():+.4f}, "
              f"nearest branch {j} (mean {branches[j].mean[0]:+.4f}), W2 {d:.4f}")


if __name__ == "__main__":
    np.set_printoptions(precision=4)
    main()

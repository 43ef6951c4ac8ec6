"""Discrete-time McKean-Vlasov particle systems with vanishing steps.

Simulation, Wasserstein distances on point clouds and path space, martingale
test functionals, and granular-media energy and stationary-state tools.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ParticleEnsemble,
    RngStream,
    StepSchedule,
    TimeGrid,
    gamma,
    k_of_t,
    tau,
)
from .transport import (  # noqa: E402
    PathSampleSet,
    WeightedSampleMeasure,
    distance_to_set,
    path_wasserstein,
    wasserstein,
    wasserstein_bruteforce,
)
from .fields import (  # noqa: E402
    GranularMediaModel,
    MeanFieldModel,
    TestFunctionBundle,
    bump,
    dissipativity_probe,
    drift_granular,
    generator_apply,
)
from .dynamics import (  # noqa: E402
    NoiseModel,
    RunConfig,
    RunRecord,
    TrajectoryStore,
    interpolate,
    path_sample,
    run,
    run_replicas,
    step,
)
from .stationary import (  # noqa: E402
    GridSpec,
    MeasureGrid,
    enumerate_branches,
    fixed_point_solve,
    gaussian_grid,
    gaussian_reference,
)
from .diagnostics import (  # noqa: E402
    GFunctional,
    ergodic_distance_curve,
    estimate_density,
    evaluate_G,
    helmholtz,
    lipschitz_functional_average,
    martingale_ladder,
    replica_law_distance,
    stationarity_residual,
)

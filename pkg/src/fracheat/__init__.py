"""fracheat: exterior-data fractional diffusion lab.

Forward solvers for the semilinear fractional heat equation driven by
exterior data, the exterior Dirichlet-to-Neumann map, and the constructive
recovery of power-type nonlinearity coefficients from window measurements.
"""

from .geometry import (
    GeometryError,
    SpaceGrid,
    SpaceTimeField,
    TimeGrid,
    build_grid,
    build_time_grid,
    l2_spacetime_norm,
    linf_norm,
)
from .fracop import (
    FracOperator,
    QuadratureError,
    apply_bilinear,
    assemble_frac_laplacian,
    heat_kernel_eval,
    heat_kernel_mass,
    neumann_operator,
    norm_constant,
    symbol_test,
)
from .semigroup import (
    AdmissibleTriple,
    FreePropagator,
    RestrictedSemigroup,
    admissible,
    check_comparison,
    check_decay_free,
    check_decay_restricted,
    choose_exponents,
    duhamel_G,
    exponent_q,
    restricted_apply,
)
from .forward import (
    IterationLimitError,
    NonContractionError,
    Nonlinearity,
    SolveReport,
    SolverError,
    check_linf_bound,
    check_uniqueness,
    eval_nonlinearity,
    imex_oracle,
    picard_solve_source,
    pde_residual,
    solve_with_exterior_data,
)
from .inverse import (
    DtNMeasurement,
    NoNonlinearSignalError,
    RecoveryError,
    RecoveryResult,
    RungeControl,
    RungeSynthesizer,
    SourceToMeasurement,
    WeakControlError,
    dtn,
    estimate_noise_floor,
    linear_solution,
    linearization_gap,
    load_measure_fn,
    recover_coefficients,
    recover_exponent,
    save_measurements,
    simulated_measure_fn,
    synthesize_control,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]

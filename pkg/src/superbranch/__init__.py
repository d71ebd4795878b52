"""Branching particle systems, their superprocess limits and verification tools."""

from .cumulant import (
    AgeGrid,
    CumulantField,
    SolverConfig,
    laplace_functional,
    mass_representation_gap,
    semigroup_residual,
    solve_age_renewal,
    solve_controlled_immigration,
    solve_cumulant,
    solve_inhomogeneous_mass,
    solver_gap,
)
from .errors import (
    DensityTooSmall,
    DomainError,
    GridError,
    GuardExceeded,
    InvariantViolation,
    SolverDivergence,
    SolverInstability,
    SuperbranchError,
    ValidationError,
)
from .kernel import BACKEND
from .mechanisms import (
    AgeFlow,
    LimitSystemSpec,
    LocalMechanism,
    MassFlow,
    MixtureComponent,
    MotionGenerator,
    NonlocalMechanism,
    ParticleLaws,
    SiteSpace,
    build_particle_laws,
    eval_mean_kernel,
    eval_phi,
    eval_phi_k,
    eval_psi,
    eval_zeta,
    eval_zeta_k,
    k_min,
    simple_spec,
)
from .moments import MomentField, excessive_gap, mass_moment_gap, solve_age_moment, solve_T, solve_U
from .particles import (
    Particle,
    Population,
    SimConfig,
    empirical_laplace,
    run_replicates,
    sample_poisson_initial,
    simulate,
    simulate_trace,
)
from .rng import RngStream
from .stats import ExperimentResult, RunningSummary, compare, convergence_report, summarize

__version__ = "0.1.0"

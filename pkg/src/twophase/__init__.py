"""Design-weighted regression for two-phase samples.

Inverse-probability weighting, generalised raking, optimal stabilised
weights and their combination, a design-consistent two-phase variance
estimator, and a seeded Monte Carlo laboratory for the published
simulation benchmarks.
"""

from .frame import (
    DesignError,
    FrameError,
    ModelSpec,
    PopulationFrame,
    TwoPhaseDesign,
    attach_design,
    read_frame_csv,
)
from .glm import (
    ConvergenceError,
    GlmError,
    GlmFit,
    SeparationError,
    SingularDesignError,
    fit_weighted_glm,
    influence_functions,
    mle_case_control,
)
from .raking import (
    CalibrationError,
    CalibrationProblem,
    CalibrationResult,
    CollinearAuxiliariesError,
    solve_calibration,
    stabilised_rake,
)
from .smoothers import SmootherError, smooth_conditional_mean
from .stabiliser import (
    StabiliserError,
    StabiliserFn,
    case_control_q,
    estimate_q_smoothed,
)
from .estimators import (
    ESTIMATOR_KINDS,
    EstimateReport,
    EstimatorError,
    EstimatorOptions,
    UnsupportedCombinationError,
    build_plugin_auxiliaries,
    estimate,
    estimate_suite,
    two_phase_variance,
)
from .weights import WeightSet
from .simlab import (
    SCENARIO_IDS,
    AllocationError,
    ScenarioConfig,
    ScenarioFailure,
    SimulationError,
    SimulationSummary,
    default_estimators,
    draw_phase2,
    generate_population,
    model_spec,
    run_scenario,
    scenario_config,
    true_beta,
)

__version__ = "0.1.0"

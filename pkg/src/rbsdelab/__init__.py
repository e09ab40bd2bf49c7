"""Finite-lattice laboratory for doubly reflected backward equations."""

from .errors import (
    BarrierCrossing,
    ConfigError,
    Error,
    NewtonStagnation,
    NonMonotoneGenerator,
    NonTransient,
    OracleTooLarge,
    RootNotBracketed,
    RuleOrderingError,
    SolverDivergence,
    StepSizeError,
    TerminalViolation,
    TreeStructureError,
)
from .lattice import (
    AdaptedProcess,
    DoobDecomposition,
    FiltrationTree,
    StoppingRule,
    TimeGrid,
    class_d_norm,
    conditional_expectation,
    doob_decompose,
    predictable_projection,
    process_from_json,
    process_to_json,
    snell_envelope,
    tree_from_json,
    tree_to_json,
)
from .bsde import (
    BsdeSolution,
    Generator,
    f_expectation,
    normalize_generator,
    solve_bsde,
)
from .rbsde import (
    BarrierPair,
    HalfPenalizedSolution,
    LSystem,
    PenalizedSolution,
    ProjectionCheck,
    ReflectedSolution,
    StabilityGap,
    VerdictReport,
    build_l_system,
    check_projection_condition,
    default_eta,
    solve_half_penalized,
    solve_penalized,
    solve_reflected,
    stability_gap,
    verify_solution,
)
from .dynkin import (
    GamePayoff,
    GameValue,
    SaddleCandidate,
    SaddleReport,
    count_stopping_rules,
    enumerate_stopping_rules,
    game_value_bruteforce,
    game_value_process,
    generalized_game_value,
    generalized_payoff_J,
    payoff_J,
    saddle_from_solution,
    verify_saddle,
)
from .markov_vi import (
    FukushimaReport,
    MarkovPenalized,
    MarkovScenario,
    ObstacleProblem,
    ParabolicObstacleProblem,
    UnrolledChain,
    complementarity_residual,
    fukushima_bookkeeping,
    markov_penalized,
    solve_parabolic_vi,
    solve_vi_penalized,
    solve_vi_psor,
    unroll_chain,
    upwind_drift_form,
    value_function,
)
from .scenarios import (
    EvolveBundle,
    Scenario,
    ViBundle,
    named_scenario,
    pinching_cone_candidate,
    random_adapted,
    random_martingale,
    random_ordered_pair,
    random_perturbation_pair,
    random_reflected_scenario,
    random_tree,
    scenario_from_json,
    scenario_names,
    scenario_to_json,
)

__version__ = "0.1.0"

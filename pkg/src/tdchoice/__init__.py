"""Structural estimation of dynamic discrete choice models via
temporal-difference fixed points and locally robust moment equations."""

from .basis import (
    CustomBasis,
    DesignSystem,
    PolynomialBasis,
    SaturatedBasis,
    StateScaler,
    TypeIndexedBasis,
    build_design,
)
from .bus import (
    BusConfig,
    MonteCarloResult,
    ValueTables,
    bus_payoff_features,
    monte_carlo,
    simulate_panel,
    solve_bus_values,
    window_stationarity,
)
from .ccp import CcpModel, TabularCcp, clip_probabilities, shock_expectation_from_probs
from .data import (
    FoldAssignment,
    PanelDataset,
    Transitions,
    extract_transitions,
    load_panel_csv,
    save_panel_csv,
    split_folds,
)
from .estimators import (
    EstimateReport,
    TdChoiceEstimator,
    choice_probabilities,
    locally_robust_estimate,
    nonlinear_estimate,
    pseudo_mle_estimate,
)
from .likelihood import (
    ComponentValues,
    component_values,
    pseudo_mle,
    score_pieces,
)
from .td import (
    SelectKResult,
    TdSolution,
    TdSystem,
    assemble_td_system,
    select_k,
    sgd_solve,
    solve_h_all,
    solve_lambda,
    solve_td,
    solve_xi,
)

__version__ = "0.1.0"

__all__ = [
    "BusConfig",
    "CcpModel",
    "ComponentValues",
    "CustomBasis",
    "DesignSystem",
    "EstimateReport",
    "FoldAssignment",
    "MonteCarloResult",
    "PanelDataset",
    "PolynomialBasis",
    "SaturatedBasis",
    "SelectKResult",
    "StateScaler",
    "TabularCcp",
    "TdChoiceEstimator",
    "TdSolution",
    "TdSystem",
    "Transitions",
    "TypeIndexedBasis",
    "ValueTables",
    "assemble_td_system",
    "build_design",
    "bus_payoff_features",
    "choice_probabilities",
    "clip_probabilities",
    "component_values",
    "extract_transitions",
    "load_panel_csv",
    "locally_robust_estimate",
    "monte_carlo",
    "nonlinear_estimate",
    "pseudo_mle",
    "pseudo_mle_estimate",
    "save_panel_csv",
    "score_pieces",
    "select_k",
    "sgd_solve",
    "shock_expectation_from_probs",
    "simulate_panel",
    "solve_bus_values",
    "simulate_panel",
    "solve_h_all",
    "solve_lambda",
    "solve_td",
    "solve_xi",
    "split_folds",
    "window_stationarity",
    "__version__",
]

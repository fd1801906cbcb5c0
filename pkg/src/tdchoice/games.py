"""Dynamic discrete games estimated by pooling per-player transitions.

Markets share a common observed state x_t; every period records the action
of each of the N players.  Estimation treats each (market, player) pair as
a pseudo-individual whose transitions are (a_it, x_t) -> (a_it+1, x_t+1),
and evaluates flow payoff features at the realized opponent actions, which
ride along as extra payoff covariates.  Opponent behaviour is integrated
implicitly by the sample averages, so no code path ever sums over opponent
action profiles; the module keeps an instrumented counter to prove it
(only test oracles call enumerate_profiles).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import FoldAssignment, PanelDataset
from .estimators import (
    EstimateReport,
    locally_robust_estimate,
    pseudo_mle_estimate,
)
from .recursive import recursive_estimate
from .validation import check_beta

__all__ = [
    "MarketPanel",
    "pool_game_transitions",
    "load_market_csv",
    "save_market_csv",
    "market_folds",
    "game_estimate",
    "enumerate_profiles",
    "profile_enumeration_count",
    "reset_profile_enumerations",
]


_PROFILE_ENUMERATIONS = {"count": 0}


def enumerate_profiles(n_actions: int, n_players: int) -> list:
    """All joint action profiles of n_players (used by brute-force test
    oracles only; estimation must never call this).  Each call bumps the
    instrumented counter."""
    _PROFILE_ENUMERATIONS["count"] += 1
    return list(itertools.product(range(n_actions), repeat=n_players))


def profile_enumeration_count() -> int:
    return _PROFILE_ENUMERATIONS["count"]


def reset_profile_enumerations() -> None:
    _PROFILE_ENUMERATIONS["count"] = 0


@dataclass
class MarketPanel:
    """Panel of markets: per (market, period) rows with the common state
    vector and the full N-vector of player actions."""

    market_ids: np.ndarray       # (n_rows,) market labels
    times: np.ndarray            # (n_rows,) period index within market
    states: np.ndarray           # (n_rows, D) common state
    actions: np.ndarray          # (n_rows, N) one action per player
    n_actions: int
    discrete_state_levels: tuple | None = None

    def __post_init__(self):
        self.market_ids = np.asarray(self.market_ids)
        self.times = np.asarray(self.times)
        self.states = np.asarray(self.states, dtype=float)
        if self.states.ndim == 1:
            self.states = self.states[:, None]
        acts = np.asarray(self.actions)
        if acts.ndim == 1:
            acts = acts[:, None]
        if np.any(~np.isfinite(acts.astype(float))):
            raise ValueError("missing player action in some period")
        self.actions = acts.astype(np.int64)
        n = self.market_ids.shape[0]
        if not (self.times.shape[0] == n == self.states.shape[0]
                == self.actions.shape[0]):
            raise ValueError("market panel arrays must share their length")
        if self.actions.size and (
            self.actions.min() < 0 or self.actions.max() >= self.n_actions
        ):
            raise ValueError("player actions must lie in [0, n_actions)")
        order = np.lexsort((self.times, self.market_ids))
        self.market_ids = self.market_ids[order]
        self.times = self.times[order]
        self.states = self.states[order]
        self.actions = self.actions[order]

    @property
    def n_players(self) -> int:
        return self.actions.shape[1]

    @property
    def n_markets(self) -> int:
        return np.unique(self.market_ids).shape[0]

    @property
    def market_codes(self) -> np.ndarray:
        return np.unique(self.market_ids, return_inverse=True)[1]


def pool_game_transitions(
    panel: MarketPanel, player_specific: bool = False
) -> PanelDataset:
    """Stack every (market, player) pair as one pseudo-individual.

    Each pooled row holds that player's own action, the common state, and
    (as payoff-only extras) the realized actions of the other players in
    increasing player order.  With player_specific=True the player index is
    appended as an extra discrete state coordinate so bases and payoffs can
    carry player-specific blocks; otherwise value components are common to
    all players.  With N = 1 the result is exactly the single-agent panel.
    """
    N = panel.n_players
    n = panel.market_ids.shape[0]
    codes = panel.market_codes
    ids = np.concatenate([codes * N + i for i in range(N)])
    times = np.tile(panel.times, N)
    actions = np.concatenate([panel.actions[:, i] for i in range(N)])
    if player_specific and N > 1:
        states = np.concatenate(
            [
                np.column_stack([panel.states, np.full(n, float(i))])
                for i in range(N)
            ]
        )
        levels = panel.discrete_state_levels
        levels = ((tuple(levels) if levels is not None
                   else (None,) * panel.states.shape[1]) + (N,))
    else:
        states = np.tile(panel.states, (N, 1))
        levels = panel.discrete_state_levels
    if N > 1:
        opp = np.concatenate(
            [panel.actions[:, [j for j in range(N) if j != i]].astype(float)
             for i in range(N)]
        )
    else:
        opp = None
    return PanelDataset(
        ids=ids,
        times=times,
        actions=actions,
        states=states,
        n_actions=panel.n_actions,
        discrete_state_levels=levels,
        extras=opp,
    )


def load_market_csv(path, n_actions: int | None = None) -> MarketPanel:
    """Read a market panel CSV with columns market,t,x1..xD,a1..aN."""
    df = pd.read_csv(path)
    required = {"market", "t"}
    if not required.issubset(df.columns):
        raise ValueError("market CSV needs 'market' and 't' columns")
    x_cols = sorted(
        (c for c in df.columns if c.startswith("x") and c[1:].isdigit()),
        key=lambda c: int(c[1:]),
    )
    a_cols = sorted(
        (c for c in df.columns if c.startswith("a") and c[1:].isdigit()),
        key=lambda c: int(c[1:]),
    )
    if not x_cols or not a_cols:
        raise ValueError("market CSV needs x1..xD and a1..aN columns")
    if df[a_cols].isna().any().any():
        raise ValueError("missing player action in some period")
    actions = df[a_cols].to_numpy()
    if n_actions is None:
        n_actions = int(actions.max()) + 1
    return MarketPanel(
        market_ids=df["market"].to_numpy(),
        times=df["t"].to_numpy(),
        states=df[x_cols].to_numpy(dtype=float),
        actions=actions,
        n_actions=n_actions,
    )


def save_market_csv(panel: MarketPanel, path) -> None:
    cols = {"market": panel.market_ids, "t": panel.times}
    for j in range(panel.states.shape[1]):
        cols[f"x{j + 1}"] = panel.states[:, j]
    for i in range(panel.n_players):
        cols[f"a{i + 1}"] = panel.actions[:, i]
    pd.DataFrame(cols).to_csv(path, index=False)


def market_folds(
    panel: MarketPanel, seed: int = 0, n_folds: int = 2
) -> FoldAssignment:
    """Fold assignment over pooled pseudo-individuals that keeps all
    players of a market in the same fold (market-level cross-fitting)."""
    N = panel.n_players
    M = panel.n_markets
    if M < n_folds:
        raise ValueError(f"cannot cross-fit: {M} market(s) for {n_folds} folds")
    rng = np.random.default_rng(seed)
    market_fold = rng.permuted(np.arange(M) % n_folds)
    fold_by_code = np.repeat(market_fold, N)  # code m*N+i -> fold of market m
    ids = np.arange(M * N, dtype=np.int64)
    return FoldAssignment(fold_by_code, ids, n_folds, seed)


def game_estimate(
    panel: MarketPanel,
    payoff_features,
    beta: float,
    estimator: str = "pseudo_mle",
    player_specific: bool = False,
    phi=None,
    r=None,
    ccp=None,
    n_folds: int = 2,
    seed: int = 0,
    **kwargs,
) -> EstimateReport:
    """Estimate game payoff parameters from pooled per-player transitions.

    payoff_features(actions, states[, opponents]) receives the realized
    opponent actions as its optional third argument, one row per pooled
    observation (players in increasing order, self excluded); opponent
    behaviour is never integrated explicitly.  The CCP model is fit on the
    pooled data; with player_specific=True the player index becomes a
    state coordinate, so cell-based CCPs and the value-component bases are
    then effectively per player.  Cross-fitting folds group whole markets.

    estimator is one of pseudo_mle, locally_robust (flagged experimental
    for games), or recursive.
    """
    beta = check_beta(beta)
    dataset = pool_game_transitions(panel, player_specific=player_specific)
    folds = market_folds(panel, seed=seed, n_folds=n_folds)
    common = dict(phi=phi, r=r, ccp=ccp)
    if estimator == "pseudo_mle":
        report = pseudo_mle_estimate(
            dataset, payoff_features, beta, **common, **kwargs
        )
    elif estimator == "locally_robust":
        report = locally_robust_estimate(
            dataset, payoff_features, beta, folds=folds, **common, **kwargs
        )
    elif estimator == "recursive":
        report = recursive_estimate(
            dataset, payoff_features, beta, folds=folds, **common, **kwargs
        )
    else:
        raise ValueError(
            "estimator must be pseudo_mle, locally_robust, or recursive"
        )
    report.method = f"game_{report.method}"
    report.diagnostics["n_markets"] = panel.n_markets
    report.diagnostics["n_players"] = panel.n_players
    report.diagnostics["player_specific"] = player_specific
    report.diagnostics["pooled_objective"] = (
        "pseudo-likelihood over pooled per-player transitions; not "
        "efficient even with discrete states"
    )
    if estimator == "locally_robust":
        report.diagnostics["experimental"] = (
            "locally robust corrections for games are the direct "
            "single-agent analogue; treat as experimental"
        )
    report.diagnostics["profile_enumerations"] = profile_enumeration_count()
    return report

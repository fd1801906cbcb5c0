"""Panel containers, transition extraction, and fold splitting.

The estimators consume short panels of discrete choices: individuals i,
periods t, an action a_it and a state vector x_it per observation.  All
empirical moments downstream are means over the observed transitions
(a_it, x_it, a_it+1, x_it+1), t = 1..T_i-1, which never cross individuals.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .validation import as_actions, as_states

__all__ = [
    "PanelDataset",
    "Transitions",
    "FoldAssignment",
    "extract_transitions",
    "split_folds",
    "load_panel_csv",
    "save_panel_csv",
]


@dataclass
class PanelDataset:
    """A flat, (id, t)-sorted panel of discrete choices.

    Attributes
    ----------
    ids : (n_obs,) array
        Individual labels (integers or strings).
    times : (n_obs,) int array
        Period index within individual; any strictly increasing integers.
    actions : (n_obs,) int array
        Action ids in [0, n_actions).
    states : (n_obs, d) float array
        Observed state vector per observation.
    n_actions : int
        Size of the common action set.
    discrete_state_levels : tuple of int or None, optional
        Per-coordinate level counts when a coordinate is discrete and coded
        0..L-1 (None marks a continuous coordinate).  Required by saturated
        bases; used by polynomial bases to cap exponents.
    extras : (n_obs, e) float array, optional
        Additional payoff covariates carried alongside the state (for
        example realized opponent actions in pooled game panels).  They are
        visible to payoff features only, never to basis functions.
    """

    ids: np.ndarray
    times: np.ndarray
    actions: np.ndarray
    states: np.ndarray
    n_actions: int
    discrete_state_levels: tuple | None = None
    extras: np.ndarray | None = None
    # derived, set in __post_init__
    individual_codes: np.ndarray = field(init=False, repr=False)
    unique_ids: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.actions = as_actions(self.actions, int(self.n_actions))
        self.states = as_states(self.states)
        self.times = np.asarray(self.times, dtype=np.int64)
        self.ids = np.asarray(self.ids)
        n = self.actions.shape[0]
        if not (self.ids.shape[0] == self.times.shape[0] == self.states.shape[0] == n):
            raise ValueError("ids, times, actions, states must share their length")
        if self.extras is not None:
            self.extras = np.asarray(self.extras, dtype=float)
            if self.extras.ndim == 1:
                self.extras = self.extras[:, None]
            if self.extras.shape[0] != n:
                raise ValueError("extras must have one row per observation")
        if self.discrete_state_levels is not None:
            levels = tuple(
                None if l is None else int(l) for l in self.discrete_state_levels
            )
            if len(levels) != self.states.shape[1]:
                raise ValueError(
                    "discrete_state_levels needs one entry per state coordinate"
                )
            for j, l in enumerate(levels):
                if l is None:
                    continue
                col = self.states[:, j]
                if l < 1 or np.any(col != np.round(col)) or (
                    col.size and (col.min() < 0 or col.max() > l - 1)
                ):
                    raise ValueError(
                        f"state coordinate {j} is declared discrete with {l} "
                        "levels but is not coded as integers in [0, levels)"
                    )
            self.discrete_state_levels = levels

        self.unique_ids, codes = np.unique(self.ids, return_inverse=True)
        self.individual_codes = codes.astype(np.int64)
        # canonical (id, t) ordering; reject duplicate (id, t) pairs
        order = np.lexsort((self.times, self.individual_codes))
        if not np.array_equal(order, np.arange(n)):
            self.ids = self.ids[order]
            self.times = self.times[order]
            self.actions = self.actions[order]
            self.states = self.states[order]
            self.individual_codes = self.individual_codes[order]
            if self.extras is not None:
                self.extras = self.extras[order]
        key = self.individual_codes * (self.times.max() + 1 if n else 1) + self.times
        if n and np.any(np.diff(key) == 0):
            raise ValueError("duplicate (id, t) observation")

    # -- basic shape info ---------------------------------------------------

    @property
    def n_obs(self) -> int:
        return self.actions.shape[0]

    @property
    def n_individuals(self) -> int:
        return self.unique_ids.shape[0]

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    def subset_individuals(self, keep_codes: np.ndarray) -> "PanelDataset":
        """Dataset restricted to individuals whose code is in keep_codes."""
        mask = np.isin(self.individual_codes, keep_codes)
        return PanelDataset(
            ids=self.ids[mask],
            times=self.times[mask],
            actions=self.actions[mask],
            states=self.states[mask],
            n_actions=self.n_actions,
            discrete_state_levels=self.discrete_state_levels,
            extras=None if self.extras is None else self.extras[mask],
        )

    @staticmethod
    def from_transition_pairs(
        actions,
        states,
        next_actions,
        next_states,
        n_actions: int,
        weights=None,
        discrete_state_levels: tuple | None = None,
    ) -> tuple["PanelDataset", "Transitions"]:
        """Build a dataset of weighted (a, x) -> (a', x') pairs.

        Each pair becomes a two-period pseudo-individual.  Useful for
        enumerated populations where transition tuples carry probability
        weights instead of being sampled.
        """
        a = np.asarray(actions, dtype=np.int64)
        x = as_states(states)
        a2 = np.asarray(next_actions, dtype=np.int64)
        x2 = as_states(next_states)
        n = a.shape[0]
        if not (a2.shape[0] == x.shape[0] == x2.shape[0] == n):
            raise ValueError("transition pair arrays must share their length")
        ds = PanelDataset(
            ids=np.repeat(np.arange(n), 2),
            times=np.tile(np.array([0, 1]), n),
            actions=np.column_stack([a, a2]).ravel(),
            states=np.stack([x, x2], axis=1).reshape(2 * n, x.shape[1]),
            n_actions=n_actions,
            discrete_state_levels=discrete_state_levels,
        )
        trans = extract_transitions(ds)
        if weights is not None:
            w = np.asarray(weights, dtype=float)
            if w.shape != (n,) or np.any(w < 0):
                raise ValueError("weights must be a nonnegative length-n vector")
            trans = trans.with_weights(w)
        return ds, trans


@dataclass
class Transitions:
    """Index view of the observed transitions of a dataset.

    now_idx/next_idx index observation rows of the owning PanelDataset;
    ordering is deterministic (individuals in label order, then by t).
    weights default to one and may carry probability or posterior weights.
    """

    now_idx: np.ndarray
    next_idx: np.ndarray
    weights: np.ndarray
    individual_codes: np.ndarray
    n_skipped_individuals: int = 0

    @property
    def n(self) -> int:
        return self.now_idx.shape[0]

    def with_weights(self, weights: np.ndarray) -> "Transitions":
        w = np.asarray(weights, dtype=float)
        if w.shape != self.now_idx.shape:
            raise ValueError("weights must have one entry per transition")
        return Transitions(
            self.now_idx, self.next_idx, w, self.individual_codes,
            self.n_skipped_individuals,
        )

    def subset(self, mask: np.ndarray) -> "Transitions":
        return Transitions(
            self.now_idx[mask], self.next_idx[mask], self.weights[mask],
            self.individual_codes[mask], self.n_skipped_individuals,
        )


def extract_transitions(dataset: PanelDataset) -> Transitions:
    """List the within-individual transition pairs of a panel.

    Individuals with a single observation contribute nothing and are counted
    with a warning; transitions never cross individuals.
    """
    codes = dataset.individual_codes
    n = dataset.n_obs
    if n == 0:
        return Transitions(
            np.empty(0, np.int64), np.empty(0, np.int64),
            np.empty(0, float), np.empty(0, np.int64), 0,
        )
    same = codes[1:] == codes[:-1]
    now = np.flatnonzero(same)
    nxt = now + 1
    counts = np.bincount(codes, minlength=dataset.n_individuals)
    skipped = int(np.sum(counts == 1))
    if skipped:
        warnings.warn(
            f"{skipped} individual(s) with a single observation contribute "
            "no transitions",
            stacklevel=2,
        )
    return Transitions(
        now_idx=now.astype(np.int64),
        next_idx=nxt.astype(np.int64),
        weights=np.ones(now.shape[0]),
        individual_codes=codes[now],
        n_skipped_individuals=skipped,
    )


@dataclass
class FoldAssignment:
    """Individual-level fold labels for cross-fitting."""

    fold_by_code: np.ndarray
    unique_ids: np.ndarray
    n_folds: int
    seed: int | None

    def folds_of(self, individual_codes: np.ndarray) -> np.ndarray:
        return self.fold_by_code[individual_codes]

    def codes_in_fold(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.fold_by_code == fold)

    def swap(self) -> "FoldAssignment":
        """Relabel folds f -> n_folds-1-f (two folds: swap)."""
        return FoldAssignment(
            self.n_folds - 1 - self.fold_by_code,
            self.unique_ids, self.n_folds, self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "n_folds": int(self.n_folds),
            "seed": None if self.seed is None else int(self.seed),
            "fold_sizes": np.bincount(
                self.fold_by_code, minlength=self.n_folds
            ).tolist(),
        }


def split_folds(dataset: PanelDataset, seed: int, n_folds: int = 2) -> FoldAssignment:
    """Randomly split individuals into folds of size differing by at most 1."""
    n_ind = dataset.n_individuals
    if n_folds < 2:
        raise ValueError("need at least two folds")
    if n_ind < n_folds:
        raise ValueError(
            f"cannot cross-fit: {n_ind} individual(s) for {n_folds} folds"
        )
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_ind)
    fold_by_code = np.empty(n_ind, dtype=np.int64)
    fold_by_code[perm] = np.arange(n_ind) % n_folds
    return FoldAssignment(fold_by_code, dataset.unique_ids, n_folds, seed)


def load_panel_csv(
    path,
    n_actions: int | None = None,
    discrete_state_levels: tuple | None = None,
    time_as_state: bool = False,
) -> PanelDataset:
    """Read a panel from CSV with columns id,t,a,x1..xD.

    n_actions defaults to max(a)+1.  With time_as_state=True the period
    index is appended as an extra (continuous) state coordinate.
    """
    df = pd.read_csv(path)
    required = {"id", "t", "a"}
    if not required.issubset(df.columns):
        raise ValueError(f"panel CSV must contain columns {sorted(required)}")
    state_cols = [c for c in df.columns if c.startswith("x")]
    if not state_cols:
        raise ValueError("panel CSV must contain at least one state column x1..xD")
    state_cols.sort(key=lambda c: int(c[1:]) if c[1:].isdigit() else 0)
    states = df[state_cols].to_numpy(dtype=float)
    if time_as_state:
        states = np.column_stack([states, df["t"].to_numpy(dtype=float)])
        if discrete_state_levels is not None:
            discrete_state_levels = tuple(discrete_state_levels) + (None,)
    actions = df["a"].to_numpy()
    if n_actions is None:
        n_actions = int(np.max(actions)) + 1
    return PanelDataset(
        ids=df["id"].to_numpy(),
        times=df["t"].to_numpy(dtype=np.int64),
        actions=actions,
        states=states,
        n_actions=n_actions,
        discrete_state_levels=discrete_state_levels,
    )


def save_panel_csv(dataset: PanelDataset, path) -> None:
    """Write a panel to CSV in the id,t,a,x1..xD layout."""
    cols = {"id": dataset.ids, "t": dataset.times, "a": dataset.actions}
    for j in range(dataset.state_dim):
        cols[f"x{j + 1}"] = dataset.states[:, j]
    pd.DataFrame(cols).to_csv(path, index=False)

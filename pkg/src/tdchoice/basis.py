"""Feature bases for value components and the design matrices they generate.

A basis maps an (action, state) pair to a feature vector phi(a, x).  The
linear TD machinery approximates value components as phi(a, x)' w, so basis
quality controls approximation error; the projected-fixed-point bound
degrades the best L2 approximation by at most 1/(1-beta).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .data import PanelDataset, Transitions, extract_transitions
from .validation import as_states, check_finite

__all__ = [
    "StateScaler",
    "PolynomialBasis",
    "SaturatedBasis",
    "CustomBasis",
    "TypeIndexedBasis",
    "DesignSystem",
    "build_design",
    "gram_min_eig",
]


@dataclass
class StateScaler:
    """Per-coordinate affine map of states onto [-1, 1].

    Fitted bounds come from the observed data range, which keeps monomial
    columns well conditioned even when a declared grid is much wider than
    the region the data visit.  A constant coordinate maps to zero.
    """

    center: np.ndarray
    halfwidth: np.ndarray

    @staticmethod
    def fit(states: np.ndarray, levels: tuple | None = None) -> "StateScaler":
        lo = states.min(axis=0) if states.size else np.zeros(states.shape[1])
        hi = states.max(axis=0) if states.size else np.zeros(states.shape[1])
        center = (hi + lo) / 2.0
        halfwidth = (hi - lo) / 2.0
        halfwidth[halfwidth == 0.0] = 1.0
        return StateScaler(center=center, halfwidth=halfwidth)

    def apply(self, states: np.ndarray) -> np.ndarray:
        return (states - self.center) / self.halfwidth

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "halfwidth": self.halfwidth.tolist()}


def _monomial_exponents(
    degree: int,
    action_cap: int,
    state_caps: list[int],
    budget_mask: list[bool],
) -> list[tuple]:
    """Enumerate exponent tuples (action first, then state coordinates).

    Coordinates flagged in budget_mask share the total-degree budget; the
    action and low-cardinality discrete coordinates interact freely within
    their per-coordinate caps.  Columns are ordered by total degree, then
    earlier coordinates take higher powers first.
    """
    ranges = [range(action_cap + 1)] + [range(c + 1) for c in state_caps]
    budget = [False] + list(budget_mask)
    out = []
    def rec(prefix):
        if len(prefix) == len(ranges):
            out.append(tuple(prefix))
            return
        for e in ranges[len(prefix)]:
            used = sum(p for p, b in zip(prefix + [e], budget) if b)
            if used <= degree:
                rec(prefix + [e])
    rec([])
    out.sort(key=lambda t: (sum(t), tuple(-e for e in t)))
    return out


class PolynomialBasis(BaseEstimator):
    """Polynomial features in (action, rescaled states).

    Each coordinate contributes powers 0..min(degree, levels-1); coordinates
    without a (small) declared level count share the total-degree budget,
    while the action and low-cardinality discrete coordinates interact
    freely.  Degree 1 on a scalar state gives [1, a, x, a*x]; degree 3 on
    (mileage, two-level type) gives 16 columns.
    """

    def __init__(self, degree: int = 3, include_action: bool = True):
        self.degree = degree
        self.include_action = include_action

    def fit(self, dataset: PanelDataset) -> "PolynomialBasis":
        if self.degree < 0:
            raise ValueError("degree must be nonnegative")
        d = dataset.state_dim
        levels = dataset.discrete_state_levels or (None,) * d
        self.n_actions_ = dataset.n_actions
        self.scaler_ = StateScaler.fit(dataset.states, levels)
        action_cap = min(self.degree, dataset.n_actions - 1) if self.include_action else 0
        caps, budget = [], []
        for l in levels:
            if l is not None and l - 1 <= self.degree:
                caps.append(l - 1)
                budget.append(False)
            else:
                caps.append(self.degree)
                budget.append(True)
        self.exponents_ = _monomial_exponents(self.degree, action_cap, caps, budget)
        self.k_ = len(self.exponents_)
        return self

    def _powers(self, scaled: np.ndarray, caps: list[int]) -> list[np.ndarray]:
        pows = []
        for j, cap in enumerate(caps):
            col = scaled[:, j]
            table = np.ones((scaled.shape[0], cap + 1))
            for p in range(1, cap + 1):
                table[:, p] = table[:, p - 1] * col
            pows.append(table)
        return pows

    def evaluate(self, actions: np.ndarray, states: np.ndarray) -> np.ndarray:
        """phi(a, x) rows for given actions and raw states."""
        a = np.asarray(actions, dtype=np.int64)
        x = as_states(states)
        if a.size and (a.min() < 0 or a.max() >= self.n_actions_):
            raise ValueError("action id out of range for this basis")
        scaled = self.scaler_.apply(x)
        max_a = max(e[0] for e in self.exponents_)
        a_pow = np.ones((a.shape[0], max_a + 1))
        for p in range(1, max_a + 1):
            a_pow[:, p] = a_pow[:, p - 1] * a
        max_state = [max(e[1 + j] for e in self.exponents_) for j in range(x.shape[1])]
        s_pow = self._powers(scaled, max_state)
        cols = []
        for exps in self.exponents_:
            col = a_pow[:, exps[0]].copy()
            for j, p in enumerate(exps[1:]):
                if p:
                    col *= s_pow[j][:, p]
            cols.append(col)
        return np.column_stack(cols)

    def evaluate_states(self, states: np.ndarray) -> np.ndarray:
        """State-only feature rows (the action-free monomials)."""
        x = as_states(states)
        keep = [i for i, e in enumerate(self.exponents_) if e[0] == 0]
        dummy = np.zeros(x.shape[0], dtype=np.int64)
        return self.evaluate(dummy, x)[:, keep]

    def describe(self) -> dict:
        return {
            "kind": "polynomial",
            "degree": int(self.degree),
            "include_action": bool(self.include_action),
            "k": int(self.k_),
            "scaler": self.scaler_.to_dict(),
        }


class SaturatedBasis(BaseEstimator):
    """One-hot indicators over the full (action, state-cell) grid.

    Requires declared discrete levels for every state coordinate.  Cell
    order is action-major, then mixed-radix over state coordinates, so
    (a=1, x=2) with two actions and three states lights column 5 of 6.
    """

    def __init__(self):
        pass

    def fit(self, dataset: PanelDataset) -> "SaturatedBasis":
        levels = dataset.discrete_state_levels
        if levels is None or any(l is None for l in levels):
            raise ValueError(
                "saturated basis requires discrete_state_levels for every "
                "state coordinate"
            )
        self.levels_ = tuple(int(l) for l in levels)
        self.n_actions_ = dataset.n_actions
        self.n_cells_ = int(np.prod(self.levels_))
        self.k_ = self.n_actions_ * self.n_cells_
        return self

    def state_cell_codes(self, states: np.ndarray) -> np.ndarray:
        x = as_states(states)
        codes = np.zeros(x.shape[0], dtype=np.int64)
        for j, l in enumerate(self.levels_):
            col = np.round(x[:, j]).astype(np.int64)
            if col.size and (col.min() < 0 or col.max() >= l):
                raise ValueError(f"state coordinate {j} outside its declared levels")
            codes = codes * l + col
        return codes

    def evaluate(self, actions: np.ndarray, states: np.ndarray) -> np.ndarray:
        a = np.asarray(actions, dtype=np.int64)
        cells = self.state_cell_codes(states)
        idx = a * self.n_cells_ + cells
        out = np.zeros((a.shape[0], self.k_))
        out[np.arange(a.shape[0]), idx] = 1.0
        return out

    def evaluate_states(self, states: np.ndarray) -> np.ndarray:
        cells = self.state_cell_codes(states)
        out = np.zeros((cells.shape[0], self.n_cells_))
        out[np.arange(cells.shape[0]), cells] = 1.0
        return out

    def describe(self) -> dict:
        return {"kind": "saturated", "levels": list(self.levels_), "k": int(self.k_)}


class CustomBasis(BaseEstimator):
    """User-supplied feature map phi(actions, states) -> (n, k)."""

    def __init__(self, fn=None, k: int | None = None, state_fn=None):
        self.fn = fn
        self.k = k
        self.state_fn = state_fn

    def fit(self, dataset: PanelDataset) -> "CustomBasis":
        if self.fn is None or self.k is None:
            raise ValueError("CustomBasis needs fn and k")
        self.n_actions_ = dataset.n_actions
        self.k_ = int(self.k)
        return self

    def evaluate(self, actions, states):
        out = np.asarray(self.fn(np.asarray(actions), as_states(states)), dtype=float)
        if out.shape != (len(actions), self.k_):
            raise ValueError("custom basis returned the wrong shape")
        return check_finite(out, "custom basis features")

    def evaluate_states(self, states):
        if self.state_fn is None:
            raise ValueError("this custom basis has no state-only feature map")
        return np.asarray(self.state_fn(as_states(states)), dtype=float)

    def describe(self) -> dict:
        return {"kind": "custom", "k": int(self.k_)}


class TypeIndexedBasis(BaseEstimator):
    """Base basis replicated per latent type (block one-hot in the type).

    The owning dataset must carry the type code as its last state
    coordinate; the base basis sees the remaining coordinates.
    """

    def __init__(self, base, n_types: int):
        self.base = base
        self.n_types = n_types

    def fit(self, dataset: PanelDataset) -> "TypeIndexedBasis":
        levels = dataset.discrete_state_levels
        if levels is None or levels[-1] != self.n_types:
            raise ValueError(
                "type-indexed basis expects the type code as the last state "
                "coordinate with n_types declared levels"
            )
        inner_levels = levels[:-1] if len(levels) > 1 else None
        inner = PanelDataset(
            ids=dataset.ids,
            times=dataset.times,
            actions=dataset.actions,
            states=dataset.states[:, :-1],
            n_actions=dataset.n_actions,
            discrete_state_levels=inner_levels,
        )
        self.base_ = self.base.fit(inner)
        self.n_actions_ = dataset.n_actions
        self.k_ = self.n_types * self.base_.k_
        return self

    def evaluate(self, actions, states):
        x = as_states(states)
        types = np.round(x[:, -1]).astype(np.int64)
        if types.size and (types.min() < 0 or types.max() >= self.n_types):
            raise ValueError("type code outside [0, n_types)")
        inner = self.base_.evaluate(actions, x[:, :-1])
        out = np.zeros((x.shape[0], self.k_))
        kb = self.base_.k_
        for k in range(self.n_types):
            rows = types == k
            out[np.ix_(rows, np.arange(k * kb, (k + 1) * kb))] = inner[rows]
        return out

    def describe(self) -> dict:
        return {
            "kind": "type_indexed",
            "n_types": int(self.n_types),
            "base": self.base_.describe(),
            "k": int(self.k_),
        }


def gram_min_eig(features: np.ndarray, weights: np.ndarray | None = None) -> float:
    """Minimum eigenvalue of the weighted mean of phi phi'."""
    w = np.ones(features.shape[0]) if weights is None else weights
    gram = (features * w[:, None]).T @ features / max(w.sum(), 1e-300)
    return float(np.linalg.eigvalsh((gram + gram.T) / 2.0)[0])


def _call_payoff(payoff_features, actions, states, extras):
    if extras is not None:
        try:
            out = payoff_features(actions, states, extras)
        except TypeError:
            out = payoff_features(actions, states)
    else:
        out = payoff_features(actions, states)
    out = np.asarray(out, dtype=float)
    if out.ndim == 1:
        out = out[:, None]
    if out.shape[0] != actions.shape[0]:
        raise ValueError("payoff features must return one row per observation")
    return check_finite(out, "payoff features")


@dataclass
class DesignSystem:
    """Evaluated design matrices for one dataset / transition set.

    Observation-level matrices are indexed into transition-level views via
    now_idx/next_idx, so the heavy evaluation happens once.
    """

    dataset: PanelDataset
    transitions: Transitions
    phi: object
    r: object
    phi_obs: np.ndarray          # (n_obs, k_phi) at the observed action
    r_obs: np.ndarray            # (n_obs, k_r)
    phi_actions: np.ndarray      # (n_obs, A, k_phi) at every action
    r_actions: np.ndarray        # (n_obs, A, k_r)
    z_now: np.ndarray            # (n_trans, J) payoff features at realized rows
    diagnostics: dict

    @property
    def k_phi(self) -> int:
        return self.phi_obs.shape[1]

    @property
    def k_r(self) -> int:
        return self.r_obs.shape[1]

    @property
    def n_transitions(self) -> int:
        return self.transitions.n

    @property
    def theta_dim(self) -> int:
        return self.z_now.shape[1]

    @property
    def phi_now(self) -> np.ndarray:
        return self.phi_obs[self.transitions.now_idx]

    @property
    def phi_next(self) -> np.ndarray:
        return self.phi_obs[self.transitions.next_idx]

    @property
    def r_now(self) -> np.ndarray:
        return self.r_obs[self.transitions.now_idx]

    @property
    def r_next(self) -> np.ndarray:
        return self.r_obs[self.transitions.next_idx]

    @property
    def weights(self) -> np.ndarray:
        return self.transitions.weights

    def subset(self, mask: np.ndarray) -> "DesignSystem":
        """Design restricted to a transition subset (observation arrays shared)."""
        return DesignSystem(
            dataset=self.dataset,
            transitions=self.transitions.subset(mask),
            phi=self.phi,
            r=self.r,
            phi_obs=self.phi_obs,
            r_obs=self.r_obs,
            phi_actions=self.phi_actions,
            r_actions=self.r_actions,
            z_now=self.z_now[mask],
            diagnostics=self.diagnostics,
        )


def build_design(
    dataset: PanelDataset,
    payoff_features,
    phi,
    r=None,
    transitions: Transitions | None = None,
    gram_tol: float = 1e-12,
) -> DesignSystem:
    """Evaluate bases and payoff features into a DesignSystem.

    phi and r are basis objects (fitted here if not already); r defaults to
    the phi spec.  Emits a warning when a Gram matrix of the transition rows
    is numerically rank-deficient; the TD solver handles consistent singular
    systems by a minimum-norm fallback.
    """
    if transitions is None:
        transitions = extract_transitions(dataset)
    if transitions.n == 0:
        raise ValueError("dataset has no transitions")
    phi = phi.fit(dataset) if not hasattr(phi, "k_") else phi
    if r is None:
        r = phi
    else:
        r = r.fit(dataset) if not hasattr(r, "k_") else r

    n_obs, A = dataset.n_obs, dataset.n_actions
    phi_obs = phi.evaluate(dataset.actions, dataset.states)
    r_obs = r.evaluate(dataset.actions, dataset.states) if r is not phi else phi_obs
    phi_actions = np.empty((n_obs, A, phi.k_))
    r_actions = phi_actions if r is phi else np.empty((n_obs, A, r.k_))
    for a in range(A):
        a_vec = np.full(n_obs, a, dtype=np.int64)
        phi_actions[:, a, :] = phi.evaluate(a_vec, dataset.states)
        if r is not phi:
            r_actions[:, a, :] = r.evaluate(a_vec, dataset.states)

    now = transitions.now_idx
    extras = None if dataset.extras is None else dataset.extras[now]
    z_now = _call_payoff(
        payoff_features, dataset.actions[now], dataset.states[now], extras
    )

    if phi.k_ >= transitions.n:
        raise ValueError(
            f"underdetermined system: k_phi={phi.k_} with only "
            f"{transitions.n} transitions"
        )

    diags = {
        "k_phi": int(phi.k_),
        "k_r": int(r.k_),
        "gram_min_eig_phi": gram_min_eig(phi_obs[now], transitions.weights),
        "gram_min_eig_r": gram_min_eig(r_obs[now], transitions.weights),
    }
    for key in ("gram_min_eig_phi", "gram_min_eig_r"):
        if diags[key] < gram_tol:
            warnings.warn(
                f"{key} = {diags[key]:.3e} below {gram_tol:.1e}: basis columns "
                "are numerically dependent on this sample",
                stacklevel=2,
            )
    return DesignSystem(
        dataset=dataset,
        transitions=transitions,
        phi=phi,
        r=r,
        phi_obs=phi_obs,
        r_obs=r_obs,
        phi_actions=phi_actions,
        r_actions=r_actions,
        z_now=z_now,
        diagnostics=diags,
    )

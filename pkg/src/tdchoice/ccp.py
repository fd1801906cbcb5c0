"""Conditional choice probability estimation and the implied shock terms.

With additive type-I extreme value shocks, the expected shock conditional
on choosing a in state x is gamma_E - ln P(a|x), so a fitted CCP model
turns observed choices into the shock-expectation targets used by the TD
solver for the value component g.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .basis import PolynomialBasis
from .data import PanelDataset
from .validation import as_states

EULER_GAMMA = float(np.euler_gamma)

__all__ = [
    "EULER_GAMMA",
    "CcpModel",
    "TabularCcp",
    "clip_probabilities",
    "shock_expectation_from_probs",
]


def clip_probabilities(probs: np.ndarray, floor: float) -> np.ndarray:
    """Clip probability rows to a floor and renormalize exactly.

    Water-filling: clipped entries sit exactly at the floor and the
    remaining entries are scaled down proportionally so each row still sums
    to one.  Rows already above the floor pass through unchanged; a row
    with no mass (or everything below the floor) becomes uniform.
    """
    p = np.asarray(probs, dtype=float)
    squeeze = p.ndim == 1
    if squeeze:
        p = p[None, :]
    n, A = p.shape
    p = np.maximum(p, 0.0)
    out = p.copy()
    if floor < 0 or floor * A >= 1.0:
        raise ValueError("clip floor must satisfy 0 <= floor < 1/n_actions")
    row_sum = out.sum(axis=1)
    dead = row_sum <= 0.0
    if np.any(dead):
        out[dead] = 1.0 / A
        row_sum[row_sum <= 0.0] = 1.0
    if floor > 0.0:
        mask = out < floor
        for _ in range(A):
            n_clipped = mask.sum(axis=1)
            all_clipped = n_clipped == A
            free_sum = np.where(mask, 0.0, out).sum(axis=1)
            free_sum[free_sum <= 0.0] = 1.0
            scale = (1.0 - floor * n_clipped) / free_sum
            cand = np.where(mask, floor, out * scale[:, None])
            cand[all_clipped] = 1.0 / A
            new_mask = mask | (cand < floor)
            new_mask[all_clipped] = mask[all_clipped]
            if np.array_equal(new_mask, mask):
                out = cand
                break
            mask = new_mask
        else:
            out = cand
    else:
        out = out / out.sum(axis=1, keepdims=True)
    return out[0] if squeeze else out


def shock_expectation_from_probs(probs: np.ndarray) -> np.ndarray:
    """gamma_E - ln P, elementwise."""
    return EULER_GAMMA - np.log(probs)


def _softmax(util: np.ndarray) -> np.ndarray:
    u = util - util.max(axis=1, keepdims=True)
    e = np.exp(u)
    return e / e.sum(axis=1, keepdims=True)


class CcpModel(BaseEstimator):
    """Choice probabilities by cell frequencies or a multinomial logit.

    Parameters
    ----------
    method : {"logit", "cells"}
        "cells" computes relative frequencies per discrete state cell and
        requires declared state levels; "logit" fits a multinomial logit on
        state features by Newton's method with a small ridge penalty (the
        penalty guarantees a unique optimum under separation or collinear
        features).
    features : basis object, callable, or None
        State-feature source for the logit: anything with evaluate_states,
        or a callable states -> (n, p).  Defaults to a cubic polynomial.
    clip_floor : float
        Predictions are floored at this value (exact water-filling).
    """

    def __init__(
        self,
        method: str = "logit",
        features=None,
        clip_floor: float = 1e-4,
        ridge: float = 1e-8,
        tol: float = 1e-9,
        max_iter: int = 200,
    ):
        self.method = method
        self.features = features
        self.clip_floor = clip_floor
        self.ridge = ridge
        self.tol = tol
        self.max_iter = max_iter

    # -- fitting ------------------------------------------------------------

    def fit(self, dataset: PanelDataset, sample_weight=None) -> "CcpModel":
        self.n_actions_ = dataset.n_actions
        w = (
            np.ones(dataset.n_obs)
            if sample_weight is None
            else np.asarray(sample_weight, dtype=float)
        )
        if self.method == "cells":
            self._fit_cells(dataset, w)
        elif self.method == "logit":
            self._fit_logit(dataset, w)
        else:
            raise ValueError(f"unknown ccp method {self.method!r}")
        return self

    def _fit_cells(self, dataset: PanelDataset, w: np.ndarray) -> None:
        levels = dataset.discrete_state_levels
        if levels is None or any(l is None for l in levels):
            raise ValueError("cells method requires discrete_state_levels")
        self.levels_ = tuple(int(l) for l in levels)
        codes = self._cell_codes(dataset.states)
        n_cells = int(np.prod(self.levels_))
        counts = np.zeros((n_cells, self.n_actions_))
        np.add.at(counts, (codes, dataset.actions), w)
        totals = counts.sum(axis=1, keepdims=True)
        with np.errstate(invalid="ignore", divide="ignore"):
            table = np.where(totals > 0, counts / totals, 0.0)
        self.table_ = table
        self.n_empty_cells_ = int(np.sum(totals == 0))
        self.diagnostics_ = {"empty_cells": self.n_empty_cells_}

    def _state_features(self, states: np.ndarray) -> np.ndarray:
        if hasattr(self.features_, "evaluate_states"):
            return self.features_.evaluate_states(states)
        return np.asarray(self.features_(as_states(states)), dtype=float)

    def _fit_logit(self, dataset: PanelDataset, w: np.ndarray) -> None:
        if self.features is None:
            self.features_ = PolynomialBasis(degree=3).fit(dataset)
        elif hasattr(self.features, "evaluate_states"):
            self.features_ = (
                self.features
                if hasattr(self.features, "k_")
                else self.features.fit(dataset)
            )
        else:
            self.features_ = self.features
        X = self._state_features(dataset.states)
        y = dataset.actions
        n, p = X.shape
        A = self.n_actions_
        B = np.zeros((p, A - 1))
        wsum = w.sum()
        onehot = np.zeros((n, A - 1))
        for j in range(A - 1):
            onehot[:, j] = (y == j + 1).astype(float)

        def objective(Bm):
            util = np.concatenate([np.zeros((n, 1)), X @ Bm], axis=1)
            um = util - util.max(axis=1, keepdims=True)
            logZ = np.log(np.exp(um).sum(axis=1))
            ll = float(
                np.sum(w * (um[np.arange(n), y] - logZ))
                - 0.5 * self.ridge * np.sum(Bm * Bm)
            )
            P = np.exp(um)
            P /= P.sum(axis=1, keepdims=True)
            return ll, P

        ll, P = objective(B)
        grad_norm = np.inf
        for it in range(self.max_iter):
            G = X.T @ (w[:, None] * (onehot - P[:, 1:])) - self.ridge * B
            grad_norm = np.abs(G).max() / max(wsum, 1.0)
            if grad_norm <= self.tol:
                break
            H = np.zeros((p * (A - 1), p * (A - 1)))
            for j in range(A - 1):
                for k in range(j, A - 1):
                    pj, pk = P[:, j + 1], P[:, k + 1]
                    wjk = w * (pj * ((j == k) - pk))
                    block = -(X * wjk[:, None]).T @ X
                    H[j * p:(j + 1) * p, k * p:(k + 1) * p] = block
                    if k != j:
                        H[k * p:(k + 1) * p, j * p:(j + 1) * p] = block.T
            H -= self.ridge * np.eye(p * (A - 1))
            try:
                step = np.linalg.solve(H, -G.reshape(-1, order="F"))
            except np.linalg.LinAlgError:
                step = np.linalg.lstsq(H, -G.reshape(-1, order="F"), rcond=None)[0]
            step = step.reshape((p, A - 1), order="F")
            scale = 1.0
            for _ in range(50):
                ll_new, P_new = objective(B + scale * step)
                if ll_new >= ll - 1e-12 * abs(ll):
                    break
                scale *= 0.5
            B = B + scale * step
            ll, P = ll_new, P_new
        else:
            raise RuntimeError(
                f"ccp logit did not converge: gradient norm {grad_norm:.3e} "
                f"after {self.max_iter} iterations"
            )
        self.coef_ = B
        self.diagnostics_ = {
            "iterations": it, "gradient_norm": float(grad_norm),
            "loglik": float(ll),
        }

    # -- prediction ----------------------------------------------------------

    def _cell_codes(self, states: np.ndarray) -> np.ndarray:
        x = as_states(states)
        codes = np.zeros(x.shape[0], dtype=np.int64)
        for j, l in enumerate(self.levels_):
            col = np.round(x[:, j]).astype(np.int64)
            col = np.clip(col, 0, l - 1)
            codes = codes * l + col
        return codes

    def predict_proba(self, states) -> np.ndarray:
        """Clipped CCPs, one row per state, columns summing to one."""
        x = as_states(states)
        if self.method == "cells":
            raw = self.table_[self._cell_codes(x)]
        else:
            X = self._state_features(x)
            util = np.concatenate(
                [np.zeros((X.shape[0], 1)), X @ self.coef_], axis=1
            )
            raw = _softmax(util)
        return clip_probabilities(raw, self.clip_floor)

    def shock_expectation(self, actions, states) -> np.ndarray:
        """gamma_E - ln eta(a|x) at the given (action, state) pairs."""
        probs = self.predict_proba(states)
        a = np.asarray(actions, dtype=np.int64)
        return EULER_GAMMA - np.log(probs[np.arange(a.shape[0]), a])

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "n_actions": int(self.n_actions_),
            "clip_floor": float(self.clip_floor),
        }
        if self.method == "cells":
            out["levels"] = list(self.levels_)
            out["table"] = self.table_.tolist()
        else:
            out["coef"] = self.coef_.tolist()
            if hasattr(self.features_, "describe"):
                out["features"] = self.features_.describe()
        return out


class TabularCcp(BaseEstimator):
    """Exact CCP table over discrete state cells (population use and tests)."""

    def __init__(self, levels: tuple, table: np.ndarray, clip_floor: float = 0.0):
        self.levels = levels
        self.table = table
        self.clip_floor = clip_floor

    @property
    def n_actions_(self) -> int:
        return np.asarray(self.table).shape[1]

    def _cell_codes(self, states: np.ndarray) -> np.ndarray:
        x = as_states(states)
        codes = np.zeros(x.shape[0], dtype=np.int64)
        for j, l in enumerate(self.levels):
            codes = codes * int(l) + np.round(x[:, j]).astype(np.int64)
        return codes

    def fit(self, dataset, sample_weight=None) -> "TabularCcp":
        """No-op: the table is fixed at construction."""
        return self

    def predict_proba(self, states) -> np.ndarray:
        raw = np.asarray(self.table, dtype=float)[self._cell_codes(states)]
        if self.clip_floor > 0.0:
            return clip_probabilities(raw, self.clip_floor)
        return raw

    def shock_expectation(self, actions, states) -> np.ndarray:
        probs = self.predict_proba(states)
        a = np.asarray(actions, dtype=np.int64)
        return EULER_GAMMA - np.log(probs[np.arange(a.shape[0]), a])

"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np

__all__ = [
    "check_beta",
    "as_actions",
    "as_states",
    "as_rng",
    "check_finite",
]


def check_beta(beta: float) -> float:
    """Validate a discount factor, requiring 0 <= beta < 1."""
    beta = float(beta)
    if not np.isfinite(beta) or beta < 0.0 or beta >= 1.0:
        raise ValueError(f"discount factor must satisfy 0 <= beta < 1, got {beta}")
    return beta


def as_actions(actions, n_actions: int) -> np.ndarray:
    """Coerce to an integer action array and check the ids are in range."""
    a = np.asarray(actions)
    if a.ndim != 1:
        raise ValueError("actions must be one-dimensional")
    if not np.issubdtype(a.dtype, np.integer):
        af = np.asarray(actions, dtype=float)
        a = af.astype(np.int64)
        if np.any(af != a):
            raise ValueError("actions must be integers")
    a = a.astype(np.int64)
    if n_actions < 2:
        raise ValueError("need at least two actions")
    if a.size and (a.min() < 0 or a.max() >= n_actions):
        raise ValueError(
            f"action ids must lie in [0, {n_actions - 1}], "
            f"got range [{a.min()}, {a.max()}]"
        )
    return a


def as_states(states) -> np.ndarray:
    """Coerce states to a float (n, d) matrix; a vector becomes one column."""
    x = np.asarray(states, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ValueError("states must be a vector or a matrix")
    check_finite(x, "states")
    return x


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def as_rng(seed) -> np.random.Generator:
    """Accept a seed, a SeedSequence, or a ready Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)

"""Choice probabilities, pseudo-likelihood, and moment-score pieces.

With fitted value-component weights (Omega for the per-parameter payoff
accumulators, xi for the shock accumulator) the conditional value of action
a at state x is h(a, x)' theta + g(a, x), and choices follow a multinomial
logit in those values.  The structural parameters maximize the resulting
pseudo-likelihood; the locally robust pipeline instead solves corrected
moment equations built from the same pieces.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

from .basis import DesignSystem

__all__ = [
    "ComponentValues",
    "component_values",
    "pseudo_mle",
    "PseudoMleResult",
    "ScorePieces",
    "score_pieces",
]


@dataclass
class ComponentValues:
    """Per-row action values of the fitted components.

    h has shape (n, A, J): payoff accumulator per parameter dimension.
    g has shape (n, A): shock accumulator.  actions are the observed
    choices and weights the row masses used in all means.
    """

    h: np.ndarray
    g: np.ndarray
    actions: np.ndarray
    weights: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.h.shape[0]

    @property
    def n_actions(self) -> int:
        return self.h.shape[1]

    @property
    def theta_dim(self) -> int:
        return self.h.shape[2]

    def utilities(self, theta: np.ndarray) -> np.ndarray:
        return self.h @ np.asarray(theta, dtype=float) + self.g

    def probabilities(self, theta: np.ndarray) -> np.ndarray:
        return softmax(self.utilities(theta), axis=1)

    def log_likelihood(self, theta: np.ndarray) -> float:
        u = self.utilities(theta)
        chosen = u[np.arange(self.n_rows), self.actions]
        return float(self.weights @ (chosen - logsumexp(u, axis=1)))

    def moment_rows(self, theta: np.ndarray) -> np.ndarray:
        """m(i, l) = h_l(a_i, x_i) - sum_a pi(a|x_i) h_l(a, x_i)."""
        probs = self.probabilities(theta)
        h_obs = self.h[np.arange(self.n_rows), self.actions]
        h_bar = np.einsum("na,naj->nj", probs, self.h)
        return h_obs - h_bar

    def score(self, theta: np.ndarray) -> np.ndarray:
        return self.moment_rows(theta).T @ self.weights

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        """Weighted log-likelihood Hessian: minus the mean choice-probability
        covariance of h, scaled by total weight."""
        probs = self.probabilities(theta)
        pw = probs * self.weights[:, None]
        second = np.einsum("na,naj,nak->jk", pw, self.h, self.h)
        h_bar = np.einsum("na,naj->nj", probs, self.h)
        first = np.einsum("n,nj,nk->jk", self.weights, h_bar, h_bar)
        return first - second

    def covariance_matrix(self, theta: np.ndarray) -> np.ndarray:
        """Mean (over weights) of Cov_pi(h, h): the moment Jacobian is its
        negative."""
        return -self.hessian(theta) / self.weights.sum()


def component_values(
    design: DesignSystem,
    Omega: np.ndarray,
    xi: np.ndarray,
    rows: str = "transitions",
    weights: np.ndarray | None = None,
    mask: np.ndarray | None = None,
) -> ComponentValues:
    """Evaluate h and g on transition rows (default) or all observations.

    rows="transitions" indexes the observation at the start of each
    within-individual transition and uses transition weights, matching the
    sample-mean convention of the estimating equations; rows="observations"
    covers every panel row (used by the mixture E/M steps).
    """
    h_all = np.einsum("nak,kj->naj", design.phi_actions, Omega)
    g_all = design.r_actions @ xi
    if rows == "transitions":
        idx = design.transitions.now_idx
        w = design.weights if weights is None else np.asarray(weights, float)
        if mask is not None:
            idx, w = idx[mask], w[mask]
        return ComponentValues(
            h=h_all[idx], g=g_all[idx],
            actions=design.dataset.actions[idx], weights=w,
        )
    if rows == "observations":
        w = (np.ones(design.dataset.n_obs) if weights is None
             else np.asarray(weights, float))
        return ComponentValues(
            h=h_all, g=g_all, actions=design.dataset.actions, weights=w,
        )
    raise ValueError("rows must be 'transitions' or 'observations'")


@dataclass
class PseudoMleResult:
    theta: np.ndarray
    log_likelihood: float
    gradient_norm: float
    n_iter: int
    hessian: np.ndarray
    converged: bool

    def to_dict(self) -> dict:
        return {
            "theta": self.theta.tolist(),
            "log_likelihood": float(self.log_likelihood),
            "gradient_norm": float(self.gradient_norm),
            "n_iter": int(self.n_iter),
            "converged": bool(self.converged),
        }


def pseudo_mle(
    values: ComponentValues,
    theta0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> PseudoMleResult:
    """Newton maximization of the logit pseudo-likelihood in theta.

    The objective is globally concave in theta (the Hessian is minus a
    covariance), so Newton with step halving converges from any start.
    Raises if the Hessian is numerically flat in some direction, which
    means the payoff features do not identify that parameter combination.
    """
    J = values.theta_dim
    theta = np.zeros(J) if theta0 is None else np.array(theta0, dtype=float)
    wsum = values.weights.sum()
    if wsum <= 0:
        raise ValueError("row weights must have positive total mass")
    ll = values.log_likelihood(theta)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        grad = values.score(theta)
        gnorm = float(np.max(np.abs(grad))) / wsum
        if gnorm <= tol:
            return PseudoMleResult(theta, ll, gnorm, n_iter - 1,
                                   values.hessian(theta), True)
        H = values.hessian(theta)
        eigs = np.linalg.eigvalsh(-H)
        if eigs[0] <= 1e-12 * max(1.0, eigs[-1]):
            raise RuntimeError(
                "theta not identified: pseudo-likelihood is flat along some "
                f"parameter direction (information eigenvalues {eigs.tolist()}); the payoff "
                "features do not identify theta on this sample"
            )
        step = np.linalg.solve(-H, grad)
        scale = 1.0
        for _ in range(40):
            cand = theta + scale * step
            ll_new = values.log_likelihood(cand)
            if ll_new >= ll - 1e-12 * abs(ll):
                break
            scale *= 0.5
        else:
            raise RuntimeError(
                "pseudo-likelihood line search failed to find an "
                "improving step; the problem is numerically degenerate"
            )
        theta, ll = cand, ll_new
    grad = values.score(theta)
    gnorm = float(np.max(np.abs(grad))) / wsum
    if gnorm > tol:
        raise RuntimeError(
            f"pseudo-likelihood Newton did not converge in {max_iter} "
            f"iterations (scaled gradient norm {gnorm:.3e})"
        )
    return PseudoMleResult(theta, ll, gnorm, max_iter,
                           values.hessian(theta), True)


@dataclass
class ScorePieces:
    """Precomputed choice-probability moments used by the corrections.

    All arrays are per transition row: probs (n, A); phi_bar / r_bar are
    probability-weighted mean features (n, k); S_phi / S_r are
    probability-weighted h-feature cross moments (n, J, k); h_bar is the
    probability-weighted mean of h (n, J).
    """

    theta: np.ndarray
    probs: np.ndarray
    phi_obs: np.ndarray
    phi_bar: np.ndarray
    r_bar: np.ndarray
    S_phi: np.ndarray
    S_r: np.ndarray
    h_bar: np.ndarray

    def omega_rows(self, l: int, j: int) -> np.ndarray:
        """Per-row derivative of moment l in the weights of payoff
        component j: [j==l](phi(a) - phi_bar) - theta_j (S_l - h_bar_l phi_bar)."""
        rows = -self.theta[j] * (
            self.S_phi[:, l, :] - self.h_bar[:, l, None] * self.phi_bar
        )
        if j == l:
            rows = rows + (self.phi_obs - self.phi_bar)
        return rows

    def xi_rows(self, l: int) -> np.ndarray:
        """Per-row derivative of moment l in the shock-component weights:
        -(S_r_l - h_bar_l r_bar)."""
        return -(self.S_r[:, l, :] - self.h_bar[:, l, None] * self.r_bar)


def score_pieces(
    design: DesignSystem,
    values: ComponentValues,
    theta: np.ndarray,
    mask: np.ndarray | None = None,
) -> ScorePieces:
    """Assemble the probability-weighted feature moments at theta.

    values must be transition-row values on the same design (and mask)."""
    idx = design.transitions.now_idx
    if mask is not None:
        idx = idx[mask]
    if len(idx) != values.n_rows:
        raise ValueError("values rows do not match the design transitions")
    theta = np.asarray(theta, dtype=float)
    probs = values.probabilities(theta)
    phi_a = design.phi_actions[idx]
    r_a = design.r_actions[idx]
    return ScorePieces(
        theta=theta,
        probs=probs,
        phi_obs=design.phi_obs[idx],
        phi_bar=np.einsum("na,nak->nk", probs, phi_a),
        r_bar=np.einsum("na,nak->nk", probs, r_a),
        S_phi=np.einsum("na,naj,nak->njk", probs, values.h, phi_a),
        S_r=np.einsum("na,naj,nak->njk", probs, values.h, r_a),
        h_bar=np.einsum("na,naj->nj", probs, values.h),
    )

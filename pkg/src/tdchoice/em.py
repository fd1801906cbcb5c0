"""Finite-mixture estimation for panels with permanent latent types.

Each individual carries an unobserved type k in {0..K-1} that shifts the
payoff through the feature map: the panel is expanded with the type code
appended as an extra state coordinate, value components get a separate
weight block per type (block one-hot basis), and an EM loop alternates

  M-step: posterior-weighted TD solves for the value components and a
          posterior-weighted pseudo-MLE for theta on the transition rows
          (periods 1..T-1, the same sample the base estimators use),
  E-step: posterior type probabilities and type shares by Bayes' rule from
          the model-implied choice likelihoods of every panel row
          (computed in the log domain), plus the per-(row, type)
          shock-expectation table e_dot = gamma - ln l used by the next
          M-step.

State transitions must not depend on the type given the action, so
transition densities cancel from the posterior.  With K = 1 the loop
reduces exactly to the recursive (CCP-free) estimator.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .basis import PolynomialBasis, TypeIndexedBasis, build_design
from .ccp import EULER_GAMMA
from .data import PanelDataset
from .estimators import EstimateReport, _default_ccp, _jsonable
from .likelihood import component_values, pseudo_mle
from .td import assemble_td_system, solve_h_all, solve_td
from .validation import check_beta

__all__ = ["MixtureState", "em_estimate", "extend_with_types"]

_PROB_FLOOR = 1e-12
_SHARE_FLOOR = 1e-6


def extend_with_types(dataset: PanelDataset, n_types: int) -> PanelDataset:
    """Replicate every observation once per type, appending the type code
    as the last state coordinate (declared with n_types levels).

    Each (individual, type) pair becomes its own trajectory with id
    base_code * n_types + type; after the canonical (id, time) sort the
    panel is individual-major with the n_types copies of an individual's
    rows adjacent.
    """
    if n_types < 1:
        raise ValueError("n_types must be at least 1")
    n, K = dataset.n_obs, n_types
    ids = np.concatenate(
        [dataset.individual_codes * K + k for k in range(K)]
    )
    times = np.tile(dataset.times, K)
    actions = np.tile(dataset.actions, K)
    type_col = np.repeat(np.arange(K, dtype=float), n)
    states = np.column_stack(
        [np.tile(dataset.states, (K, 1)), type_col]
    )
    levels = dataset.discrete_state_levels
    levels_ext = (tuple(levels) if levels is not None
                  else (None,) * dataset.state_dim) + (K,)
    extras = (None if dataset.extras is None
              else np.tile(dataset.extras, (K, 1)))
    return PanelDataset(
        ids=ids, times=times, actions=actions, states=states,
        n_actions=dataset.n_actions, discrete_state_levels=levels_ext,
        extras=extras,
    )


def _ext_row_structure(dataset: PanelDataset, ext: PanelDataset, n_types: int):
    """Map each extended row to (base individual code, type, base row).

    Both panels are canonically sorted by (id, time) and extended ids are
    base_code * K + type, so each (individual, type) trajectory in the
    extended panel lists the base individual's rows in time order.
    """
    K = n_types
    ext_id_vals = ext.unique_ids[ext.individual_codes]
    ext_base = (ext_id_vals // K).astype(int)
    ext_type = (ext_id_vals % K).astype(int)
    # position of each row within its (individual, type) trajectory
    codes = ext.individual_codes
    new_traj = np.flatnonzero(np.r_[True, codes[1:] != codes[:-1]])
    lengths = np.diff(np.r_[new_traj, ext.n_obs])
    pos = np.arange(ext.n_obs) - np.repeat(new_traj, lengths)
    # first base row of each base individual (base codes are sorted)
    base_first = np.searchsorted(dataset.individual_codes,
                                 np.arange(dataset.n_individuals))
    base_row = base_first[ext_base] + pos
    return ext_base, ext_type, base_row


def _random_posterior(n: int, n_types: int, rng, scale: float = 0.5):
    """Random perturbation of the uniform posterior, rows positive and
    summing to one."""
    base = np.full((n, n_types), 1.0 / n_types)
    jitter = rng.uniform(-scale / n_types, scale / n_types,
                         size=(n, n_types))
    post = np.clip(base + jitter, 1e-3 / n_types, None)
    return post / post.sum(axis=1, keepdims=True)


@dataclass
class MixtureState:
    """Current mixture iterate: shares, posteriors, shock table, and the
    value-component / structural parameters."""

    K: int
    pi: np.ndarray                 # (K,) type shares
    p: np.ndarray                  # (n_individuals, K) posteriors
    e_dot: np.ndarray              # (n_ext_obs,) shock table gamma - ln l
    omega: np.ndarray              # (k_ext, J) payoff-component weights
    xi: np.ndarray                 # (k_ext,) shock-component weights
    theta: np.ndarray              # (J,) structural parameters
    log_likelihood: float = np.nan

    def to_dict(self) -> dict:
        return _jsonable({
            "K": self.K,
            "pi": self.pi,
            "p": self.p,
            "e_dot": self.e_dot,
            "omega": self.omega,
            "xi": self.xi,
            "theta": self.theta,
            "log_likelihood": self.log_likelihood,
        })


def _em_once(
    design,
    beta: float,
    n_types: int,
    posterior: np.ndarray,
    e_dot: np.ndarray,
    row_ind: np.ndarray,
    row_type: np.ndarray,
    tol: float,
    max_iter: int,
    mono_tol: float,
):
    """One EM run from a given initial posterior and shock table.

    Returns (MixtureState, trace, converged).  Raises if the observed-data
    log-likelihood decreases beyond mono_tol relative to 1 + |loglik| from
    iteration 3 onward (a bug signal for EM; sub-scale decreases can occur
    legitimately because the value components are refreshed TD
    approximations rather than exact per-iteration maximizers, and the
    first two iterations additionally carry the externally seeded shock
    table).
    """
    ext = design.dataset
    K = n_types
    trans = design.transitions
    trans_codes = ext.unique_ids[trans.individual_codes]
    trans_ind = (trans_codes // K).astype(int)
    trans_type = (trans_codes % K).astype(int)
    row_cell = row_ind * K + row_type
    n_base = posterior.shape[0]
    actions = ext.actions
    rows = np.arange(ext.n_obs)

    P = np.asarray(posterior, dtype=float).copy()
    pi = np.full(K, 1.0 / K)
    e_dot = np.asarray(e_dot, dtype=float).copy()
    theta = None
    Omega = None
    last_P_for_omega = None
    prev_ll = None
    trace = []
    converged = False
    h_sols = None

    for it in range(1, max_iter + 1):
        # ---- M-step: posterior-weighted TD solves + pseudo-MLE ----
        # The fit runs on transition rows (periods 1..T-1, matching the
        # base estimators); the E-step below uses every panel row.
        w_trans = trans.weights * P[trans_ind, trans_type]
        if last_P_for_omega is None or not np.array_equal(P, last_P_for_omega):
            Omega, h_sols = solve_h_all(design, beta, weights=w_trans)
            last_P_for_omega = P.copy()
        xi_sol = solve_td(assemble_td_system(
            design, beta, ("values", beta * e_dot[trans.next_idx], "r"),
            weights=w_trans,
        ))
        xi = xi_sol.weights
        cv_fit = component_values(design, Omega, xi, rows="transitions",
                                  weights=w_trans)
        res = pseudo_mle(cv_fit, theta0=theta)
        theta_new = res.theta

        # ---- E-step: posteriors, shares, shock table, likelihood ----
        cv = component_values(design, Omega, xi, rows="observations")
        probs = cv.probabilities(theta_new)
        l_rows = np.maximum(probs[rows, actions], _PROB_FLOOR)
        ln_l = np.log(l_rows)
        L = np.bincount(row_cell, weights=ln_l,
                        minlength=n_base * K).reshape(n_base, K)
        log_post = np.log(pi)[None, :] + L
        P_new = np.exp(log_post - logsumexp(log_post, axis=1, keepdims=True))
        pi_new = P_new.mean(axis=0)
        if pi_new.min() < _SHARE_FLOOR:
            warnings.warn(
                f"type share collapsed to {pi_new.min():.2e}; flooring at "
                f"{_SHARE_FLOOR:.0e}",
                stacklevel=3,
            )
            pi_new = np.maximum(pi_new, _SHARE_FLOOR)
            pi_new = pi_new / pi_new.sum()
        e_dot = EULER_GAMMA - ln_l
        ll = float(logsumexp(np.log(pi_new)[None, :] + L, axis=1).sum())

        step = (np.inf if theta is None else max(
            float(np.max(np.abs(theta_new - theta))),
            float(np.max(np.abs(pi_new - pi))),
        ))
        trace.append({
            "iteration": it,
            "theta": theta_new.tolist(),
            "pi": pi_new.tolist(),
            "log_likelihood": ll,
            "change": step,
        })
        if (K >= 2 and it > 2 and prev_ll is not None
                and ll < prev_ll - mono_tol * (1 + abs(prev_ll))):
            # With one type there is no posterior to reweight: the loop is a
            # fixed-point iteration whose likelihood may wander on the way
            # to its fixed point, so the guard applies to true mixtures
            # only.  Iterations 1-2 run off the external CCP-seeded shock
            # table and may legitimately dip while the model-implied table
            # takes over; from iteration 3 on a decrease beyond mono_tol
            # signals a bug.
            raise RuntimeError(
                f"observed-data log-likelihood decreased at iteration {it} "
                f"({prev_ll:.10g} -> {ll:.10g}); EM monotonicity violated"
            )
        prev_ll = ll
        theta, pi, P = theta_new, pi_new, P_new
        if step <= tol:
            converged = True
            break

    state = MixtureState(
        K=K, pi=pi, p=P, e_dot=e_dot, omega=Omega, xi=xi, theta=theta,
        log_likelihood=prev_ll,
    )
    return state, trace, converged


def em_estimate(
    dataset: PanelDataset,
    payoff_features,
    beta: float,
    n_types: int = 2,
    phi=None,
    r=None,
    ccp=None,
    tol: float = 1e-6,
    max_iter: int = 500,
    n_starts: int = 5,
    init_posterior: np.ndarray | None = None,
    seed: int = 0,
    mono_tol: float = 1e-5,
    require_converged: bool = True,
):
    """Latent-type mixture estimation by EM over a type-extended panel.

    The panel is replicated once per candidate type with the type code
    appended as a state coordinate; payoff features see that coordinate,
    and the value-component bases get one weight block per type.  Starts
    are random perturbations of the uniform posterior (n_starts of them,
    best final likelihood kept) unless init_posterior pins one start.

    Returns (EstimateReport, MixtureState).
    """
    t0 = time.perf_counter()
    beta = check_beta(beta)
    if n_types < 1:
        raise ValueError("n_types must be at least 1")
    ext = extend_with_types(dataset, n_types)
    base_phi = PolynomialBasis(3) if phi is None else phi
    design = build_design(
        ext, payoff_features,
        TypeIndexedBasis(base_phi, n_types),
        r=TypeIndexedBasis(r, n_types) if r is not None else None,
    )
    row_ind, row_type, row_base = _ext_row_structure(dataset, ext, n_types)

    # initial shock table from a type-agnostic CCP fit on the base panel
    ccp_model = _default_ccp(ccp, dataset)
    ccp_model.fit(dataset)
    probs0 = ccp_model.predict_proba(dataset.states)
    chosen0 = np.maximum(
        probs0[np.arange(dataset.n_obs), dataset.actions], _PROB_FLOOR
    )
    e0 = (EULER_GAMMA - np.log(chosen0))[row_base]

    if init_posterior is not None:
        init_posterior = np.asarray(init_posterior, dtype=float)
        if init_posterior.shape != (dataset.n_individuals, n_types):
            raise ValueError(
                "init_posterior must be (n_individuals, n_types)"
            )
        starts = [init_posterior]
    elif n_types == 1:
        starts = [np.ones((dataset.n_individuals, 1))]
    else:
        children = np.random.SeedSequence(seed).spawn(max(1, n_starts))
        starts = [
            _random_posterior(dataset.n_individuals, n_types,
                              np.random.default_rng(c))
            for c in children
        ]

    runs = []
    for s_idx, P0 in enumerate(starts):
        state, trace, conv = _em_once(
            design, beta, n_types, P0, e0, row_ind, row_type,
            tol=tol, max_iter=max_iter, mono_tol=mono_tol,
        )
        runs.append({"start": s_idx, "state": state, "trace": trace,
                     "converged": conv})
    converged_runs = [r for r in runs if r["converged"]]
    pool = converged_runs if converged_runs else runs
    if require_converged and not converged_runs:
        last = runs[-1]["trace"][-1]
        raise RuntimeError(
            f"EM did not converge in {max_iter} iterations for any of "
            f"{len(runs)} start(s) (last change {last['change']:.3e}); "
            "increase max_iter or loosen tol"
        )
    best = max(pool, key=lambda rr: rr["state"].log_likelihood)
    state = best["state"]

    levels = dataset.discrete_state_levels
    continuous = levels is None or any(lv is None for lv in levels)
    diag = {
        "trace": best["trace"],
        "n_iterations": len(best["trace"]),
        "converged": best["converged"],
        "best_start": best["start"],
        "log_likelihood": state.log_likelihood,
        "starts": [
            {"start": rr["start"],
             "log_likelihood": rr["state"].log_likelihood,
             "converged": rr["converged"],
             "n_iterations": len(rr["trace"])}
            for rr in runs
        ],
        "efficiency_note": (
            "pseudo-likelihood mixture: no efficiency correction applied"
            + (" (continuous states present)" if continuous else "")
        ),
        "seconds": time.perf_counter() - t0,
    }
    report = EstimateReport(
        method="em",
        theta=state.theta,
        beta=beta,
        std_errors=None,
        vcov=None,
        theta_stage1=None,
        n_transitions=design.n_transitions // max(n_types, 1),
        n_individuals=dataset.n_individuals,
        n_obs=dataset.n_obs,
        k_phi=design.k_phi,
        k_r=design.k_r,
        theta_dim=design.theta_dim,
        folds=None,
        diagnostics=diag,
    )
    return report, state

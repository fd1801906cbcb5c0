"""Structural-parameter estimation from TD-fitted value components.

Two pipelines share the machinery:

* ``pseudo_mle_estimate`` fits the choice probabilities, the shock
  component, and the per-parameter payoff components on the full sample,
  then maximizes the logit pseudo-likelihood in theta.

* ``locally_robust_estimate`` cross-fits every nuisance on the complementary
  half of an individual-level fold split, then solves corrected moment
  equations whose correction terms cancel the first-order effect of
  nuisance estimation error.  Fold roles are swapped and the two estimates
  averaged; the sandwich covariance pools both folds.

A nonlinear payoff variant profiles theta through a derivative-free search,
re-solving only the right-hand side of the shared TD system.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve
from scipy.optimize import minimize
from sklearn.base import BaseEstimator

from .basis import DesignSystem, PolynomialBasis, build_design
from .ccp import CcpModel
from .data import FoldAssignment, PanelDataset, split_folds
from .likelihood import (
    ComponentValues,
    PseudoMleResult,
    component_values,
    pseudo_mle,
    score_pieces,
)
from .td import _linear_solve, solve_h_all, solve_xi
from .validation import check_beta

__all__ = [
    "EstimateReport",
    "pseudo_mle_estimate",
    "locally_robust_estimate",
    "nonlinear_estimate",
    "TdChoiceEstimator",
    "choice_probabilities",
]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass
class EstimateReport:
    """Estimation result with enough context to reproduce and diagnose."""

    method: str
    theta: np.ndarray
    beta: float
    std_errors: np.ndarray | None = None
    vcov: np.ndarray | None = None
    theta_stage1: np.ndarray | None = None
    n_transitions: int = 0
    n_individuals: int = 0
    n_obs: int = 0
    k_phi: int = 0
    k_r: int = 0
    theta_dim: int = 0
    folds: dict | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return _jsonable(
            {
                "method": self.method,
                "theta": self.theta,
                "beta": self.beta,
                "std_errors": self.std_errors,
                "vcov": self.vcov,
                "theta_stage1": self.theta_stage1,
                "n_transitions": self.n_transitions,
                "n_individuals": self.n_individuals,
                "n_obs": self.n_obs,
                "k_phi": self.k_phi,
                "k_r": self.k_r,
                "theta_dim": self.theta_dim,
                "folds": self.folds,
                "diagnostics": self.diagnostics,
            }
        )

    def to_json(self, path=None, indent: int = 2) -> str:
        text = json.dumps(self.to_dict(), indent=indent)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def choice_probabilities(
    design: DesignSystem, Omega: np.ndarray, xi: np.ndarray, theta: np.ndarray
) -> np.ndarray:
    """Implied choice probabilities at every observation row."""
    cv = component_values(design, Omega, xi, rows="observations")
    return cv.probabilities(theta)


def _default_ccp(ccp, dataset: PanelDataset) -> CcpModel:
    if ccp is None:
        return CcpModel()
    if isinstance(ccp, str):
        return CcpModel(method=ccp)
    try:
        from sklearn.base import clone

        return clone(ccp)
    except Exception:
        return ccp


def _fit_nuisances(design: DesignSystem, beta: float, ccp, mask=None):
    """Fit eta, Omega, xi on the given transition subset (all rows if None)."""
    sub = design if mask is None else design.subset(mask)
    if mask is None:
        eta_data = design.dataset
    else:
        codes = np.unique(sub.transitions.individual_codes)
        eta_data = design.dataset.subset_individuals(codes)
    eta = _default_ccp(ccp, eta_data)
    eta.fit(eta_data)
    Omega, h_sols = solve_h_all(sub, beta)
    xi_sol = solve_xi(sub, beta, eta)
    diag = {
        "h_residual_mse": [s.residual_mse for s in h_sols],
        "g_residual_mse": xi_sol.residual_mse,
        "negdef_margin": max(
            max(s.negdef_margin for s in h_sols), xi_sol.negdef_margin
        ),
        "condition_estimate": max(
            max(s.condition_estimate for s in h_sols), xi_sol.condition_estimate
        ),
        "solvers": sorted({s.solver for s in h_sols} | {xi_sol.solver}),
    }
    return eta, Omega, xi_sol.weights, diag


def _td_residuals(design: DesignSystem, beta: float, Omega, xi, eta, mask=None):
    """Per-transition TD residuals of the fitted components.

    delta_h[:, j] = z_j + beta h_j' - h_j ; delta_g = beta e' + beta g' - g.
    """
    sub = design if mask is None else design.subset(mask)
    delta_h = sub.z_now + beta * (sub.phi_next @ Omega) - sub.phi_now @ Omega
    ds = design.dataset
    probs = eta.predict_proba(ds.states)
    nxt = sub.transitions.next_idx
    from .ccp import EULER_GAMMA

    e_next = EULER_GAMMA - np.log(probs[nxt, ds.actions[nxt]])
    delta_g = beta * e_next + beta * (sub.r_next @ xi) - sub.r_now @ xi
    return delta_h, delta_g


def pseudo_mle_estimate(
    dataset: PanelDataset,
    payoff_features,
    beta: float,
    phi=None,
    r=None,
    ccp=None,
    theta0=None,
    design: DesignSystem | None = None,
) -> EstimateReport:
    """Full-sample two-step estimator (no cross-fitting, no corrections)."""
    beta = check_beta(beta)
    t0 = time.perf_counter()
    if design is None:
        design = build_design(dataset, payoff_features,
                              phi if phi is not None else PolynomialBasis(), r)
    eta, Omega, xi, diag = _fit_nuisances(design, beta, ccp)
    cv = component_values(design, Omega, xi, rows="transitions")
    res = pseudo_mle(cv, theta0=theta0)
    info = np.linalg.inv(-res.hessian)
    diag.update(
        {
            "log_likelihood": res.log_likelihood,
            "newton_iterations": res.n_iter,
            "se_naive": np.sqrt(np.diag(info)),
            "seconds": time.perf_counter() - t0,
        }
    )
    return EstimateReport(
        method="pseudo_mle",
        theta=res.theta,
        beta=beta,
        theta_stage1=res.theta,
        n_transitions=design.n_transitions,
        n_individuals=dataset.n_individuals,
        n_obs=dataset.n_obs,
        k_phi=design.k_phi,
        k_r=design.k_r,
        theta_dim=design.theta_dim,
        diagnostics=diag,
    )


def _solve_correction_weights(sub: DesignSystem, beta: float, pieces):
    """Solve every correction-multiplier system on the given subset.

    Returns (lam_h, lam_g): per-row multiplier values with shapes
    (n, J, J) and (n, J).  The backward systems are factored once per
    feature family and share all right-hand sides.
    """
    J = pieces.theta.shape[0]
    wn = sub.weights / sub.weights.sum()
    Ab_phi = (beta * sub.phi_next - sub.phi_now).T @ (sub.phi_now * wn[:, None])
    rhs_phi = np.empty((sub.k_phi, J * J))
    for l in range(J):
        for j in range(J):
            rhs_phi[:, l * J + j] = wn @ pieces.omega_rows(l, j)
    theta_phi, _, _ = _linear_solve(Ab_phi, rhs_phi)
    lam_h = (sub.phi_now @ theta_phi).reshape(-1, J, J)
    if sub.r is sub.phi:
        Ab_r = Ab_phi
    else:
        Ab_r = (beta * sub.r_next - sub.r_now).T @ (sub.r_now * wn[:, None])
    rhs_r = np.empty((sub.k_r, J))
    for l in range(J):
        rhs_r[:, l] = wn @ pieces.xi_rows(l)
    theta_r, _, _ = _linear_solve(Ab_r, rhs_r)
    lam_g = sub.r_now @ theta_r
    return lam_h, lam_g


def _corrected_moment_solve(
    cv: ComponentValues,
    corr_mean: np.ndarray,
    theta0: np.ndarray,
    tol: float = 1e-11,
    max_iter: int = 100,
) -> np.ndarray:
    """Solve mean[m(theta)] = corr_mean by Newton on a concave potential.

    mean[m(theta)] is the gradient of the mean pseudo-log-likelihood, so the
    root maximizes loglik(theta) - corr_mean' theta and Newton with line
    search is globally convergent.
    """
    wsum = cv.weights.sum()
    theta = np.array(theta0, dtype=float)

    def potential(t):
        return cv.log_likelihood(t) / wsum - corr_mean @ t

    pot = potential(theta)
    for _ in range(max_iter):
        grad = cv.score(theta) / wsum - corr_mean
        if np.max(np.abs(grad)) <= tol:
            return theta
        H = cv.hessian(theta) / wsum
        step = np.linalg.solve(-H, grad)
        scale = 1.0
        for _ in range(50):
            cand = theta + scale * step
            pot_new = potential(cand)
            if pot_new >= pot - 1e-13 * abs(pot):
                break
            scale *= 0.5
        else:
            raise RuntimeError("corrected-moment line search failed")
        theta, pot = cand, pot_new
    grad = cv.score(theta) / wsum - corr_mean
    if np.max(np.abs(grad)) > tol:
        raise RuntimeError(
            "corrected-moment Newton did not converge: residual "
            f"{np.max(np.abs(grad)):.3e}"
        )
    return theta


def corrected_moment_rows(
    design: DesignSystem,
    beta: float,
    Omega: np.ndarray,
    xi: np.ndarray,
    eta,
    theta: np.ndarray,
    mask: np.ndarray | None = None,
    multipliers: tuple | None = None,
):
    """Per-transition corrected moment rows zeta = m - correction.

    m is the score-style moment h(a) - E_pi[h]; the correction pairs
    solved multiplier values with the TD residuals of the payoff and shock
    components, cancelling the first-order effect of estimating (Omega, xi).
    Pass multipliers=(lam_h, lam_g) to hold them fixed (as when probing
    orthogonality by finite differences); otherwise they are solved here at
    theta.  Returns (zeta_rows, parts) where parts collects every
    ingredient keyed by name.
    """
    beta = check_beta(beta)
    sub = design if mask is None else design.subset(mask)
    cv = component_values(design, Omega, xi, mask=mask)
    delta_h, delta_g = _td_residuals(design, beta, Omega, xi, eta, mask)
    if multipliers is None:
        pieces = score_pieces(design, cv, theta, mask=mask)
        lam_h, lam_g = _solve_correction_weights(sub, beta, pieces)
    else:
        lam_h, lam_g = multipliers
    corr = np.einsum("nlj,nj->nl", lam_h, delta_h) + lam_g * delta_g[:, None]
    m = cv.moment_rows(theta)
    parts = {
        "m": m,
        "correction": corr,
        "lam_h": lam_h,
        "lam_g": lam_g,
        "delta_h": delta_h,
        "delta_g": delta_g,
        "weights": cv.weights,
    }
    return m - corr, parts


@dataclass
class _FoldWork:
    mask: np.ndarray
    sub: DesignSystem
    cv: ComponentValues
    delta_h: np.ndarray
    delta_g: np.ndarray
    lam_h: np.ndarray
    lam_g: np.ndarray
    corr_rows: np.ndarray
    theta_stage1: np.ndarray
    theta_fold: np.ndarray
    mass: float


def locally_robust_estimate(
    dataset: PanelDataset,
    payoff_features,
    beta: float,
    phi=None,
    r=None,
    ccp=None,
    n_folds: int = 2,
    seed: int = 0,
    folds: FoldAssignment | None = None,
    resolve_lambda: bool = False,
    theta0=None,
    design: DesignSystem | None = None,
) -> EstimateReport:
    """Cross-fitted, Neyman-orthogonal estimate of theta.

    For each fold: choice probabilities, payoff components, and the shock
    component are fitted on the complementary individuals; a stage-1
    pseudo-MLE on the fold pins the point where the correction-multiplier
    systems are solved; Newton then zeros the corrected moment on the fold.
    The correction multipliers stay fixed during that Newton unless
    resolve_lambda is set, in which case they are re-solved at each outer
    step until theta stabilizes.  Fold estimates are averaged with
    transition-mass weights and the sandwich covariance pools all folds.
    """
    beta = check_beta(beta)
    t0 = time.perf_counter()
    if design is None:
        design = build_design(dataset, payoff_features,
                              phi if phi is not None else PolynomialBasis(), r)
    if folds is None:
        folds = split_folds(dataset, seed, n_folds)
    trans_folds = folds.folds_of(design.transitions.individual_codes)
    works: list[_FoldWork] = []
    fold_diag = []
    for f in range(folds.n_folds):
        est_mask = trans_folds == f
        comp_mask = ~est_mask
        if not est_mask.any() or not comp_mask.any():
            raise RuntimeError(f"fold {f} leaves an empty estimation or "
                               "nuisance sample; use fewer folds")
        eta_c, Omega_c, xi_c, ndiag = _fit_nuisances(design, beta, ccp, comp_mask)
        sub = design.subset(est_mask)
        cv = component_values(design, Omega_c, xi_c, mask=est_mask)
        stage1 = pseudo_mle(cv, theta0=theta0)
        delta_h, delta_g = _td_residuals(design, beta, Omega_c, xi_c, eta_c,
                                         est_mask)
        theta_f = stage1.theta
        for _ in range(50 if resolve_lambda else 1):
            pieces = score_pieces(design, cv, theta_f, mask=est_mask)
            lam_h, lam_g = _solve_correction_weights(sub, beta, pieces)
            corr_rows = (
                np.einsum("nlj,nj->nl", lam_h, delta_h) + lam_g * delta_g[:, None]
            )
            wn = cv.weights / cv.weights.sum()
            corr_mean = wn @ corr_rows
            theta_new = _corrected_moment_solve(cv, corr_mean, theta_f)
            if not resolve_lambda or np.max(np.abs(theta_new - theta_f)) < 1e-12:
                theta_f = theta_new
                break
            theta_f = theta_new
        else:
            raise RuntimeError(
                "correction-multiplier refinement did not stabilize"
            )
        works.append(
            _FoldWork(
                mask=est_mask, sub=sub, cv=cv, delta_h=delta_h,
                delta_g=delta_g, lam_h=lam_h, lam_g=lam_g,
                corr_rows=corr_rows, theta_stage1=stage1.theta,
                theta_fold=theta_f, mass=float(cv.weights.sum()),
            )
        )
        ndiag["stage1_theta"] = stage1.theta
        ndiag["fold_theta"] = theta_f
        ndiag["n_transitions"] = int(est_mask.sum())
        fold_diag.append(ndiag)
    masses = np.array([w.mass for w in works])
    shares = masses / masses.sum()
    theta_hat = sum(s * w.theta_fold for s, w in zip(shares, works))
    theta_stage1 = sum(s * w.theta_stage1 for s, w in zip(shares, works))

    # Pooled sandwich covariance at the averaged estimate.
    J = design.theta_dim
    G = np.zeros((J, J))
    Omega_mat = np.zeros((J, J))
    wtot = masses.sum()
    for w in works:
        zeta = w.cv.moment_rows(theta_hat) - w.corr_rows
        Omega_mat += (zeta * w.cv.weights[:, None]).T @ zeta
        G += -w.cv.covariance_matrix(theta_hat) * w.mass
    G /= wtot
    Omega_mat /= wtot
    omega_eigs = np.linalg.eigvalsh((Omega_mat + Omega_mat.T) / 2.0)
    if omega_eigs[0] <= 1e-14 * max(omega_eigs[-1], 1.0):
        raise RuntimeError(
            "moment covariance matrix is singular "
            f"(eigenvalues {omega_eigs.tolist()}); standard errors are "
            "undefined"
        )
    g_eigs = np.linalg.svd(G, compute_uv=False)
    if g_eigs[-1] <= 1e-12 * max(g_eigs[0], 1.0):
        raise RuntimeError(
            "moment Jacobian is singular; theta is not locally identified "
            f"(singular values {g_eigs.tolist()})"
        )
    Ginv = np.linalg.inv(G)
    vcov = Ginv @ Omega_mat @ Ginv.T
    se = np.sqrt(np.diag(vcov) / wtot)
    diag = {
        "fold": fold_diag,
        "fold_shares": shares,
        "moment_covariance": Omega_mat,
        "jacobian": G,
        "resolve_lambda": resolve_lambda,
        "seconds": time.perf_counter() - t0,
    }
    return EstimateReport(
        method="locally_robust",
        theta=theta_hat,
        beta=beta,
        std_errors=se,
        vcov=vcov,
        theta_stage1=theta_stage1,
        n_transitions=design.n_transitions,
        n_individuals=dataset.n_individuals,
        n_obs=dataset.n_obs,
        k_phi=design.k_phi,
        k_r=design.k_r,
        theta_dim=design.theta_dim,
        folds=folds.to_dict(),
        diagnostics=diag,
    )


def nonlinear_estimate(
    dataset: PanelDataset,
    payoff_fn,
    theta0: np.ndarray,
    beta: float,
    phi=None,
    r=None,
    ccp=None,
    bounds: tuple | None = None,
    xtol: float = 1e-9,
    max_iter: int = 2000,
) -> EstimateReport:
    """Profile estimator for payoffs nonlinear in theta.

    payoff_fn(theta, actions, states) returns the per-row payoff z(a, x;
    theta).  The payoff component is re-solved for each candidate theta by
    refreshing only the right-hand side of the (factored once) TD system;
    the derivative-free search maximizes the implied pseudo-likelihood.
    bounds, given as (lower, upper) arrays, define a search box; a solution
    on the box boundary raises, as does a flat objective.
    """
    beta = check_beta(beta)
    t0 = time.perf_counter()
    theta0 = np.asarray(theta0, dtype=float)

    def wrapped(a, x):
        return payoff_fn(theta0, a, x)[:, None]

    design = build_design(dataset, wrapped,
                          phi if phi is not None else PolynomialBasis(), r)
    eta = _default_ccp(ccp, dataset)
    eta.fit(dataset)
    xi = solve_xi(design, beta, eta).weights
    wn = design.weights / design.weights.sum()
    A = design.phi_now.T @ ((design.phi_now - beta * design.phi_next) * wn[:, None])
    try:
        factor = lu_factor(A)
        solve = lambda b: lu_solve(factor, b)  # noqa: E731
    except Exception:
        solve = lambda b: np.linalg.lstsq(A, b, rcond=None)[0]  # noqa: E731
    ds = design.dataset
    now = design.transitions.now_idx
    a_now, x_now = ds.actions[now], ds.states[now]
    g_all = design.r_actions @ xi
    g_rows = g_all[now]
    phi_a = design.phi_actions[now]
    n_eval = [0]

    def negloglik(theta):
        n_eval[0] += 1
        z = np.asarray(payoff_fn(theta, a_now, x_now), dtype=float)
        w = solve(design.phi_now.T @ (wn * z))
        v = phi_a @ w + g_rows
        chosen = v[np.arange(len(now)), a_now]
        from scipy.special import logsumexp

        return -float(wn @ (chosen - logsumexp(v, axis=1)))

    res = minimize(
        negloglik, theta0, method="Nelder-Mead",
        options={"xatol": xtol, "fatol": 1e-12, "maxiter": max_iter,
                 "maxfev": 4 * max_iter},
    )
    if not res.success:
        raise RuntimeError(f"nonlinear profile search failed: {res.message}")
    theta = np.asarray(res.x, dtype=float)
    if bounds is not None:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
        edge = np.min(np.minimum(theta - lo, hi - theta))
        if edge <= 1e-6 * max(1.0, np.max(np.abs(theta))):
            raise RuntimeError(
                f"nonlinear estimate {theta.tolist()} sits on the search box; "
                "widen the bounds"
            )
    probe = np.abs(negloglik(theta + xtol * 100 * (1 + np.abs(theta)))
                   - res.fun)
    if probe < 1e-15:
        raise RuntimeError("nonlinear profile objective is flat near the "
                           "solution; theta is not identified")
    return EstimateReport(
        method="nonlinear_profile",
        theta=theta,
        beta=beta,
        n_transitions=design.n_transitions,
        n_individuals=dataset.n_individuals,
        n_obs=dataset.n_obs,
        k_phi=design.k_phi,
        k_r=design.k_r,
        theta_dim=len(theta),
        diagnostics={
            "log_likelihood": -float(res.fun),
            "n_objective_evals": n_eval[0],
            "nelder_mead_iterations": int(res.nit),
            "seconds": time.perf_counter() - t0,
        },
    )


class TdChoiceEstimator(BaseEstimator):
    """Estimator facade over the pseudo-MLE and locally robust pipelines.

    Parameters mirror the functional interfaces; fit(dataset) stores the
    report and exposes theta_, std_errors_, and predict_proba on new data.
    """

    def __init__(
        self,
        payoff_features=None,
        beta: float = 0.9,
        method: str = "locally_robust",
        degree: int = 3,
        phi=None,
        r=None,
        ccp=None,
        n_folds: int = 2,
        seed: int = 0,
        resolve_lambda: bool = False,
    ):
        self.payoff_features = payoff_features
        self.beta = beta
        self.method = method
        self.degree = degree
        self.phi = phi
        self.r = r
        self.ccp = ccp
        self.n_folds = n_folds
        self.seed = seed
        self.resolve_lambda = resolve_lambda

    def fit(self, dataset: PanelDataset, y=None):
        if self.payoff_features is None:
            raise ValueError("payoff_features must be provided")
        phi = self.phi if self.phi is not None else PolynomialBasis(self.degree)
        design = build_design(dataset, self.payoff_features, phi, self.r)
        if self.method == "locally_robust":
            report = locally_robust_estimate(
                dataset, self.payoff_features, self.beta, design=design,
                ccp=self.ccp, n_folds=self.n_folds, seed=self.seed,
                resolve_lambda=self.resolve_lambda,
            )
        elif self.method == "pseudo_mle":
            report = pseudo_mle_estimate(
                dataset, self.payoff_features, self.beta, design=design,
                ccp=self.ccp,
            )
        else:
            raise ValueError(f"unknown method {self.method!r}")
        self.report_ = report
        self.theta_ = report.theta
        self.std_errors_ = report.std_errors
        self.design_ = design
        eta, Omega, xi, _ = _fit_nuisances(design, self.beta, self.ccp)
        self.Omega_, self.xi_, self.eta_ = Omega, xi, eta
        return self

    def predict_proba(self, dataset: PanelDataset) -> np.ndarray:
        """Implied choice probabilities for each row of a (new) panel."""
        if not hasattr(self, "theta_"):
            raise RuntimeError("estimator is not fitted")
        design = build_design(dataset, self.payoff_features,
                              self.design_.phi, self.design_.r)
        return choice_probabilities(design, self.Omega_, self.xi_, self.theta_)

    def score(self, dataset: PanelDataset) -> float:
        """Mean pseudo-log-likelihood per transition on a panel."""
        design = build_design(dataset, self.payoff_features,
                              self.design_.phi, self.design_.r)
        cv = component_values(design, self.Omega_, self.xi_)
        return cv.log_likelihood(self.theta_) / cv.weights.sum()

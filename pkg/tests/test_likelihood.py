"""Choice-probability, pseudo-likelihood, and score-piece checks.

Expected values come from the independent dynamic-program oracle in
oracles.py (value iteration / linear solves on the enumerated population)
or from finite differences of the quantities the analytic pieces claim to
differentiate.
"""

import numpy as np
import pytest

import oracles as oc
from tdchoice import SaturatedBasis, TabularCcp, build_design
from tdchoice.estimators import _fit_nuisances
from tdchoice.likelihood import (
    ComponentValues,
    component_values,
    pseudo_mle,
    score_pieces,
)


@pytest.fixture(scope="module")
def pop():
    """Enumerated stationary population of the 5-state bus model with
    exact nuisances (truth CCP table, saturated-basis TD solves)."""
    m = oc.two_action_bus()
    ds, tr = m.population_dataset()
    _, _, eta_t = m.solve_values()
    truth = TabularCcp(levels=(m.n_states,), table=eta_t.T)
    payoff = lambda a, x: np.column_stack([a == 1, (a == 0) * x[:, 0]]).astype(float)
    design = build_design(ds, payoff, SaturatedBasis(), transitions=tr)
    eta, Omega, xi, _ = _fit_nuisances(design, m.beta, truth)
    return m, design, Omega, xi


def test_utilities_match_oracle_values(pop):
    # h' theta + g evaluated on population rows equals the oracle's
    # conditional values v(a, x) from value iteration.
    m, design, Omega, xi = pop
    v, _, _ = m.solve_values()
    cv = component_values(design, Omega, xi)
    now = design.transitions.now_idx
    states = np.round(design.dataset.states[now, 0]).astype(int)
    u = cv.utilities(np.asarray(m.theta, float))
    assert np.max(np.abs(u - v[:, states].T)) < 1e-9


def test_probabilities_match_oracle_ccp(pop):
    m, design, Omega, xi = pop
    _, _, eta = m.solve_values()
    cv = component_values(design, Omega, xi)
    now = design.transitions.now_idx
    states = np.round(design.dataset.states[now, 0]).astype(int)
    probs = cv.probabilities(np.asarray(m.theta, float))
    assert np.max(np.abs(probs - eta[:, states].T)) < 1e-9
    assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12


def test_observation_rows_cover_full_panel(pop):
    m, design, Omega, xi = pop
    cv = component_values(design, Omega, xi, rows="observations")
    assert cv.n_rows == design.dataset.n_obs
    assert cv.n_actions == 2
    assert cv.theta_dim == 2
    np.testing.assert_allclose(cv.weights, 1.0)


def test_unknown_rows_mode_rejected(pop):
    _, design, Omega, xi = pop
    with pytest.raises(ValueError, match="rows"):
        component_values(design, Omega, xi, rows="bogus")


def test_score_is_log_likelihood_gradient(pop):
    _, design, Omega, xi = pop
    cv = component_values(design, Omega, xi)
    theta = np.array([-1.3, -0.21])
    eps = 1e-6
    fd = np.array([
        (cv.log_likelihood(theta + eps * e) - cv.log_likelihood(theta - eps * e))
        / (2 * eps)
        for e in np.eye(2)
    ])
    assert np.max(np.abs(fd - cv.score(theta))) < 1e-8


def test_hessian_is_score_jacobian(pop):
    _, design, Omega, xi = pop
    cv = component_values(design, Omega, xi)
    theta = np.array([-1.3, -0.21])
    eps = 1e-6
    fd = np.column_stack([
        (cv.score(theta + eps * e) - cv.score(theta - eps * e)) / (2 * eps)
        for e in np.eye(2)
    ])
    H = cv.hessian(theta)
    assert np.max(np.abs(fd - H)) < 1e-7
    np.testing.assert_allclose(H, H.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(-H) >= -1e-12)


def test_moment_rows_formula():
    # Hand-checkable 2-row case: m = h(a_obs) - sum_a pi(a) h(a).
    h = np.array([[[1.0, 0.0], [0.0, 2.0]],
                  [[3.0, 1.0], [1.0, 0.0]]])
    g = np.zeros((2, 2))
    cv = ComponentValues(h=h, g=g, actions=np.array([0, 1]),
                         weights=np.array([1.0, 1.0]))
    theta = np.array([0.0, 0.0])  # uniform probabilities
    m_rows = cv.moment_rows(theta)
    expect = np.array([
        h[0, 0] - 0.5 * (h[0, 0] + h[0, 1]),
        h[1, 1] - 0.5 * (h[1, 0] + h[1, 1]),
    ])
    np.testing.assert_allclose(m_rows, expect, atol=1e-14)
    np.testing.assert_allclose(cv.score(theta), m_rows.sum(axis=0), atol=1e-14)
    np.testing.assert_allclose(
        cv.covariance_matrix(theta), -cv.hessian(theta) / 2.0, atol=1e-14
    )


def test_pseudo_mle_recovers_population_theta(pop):
    m, design, Omega, xi = pop
    cv = component_values(design, Omega, xi)
    res = pseudo_mle(cv)
    assert res.converged
    assert np.max(np.abs(res.theta - np.asarray(m.theta))) < 1e-10
    assert res.gradient_norm <= 1e-10
    d = res.to_dict()
    assert set(d) >= {"theta", "log_likelihood", "gradient_norm", "n_iter",
                      "converged"}


def test_pseudo_mle_rejects_flat_direction(pop):
    # Duplicating a payoff component makes the likelihood flat along
    # theta_1 - theta_2, which must raise rather than return garbage.
    _, design, Omega, xi = pop
    cv = component_values(design, Omega, xi)
    h_dup = np.concatenate([cv.h, cv.h[:, :, :1]], axis=2)
    cv_bad = ComponentValues(h=h_dup, g=cv.g, actions=cv.actions,
                             weights=cv.weights)
    with pytest.raises(RuntimeError, match="theta not identified"):
        pseudo_mle(cv_bad)


def test_pseudo_mle_rejects_zero_mass(pop):
    _, design, Omega, xi = pop
    cv = component_values(design, Omega, xi)
    cv_zero = ComponentValues(h=cv.h, g=cv.g, actions=cv.actions,
                              weights=np.zeros_like(cv.weights))
    with pytest.raises(ValueError, match="positive total mass"):
        pseudo_mle(cv_zero)


def test_omega_rows_differentiate_mean_moment(pop):
    # omega_rows(l, j)[i, p] must equal d mean-moment_l / d Omega[p, j]
    # checked by symmetric finite differences entry by entry.
    _, design, Omega, xi = pop
    theta = np.array([-1.3, -0.21])
    cv = component_values(design, Omega, xi)
    wn = cv.weights / cv.weights.sum()
    pieces = score_pieces(design, cv, theta)

    def mean_moment(Om, xv):
        return wn @ component_values(design, Om, xv).moment_rows(theta)

    eps = 1e-6
    rng = np.random.default_rng(0)
    for _ in range(6):
        j = int(rng.integers(2))
        p = int(rng.integers(design.k_phi))
        l = int(rng.integers(2))
        dOm = np.zeros_like(Omega)
        dOm[p, j] = eps
        fd = (mean_moment(Omega + dOm, xi)[l]
              - mean_moment(Omega - dOm, xi)[l]) / (2 * eps)
        analytic = wn @ pieces.omega_rows(l, j)[:, p]
        assert abs(fd - analytic) < 1e-8


def test_xi_rows_differentiate_mean_moment(pop):
    _, design, Omega, xi = pop
    theta = np.array([-1.3, -0.21])
    cv = component_values(design, Omega, xi)
    wn = cv.weights / cv.weights.sum()
    pieces = score_pieces(design, cv, theta)

    def mean_moment(xv):
        return wn @ component_values(design, Omega, xv).moment_rows(theta)

    eps = 1e-6
    rng = np.random.default_rng(1)
    for _ in range(6):
        p = int(rng.integers(design.k_r))
        l = int(rng.integers(2))
        dxi = np.zeros_like(xi)
        dxi[p] = eps
        fd = (mean_moment(xi + dxi)[l] - mean_moment(xi - dxi)[l]) / (2 * eps)
        analytic = wn @ pieces.xi_rows(l)[:, p]
        assert abs(fd - analytic) < 1e-8


def test_score_pieces_rejects_row_mismatch(pop):
    _, design, Omega, xi = pop
    cv = component_values(design, Omega, xi)
    mask = np.zeros(design.n_transitions, dtype=bool)
    mask[:3] = True
    with pytest.raises(ValueError, match="rows do not match"):
        score_pieces(design, cv, np.zeros(2), mask=mask)

"""End-to-end estimator checks against the dynamic-program oracle.

Exactness claims use enumerated stationary populations, where every
empirical mean is an exact expectation and the saturated basis spans the
true components, so both pipelines must return the data-generating theta to
solver precision.  Orthogonality of the corrected moment is probed by
finite differences in its own test module; here we check the estimator
plumbing, report contracts, and failure modes.
"""

import json

import numpy as np
import pytest

import oracles as oc
from sklearn.base import clone

from tdchoice import PanelDataset, SaturatedBasis, TabularCcp, build_design
from tdchoice.data import FoldAssignment
from tdchoice.estimators import (
    TdChoiceEstimator,
    choice_probabilities,
    corrected_moment_rows,
    locally_robust_estimate,
    nonlinear_estimate,
    pseudo_mle_estimate,
    _fit_nuisances,
)

BETA = 0.9


def bus_payoff(a, x):
    return np.column_stack([a == 1, (a == 0) * x[:, 0]]).astype(float)


@pytest.fixture(scope="module")
def model():
    return oc.two_action_bus()


@pytest.fixture(scope="module")
def truth_ccp(model):
    _, _, eta = model.solve_values()
    return TabularCcp(levels=(model.n_states,), table=eta.T)


@pytest.fixture(scope="module")
def pop_design(model):
    ds, tr = model.population_dataset()
    return ds, build_design(ds, bus_payoff, SaturatedBasis(), transitions=tr)


@pytest.fixture(scope="module")
def doubled_pop(model):
    """Two copies of every population tuple as separate pseudo-individuals,
    with a fold assignment sending copy 0 to fold 0 and copy 1 to fold 1.
    Every fold then sees the full population both as estimation sample and
    as nuisance sample, so cross-fitting stays exact."""
    a, x, a2, x2, w = model.enumerate_population()
    n = a.shape[0]
    ds, tr = PanelDataset.from_transition_pairs(
        np.concatenate([a, a]), np.concatenate([x, x]),
        np.concatenate([a2, a2]), np.concatenate([x2, x2]),
        n_actions=model.n_actions, weights=np.concatenate([w, w]) / 2.0,
        discrete_state_levels=(model.n_states,),
    )
    folds = FoldAssignment(
        np.r_[np.zeros(n, np.int64), np.ones(n, np.int64)],
        ds.unique_ids, 2, None,
    )
    design = build_design(ds, bus_payoff, SaturatedBasis(), transitions=tr)
    return ds, design, folds


def test_pseudo_mle_exact_on_population(model, truth_ccp, pop_design):
    ds, design = pop_design
    rep = pseudo_mle_estimate(ds, bus_payoff, BETA, ccp=truth_ccp,
                              design=design)
    assert np.max(np.abs(rep.theta - np.asarray(model.theta))) < 1e-8
    assert rep.method == "pseudo_mle"
    assert rep.k_phi == 2 * model.n_states
    assert rep.theta_dim == 2
    assert rep.n_transitions == design.n_transitions
    assert rep.diagnostics["log_likelihood"] < 0.0
    # One-step TD errors keep their conditional-variance mass even when the
    # fitted components are exact, so the recorded residuals are only
    # required to be finite and nonnegative.
    assert min(rep.diagnostics["h_residual_mse"]) >= 0.0
    assert np.isfinite(rep.diagnostics["g_residual_mse"])


def test_locally_robust_exact_on_population(model, truth_ccp, doubled_pop):
    ds, design, folds = doubled_pop
    rep = locally_robust_estimate(ds, bus_payoff, BETA, ccp=truth_ccp,
                                  folds=folds, design=design)
    assert np.max(np.abs(rep.theta - np.asarray(model.theta))) < 1e-8
    assert np.max(np.abs(rep.theta_stage1 - np.asarray(model.theta))) < 1e-8
    assert rep.method == "locally_robust"
    assert rep.std_errors is not None and np.all(rep.std_errors > 0)
    assert rep.vcov.shape == (2, 2)
    assert len(rep.diagnostics["fold"]) == 2


def test_locally_robust_resolve_lambda_exact(model, truth_ccp, doubled_pop):
    ds, design, folds = doubled_pop
    rep = locally_robust_estimate(ds, bus_payoff, BETA, ccp=truth_ccp,
                                  folds=folds, design=design,
                                  resolve_lambda=True)
    assert np.max(np.abs(rep.theta - np.asarray(model.theta))) < 1e-8
    assert rep.diagnostics["resolve_lambda"] is True


def test_locally_robust_on_simulated_panel(model, truth_ccp):
    ds = model.simulate(300, 10, seed=11)
    rep = locally_robust_estimate(ds, bus_payoff, BETA, phi=SaturatedBasis(),
                                  ccp=truth_ccp, n_folds=2, seed=0)
    # Loose sanity band: the panel has 2700 transitions.
    assert np.max(np.abs(rep.theta - np.asarray(model.theta))) < 0.5
    assert np.all(rep.std_errors > 0)
    assert rep.diagnostics["fold_shares"].sum() == pytest.approx(1.0)


def test_empty_fold_raises(model, truth_ccp, pop_design):
    ds, design = pop_design
    bad = FoldAssignment(
        np.zeros(ds.n_individuals, dtype=np.int64), ds.unique_ids, 2, None
    )
    with pytest.raises(RuntimeError, match="empty estimation or nuisance"):
        locally_robust_estimate(ds, bus_payoff, BETA, ccp=truth_ccp,
                                folds=bad, design=design)


def test_corrected_moment_mean_zero_at_truth(model, truth_ccp, pop_design):
    # With exact nuisances on the population, both the raw moment and the
    # corrected moment must average to zero at the true theta.
    ds, design = pop_design
    eta, Omega, xi, _ = _fit_nuisances(design, BETA, truth_ccp)
    theta_star = np.asarray(model.theta, float)
    zeta, parts = corrected_moment_rows(design, BETA, Omega, xi, eta,
                                        theta_star)
    wn = parts["weights"] / parts["weights"].sum()
    assert np.max(np.abs(wn @ zeta)) < 1e-12
    assert np.max(np.abs(wn @ parts["m"])) < 1e-12
    assert set(parts) >= {"m", "correction", "lam_h", "lam_g", "delta_h",
                          "delta_g", "weights"}
    assert parts["lam_h"].shape == (design.n_transitions, 2, 2)
    assert parts["lam_g"].shape == (design.n_transitions, 2)


def test_corrected_moment_multiplier_override(model, truth_ccp, pop_design):
    # Passing the solved multipliers back through `multipliers` must
    # reproduce the same rows (the override skips the solve, nothing else).
    ds, design = pop_design
    eta, Omega, xi, _ = _fit_nuisances(design, BETA, truth_ccp)
    theta_star = np.asarray(model.theta, float)
    zeta, parts = corrected_moment_rows(design, BETA, Omega, xi, eta,
                                        theta_star)
    zeta2, _ = corrected_moment_rows(
        design, BETA, Omega, xi, eta, theta_star,
        multipliers=(parts["lam_h"], parts["lam_g"]),
    )
    np.testing.assert_allclose(zeta2, zeta, atol=1e-14)


def test_nonlinear_profile_matches_pseudo_mle(model, truth_ccp):
    # A payoff linear in theta lets the profile search be checked against
    # the Newton pseudo-MLE on the same panel.
    ds = model.simulate(250, 8, seed=1)
    rep_lin = pseudo_mle_estimate(ds, bus_payoff, BETA, phi=SaturatedBasis(),
                                  ccp=truth_ccp)

    def payoff_fn(theta, a, x):
        return theta[0] * (a == 1) + theta[1] * (a == 0) * x[:, 0]

    rep_nl = nonlinear_estimate(ds, payoff_fn, np.array([-1.0, -0.1]), BETA,
                                phi=SaturatedBasis(), ccp=truth_ccp)
    assert np.max(np.abs(rep_nl.theta - rep_lin.theta)) < 1e-6
    assert rep_nl.method == "nonlinear_profile"
    assert rep_nl.diagnostics["n_objective_evals"] > 0


def test_nonlinear_profile_flat_objective_raises(model, truth_ccp):
    ds = model.simulate(60, 6, seed=2)

    def constant_payoff(theta, a, x):
        return (a == 1).astype(float)

    with pytest.raises(RuntimeError, match="not identified"):
        nonlinear_estimate(ds, constant_payoff, np.array([0.5]), BETA,
                           phi=SaturatedBasis(), ccp=truth_ccp)


def test_nonlinear_profile_boundary_raises(model, truth_ccp):
    ds = model.simulate(250, 8, seed=1)

    def payoff_fn(theta, a, x):
        return theta[0] * (a == 1) + theta[1] * (a == 0) * x[:, 0]

    with pytest.raises(RuntimeError, match="search box"):
        nonlinear_estimate(
            ds, payoff_fn, np.array([-1.0, -0.1]), BETA,
            phi=SaturatedBasis(), ccp=truth_ccp,
            bounds=(np.array([-1.5, -0.1]), np.array([0.0, 0.0])),
        )


def test_choice_probabilities_match_oracle(model, truth_ccp, pop_design):
    ds, design = pop_design
    _, Omega, xi, _ = _fit_nuisances(design, BETA, truth_ccp)
    probs = choice_probabilities(design, Omega, xi, np.asarray(model.theta))
    _, _, eta = model.solve_values()
    states = np.round(ds.states[:, 0]).astype(int)
    assert probs.shape == (ds.n_obs, 2)
    assert np.max(np.abs(probs - eta[:, states].T)) < 1e-9


def test_report_json_round_trip(model, truth_ccp, pop_design, tmp_path):
    ds, design = pop_design
    rep = pseudo_mle_estimate(ds, bus_payoff, BETA, ccp=truth_ccp,
                              design=design)
    path = tmp_path / "report.json"
    text = rep.to_json(path)
    back = json.loads(path.read_text())
    assert back == json.loads(text)
    np.testing.assert_allclose(back["theta"], rep.theta)
    assert back["method"] == "pseudo_mle"
    assert back["beta"] == BETA


def test_collinear_payoff_not_identified(model, truth_ccp, pop_design):
    ds, _ = pop_design

    def bad_payoff(a, x):
        return np.column_stack([a == 1, 2.0 * (a == 1)]).astype(float)

    with pytest.raises(RuntimeError, match="theta not identified"):
        pseudo_mle_estimate(ds, bad_payoff, BETA, phi=SaturatedBasis(),
                            ccp=truth_ccp)


class TestFacade:
    def test_fit_predict_score(self, model, truth_ccp):
        ds = model.simulate(120, 10, seed=3)
        est = TdChoiceEstimator(
            payoff_features=bus_payoff, beta=BETA, method="pseudo_mle",
            phi=SaturatedBasis(), ccp=truth_ccp,
        ).fit(ds)
        assert est.theta_.shape == (2,)
        assert est.report_.method == "pseudo_mle"
        probs = est.predict_proba(ds)
        assert probs.shape == (ds.n_obs, 2)
        assert np.max(np.abs(probs.sum(axis=1) - 1.0)) < 1e-12
        assert np.isfinite(est.score(ds))

    def test_sklearn_clone_resets_state(self, model, truth_ccp):
        ds = model.simulate(120, 10, seed=3)
        est = TdChoiceEstimator(
            payoff_features=bus_payoff, beta=BETA, method="pseudo_mle",
            phi=SaturatedBasis(), ccp=truth_ccp,
        ).fit(ds)
        fresh = clone(est)
        assert fresh.get_params()["beta"] == BETA
        assert not hasattr(fresh, "theta_")
        with pytest.raises(RuntimeError, match="not fitted"):
            fresh.predict_proba(ds)

    def test_requires_payoff_features(self, model):
        ds = model.simulate(30, 4, seed=4)
        with pytest.raises(ValueError, match="payoff_features"):
            TdChoiceEstimator().fit(ds)

    def test_unknown_method(self, model):
        ds = model.simulate(30, 4, seed=4)
        with pytest.raises(ValueError, match="unknown method"):
            TdChoiceEstimator(payoff_features=bus_payoff,
                              method="bogus").fit(ds)

"""Choice-probability models and the shock-expectation map."""

import numpy as np
import pytest

from oracles import EULER
from tdchoice import CcpModel, PanelDataset, TabularCcp
from tdchoice.ccp import clip_probabilities, shock_expectation_from_probs


def test_shock_expectation_closed_form_at_one_half():
    probs = np.full((4, 2), 0.5)
    e = shock_expectation_from_probs(probs)
    np.testing.assert_allclose(e, EULER + np.log(2.0))


def test_shock_expectation_matches_formula_elementwise():
    rng = np.random.default_rng(0)
    p = rng.dirichlet(np.ones(3), size=6)
    np.testing.assert_allclose(
        shock_expectation_from_probs(p), EULER - np.log(p)
    )


def test_clip_preserves_row_sums_and_floor():
    probs = np.array(
        [
            [0.9999, 0.00005, 0.00005],
            [0.5, 0.3, 0.2],
            [1.0, 0.0, 0.0],
        ]
    )
    out = clip_probabilities(probs, 1e-3)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    assert np.all(out >= 1e-3 - 1e-15)
    # untouched rows stay untouched
    np.testing.assert_allclose(out[1], probs[1])


def test_clip_exact_two_action_case():
    # with two actions, clipping one side pins the other at 1 - floor
    out = clip_probabilities(np.array([[1e-8, 1.0 - 1e-8]]), 0.01)
    np.testing.assert_allclose(out, [[0.01, 0.99]])


def test_clip_floor_validated():
    with pytest.raises(ValueError):
        clip_probabilities(np.full((1, 2), 0.5), 0.6)


def discrete_panel(seed=0, n_ind=400, T=5, p_table=None):
    """Panel on 3 states with known per-state choice probabilities."""
    rng = np.random.default_rng(seed)
    if p_table is None:
        p_table = np.array([[0.2, 0.8], [0.5, 0.5], [0.7, 0.3]])
    states = rng.integers(0, 3, (n_ind, T))
    u = rng.random((n_ind, T))
    actions = (u > p_table[states, 0]).astype(int)
    return (
        PanelDataset(
            ids=np.repeat(np.arange(n_ind), T),
            times=np.tile(np.arange(T), n_ind),
            actions=actions.ravel(),
            states=states.reshape(-1, 1).astype(float),
            n_actions=2,
            discrete_state_levels=(3,),
        ),
        p_table,
    )


def test_cells_method_recovers_cell_frequencies():
    ds, _ = discrete_panel()
    model = CcpModel(method="cells", clip_floor=0.0).fit(ds)
    probs = model.predict_proba(ds.states)
    # manual cell frequencies
    for s in range(3):
        in_cell = ds.states[:, 0] == s
        freq1 = ds.actions[in_cell].mean()
        np.testing.assert_allclose(
            probs[in_cell, 1], freq1, atol=1e-12
        )


def test_cells_method_requires_levels():
    ds, _ = discrete_panel()
    ds_no_levels = PanelDataset(
        ids=ds.ids,
        times=ds.times,
        actions=ds.actions,
        states=ds.states,
        n_actions=2,
    )
    with pytest.raises(ValueError, match="levels"):
        CcpModel(method="cells").fit(ds_no_levels)


def test_logit_consistent_on_large_sample():
    ds, p_table = discrete_panel(seed=2, n_ind=4000, T=6)
    model = CcpModel(method="logit", clip_floor=0.0).fit(ds)
    cells = np.arange(3, dtype=float)[:, None]
    probs = model.predict_proba(cells)
    # logistic regression on a saturating feature set of one discrete
    # regressor cannot match cell frequencies exactly; allow sampling and
    # approximation slack
    assert np.max(np.abs(probs[:, 1] - p_table[:, 1])) < 0.05


def test_sample_weight_reweights_cells():
    ds, _ = discrete_panel(n_ind=50, T=2)
    w = np.where(ds.actions == 1, 2.0, 1.0)
    model = CcpModel(method="cells", clip_floor=0.0).fit(ds, sample_weight=w)
    probs = model.predict_proba(ds.states)
    for s in range(3):
        in_cell = ds.states[:, 0] == s
        n1 = (ds.actions[in_cell] == 1).sum()
        n0 = (ds.actions[in_cell] == 0).sum()
        expected = 2.0 * n1 / (2.0 * n1 + n0)
        np.testing.assert_allclose(probs[in_cell, 1], expected, atol=1e-12)


def test_tabular_ccp_returns_listed_values():
    table = np.array([[0.25, 0.75], [0.6, 0.4]])
    model = TabularCcp(levels=(2,), table=table)
    probs = model.predict_proba(np.array([[0.0], [0.0], [1.0]]))
    np.testing.assert_allclose(probs, table[[0, 0, 1]])


def test_predict_proba_applies_clip_floor():
    ds, _ = discrete_panel()
    # overwrite so that one cell is single-valued -> frequency 0 without clip
    actions = ds.actions.copy()
    actions[ds.states[:, 0] == 0] = 1
    ds_forced = PanelDataset(
        ids=ds.ids,
        times=ds.times,
        actions=actions,
        states=ds.states,
        n_actions=2,
        discrete_state_levels=(3,),
    )
    model = CcpModel(method="cells", clip_floor=1e-3).fit(ds_forced)
    probs = model.predict_proba(ds_forced.states)
    assert np.all(probs >= 1e-3 - 1e-15)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0)


def test_shock_expectation_method_matches_probs():
    ds, _ = discrete_panel()
    model = CcpModel(method="cells", clip_floor=1e-4).fit(ds)
    e = model.shock_expectation(ds.actions, ds.states)
    p = model.predict_proba(ds.states)
    chosen = p[np.arange(ds.n_obs), ds.actions]
    np.testing.assert_allclose(e, EULER - np.log(chosen))

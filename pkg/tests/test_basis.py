"""Feature maps: polynomial, saturated, custom, and type-indexed bases."""

import numpy as np
import pytest

from tdchoice import (
    CustomBasis,
    PanelDataset,
    PolynomialBasis,
    SaturatedBasis,
    TypeIndexedBasis,
    build_design,
)
from tdchoice.bus import BusConfig, simulate_panel, bus_payoff_features


def grid_panel(n_levels=(3, 2), n_actions=2, reps=3):
    """A panel visiting every (state-cell, action) combination."""
    cells = np.array(
        [[i, j] for i in range(n_levels[0]) for j in range(n_levels[1])],
        dtype=float,
    )
    S = len(cells)
    rows_per_ind = 4
    rng = np.random.default_rng(0)
    n_ind = S * reps
    ids = np.repeat(np.arange(n_ind), rows_per_ind)
    times = np.tile(np.arange(rows_per_ind), n_ind)
    states = cells[rng.integers(0, S, n_ind * rows_per_ind)]
    actions = rng.integers(0, n_actions, n_ind * rows_per_ind)
    return PanelDataset(
        ids=ids,
        times=times,
        actions=actions,
        states=states,
        n_actions=n_actions,
        discrete_state_levels=n_levels,
    )


def test_polynomial_bus_configuration_has_sixteen_columns():
    panel = simulate_panel(BusConfig(n_buses=20, keep_window=(1000, 1010)))
    phi = PolynomialBasis(degree=3)
    phi.fit(panel)
    assert phi.k_ == 16


def test_polynomial_degree_zero_is_action_dummies():
    ds = grid_panel()
    phi = PolynomialBasis(degree=0)
    phi.fit(ds)
    out = phi.evaluate(ds.actions, ds.states)
    assert out.shape[1] == phi.k_
    # with no state terms the map depends on the action only
    for a in range(ds.n_actions):
        rows = out[ds.actions == a]
        assert np.allclose(rows, rows[0])


def test_polynomial_rejects_out_of_range_action():
    ds = grid_panel()
    phi = PolynomialBasis(degree=1)
    phi.fit(ds)
    with pytest.raises(ValueError, match="action"):
        phi.evaluate(np.array([5]), ds.states[:1])


def test_saturated_basis_is_one_hot_over_cells():
    ds = grid_panel()
    phi = SaturatedBasis()
    phi.fit(ds)
    assert phi.k_ == 2 * 3 * 2  # actions x level-product
    out = phi.evaluate(ds.actions, ds.states)
    np.testing.assert_allclose(out.sum(axis=1), 1.0)
    assert set(np.unique(out)) == {0.0, 1.0}
    # distinct (action, cell) pairs map to distinct columns
    cols = out.argmax(axis=1)
    keys = [
        (a, tuple(s)) for a, s in zip(ds.actions, ds.states)
    ]
    mapping = {}
    for key, col in zip(keys, cols):
        mapping.setdefault(key, col)
        assert mapping[key] == col
    assert len(set(mapping.values())) == len(mapping)


def test_saturated_basis_validates_levels():
    ds = grid_panel()
    phi = SaturatedBasis()
    phi.fit(ds)
    bad_states = ds.states.copy()
    bad_states[0, 0] = 99.0
    with pytest.raises(ValueError, match="levels"):
        phi.evaluate(ds.actions, bad_states)


def test_custom_basis_shape_checked():
    ds = grid_panel()
    phi = CustomBasis(fn=lambda a, x: np.ones((len(a), 2)), k=3)
    with pytest.raises(ValueError, match="shape"):
        phi.fit(ds)
        phi.evaluate(ds.actions, ds.states)


def test_type_indexed_basis_blocks_by_last_coordinate():
    base_ds = grid_panel()
    # append a type column taking values 0/1
    rng = np.random.default_rng(1)
    types = rng.integers(0, 2, base_ds.n_obs).astype(float)
    ds = PanelDataset(
        ids=base_ds.ids,
        times=base_ds.times,
        actions=base_ds.actions,
        states=np.column_stack([base_ds.states, types]),
        n_actions=2,
        discrete_state_levels=(3, 2, 2),
    )
    phi = TypeIndexedBasis(PolynomialBasis(degree=1), n_types=2)
    phi.fit(ds)
    out = phi.evaluate(ds.actions, ds.states)
    k_base = phi.k_ // 2
    block0 = out[:, :k_base]
    block1 = out[:, k_base:]
    is_type1 = ds.states[:, -1] == 1
    assert np.all(block0[is_type1] == 0)
    assert np.all(block1[~is_type1] == 0)
    # the active block equals the base map on the remaining coordinates
    inner = PolynomialBasis(degree=1)
    inner.fit(
        PanelDataset(
            ids=ds.ids,
            times=ds.times,
            actions=ds.actions,
            states=ds.states[:, :-1],
            n_actions=2,
            discrete_state_levels=(3, 2),
        )
    )
    expected = inner.evaluate(ds.actions, ds.states[:, :-1])
    got = np.where(is_type1[:, None], block1, block0)
    np.testing.assert_allclose(got, expected)


def test_build_design_evaluates_payoff_on_current_rows():
    ds = grid_panel()
    design = build_design(ds, bus_features_2d, PolynomialBasis(degree=2))
    trans = design.transitions
    expected = bus_features_2d(
        ds.actions[trans.now_idx], ds.states[trans.now_idx]
    )
    np.testing.assert_allclose(design.z_now, expected)
    assert design.phi_now.shape == (trans.n, design.k_phi)
    assert design.phi_next.shape == (trans.n, design.k_phi)


def bus_features_2d(actions, states):
    return np.column_stack([actions, actions * states[:, 0]]).astype(float)


def test_build_design_rejects_underdetermined_systems():
    ds = grid_panel()
    with pytest.raises(ValueError, match="underdetermined"):
        build_design(
            ds,
            bus_features_2d,
            CustomBasis(
                fn=lambda a, x: np.eye(len(a), 1000), k=1000
            ),
        )


def test_build_design_warns_on_rank_deficient_basis():
    ds = grid_panel()

    def degenerate(a, x):
        col = np.ones((len(a), 1))
        return np.hstack([col, col])  # duplicated column

    with pytest.warns(UserWarning):
        build_design(ds, bus_features_2d, CustomBasis(fn=degenerate, k=2))


def test_design_subset_restricts_rows():
    ds = grid_panel()
    design = build_design(ds, bus_features_2d, PolynomialBasis(degree=1))
    mask = np.zeros(design.n_transitions, dtype=bool)
    mask[::2] = True
    sub = design.subset(mask)
    assert sub.n_transitions == mask.sum()
    np.testing.assert_allclose(sub.phi_now, design.phi_now[mask])
    np.testing.assert_allclose(sub.z_now, design.z_now[mask])

"""Bus-engine replacement simulator and Monte Carlo harness.

A fleet of buses accumulates mileage x (capped) while kept (action 1) and
resets to zero when the engine is replaced (action 0).  Keeping pays
theta0 + theta1 * x + theta2 * s where s in {1, 2} is a per-bus type;
replacing pays 0.  Choice shocks are additive type I extreme value, so the
exact policy comes from a finite-horizon backward induction with the usual
log-sum-exp continuation values.  Panels are sampled from a late window of
a long horizon, where the policy is numerically stationary.

Stored state coordinates are (mileage, type_code) with type_code in
{0, 1}; the payoff feature map adds the +1 back, so estimated coefficients
are directly comparable to the structural (theta0, theta1, theta2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import chi2_contingency

from .basis import PolynomialBasis, build_design
from .data import PanelDataset
from .estimators import locally_robust_estimate, pseudo_mle_estimate
from .validation import as_rng, check_beta

__all__ = [
    "BusConfig",
    "ValueTables",
    "bus_payoff_features",
    "solve_bus_values",
    "simulate_panel",
    "hide_types",
    "window_stationarity",
    "MonteCarloResult",
    "monte_carlo",
]

EULER = float(np.euler_gamma)


@dataclass
class BusConfig:
    """Data-generating configuration for the simulated fleet.

    keep_window = (t_start, t_end) selects the half-open window of periods
    that enter the released panel; everything before t_start is burn-in.
    """

    theta: tuple = (2.0, -0.15, 1.0)
    beta: float = 0.9
    n_buses: int = 1000
    horizon: int = 2000
    keep_window: tuple = (1000, 1030)
    mileage_cap: int = 400
    type_shares: tuple = (0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        check_beta(self.beta)
        t_start, t_end = self.keep_window
        if not (0 <= t_start < t_end <= self.horizon):
            raise ValueError(
                "keep_window must be a non-empty interval inside the horizon"
            )
        if self.mileage_cap < 1:
            raise ValueError("mileage_cap must be at least 1")
        if len(self.theta) != 3:
            raise ValueError("theta must be (theta0, theta1, theta2)")
        if abs(sum(self.type_shares) - 1.0) > 1e-12 or min(self.type_shares) < 0:
            raise ValueError("type_shares must be a probability vector")
        if self.n_buses < 1:
            raise ValueError("n_buses must be positive")

    @property
    def n_periods(self) -> int:
        return self.keep_window[1] - self.keep_window[0]

    def to_dict(self) -> dict:
        return {
            "theta": list(self.theta),
            "beta": self.beta,
            "n_buses": self.n_buses,
            "horizon": self.horizon,
            "keep_window": list(self.keep_window),
            "mileage_cap": self.mileage_cap,
            "type_shares": list(self.type_shares),
            "seed": self.seed,
        }


def bus_payoff_features(actions, states) -> np.ndarray:
    """Structural payoff features (a, a*x, a*s) with s = type_code + 1.

    Works both when the type column is observed and when it is supplied as
    an appended latent-type code (mixture estimation)."""
    a = np.asarray(actions, dtype=float)
    x = states[:, 0]
    s = states[:, 1] + 1.0
    return np.column_stack([a, a * x, a * s])


@dataclass
class ValueTables:
    """Backward-induction values and choice probabilities.

    All arrays are indexed [t, x, s_code]: V has shape (horizon+1, cap+1,
    n_types) with the terminal zero slice at t = horizon; v0 (replace), v1
    (keep) and p0 (replacement probability) have shape (horizon, cap+1,
    n_types) and satisfy p0 = 1/(1 + exp(v1 - v0)) entrywise."""

    V: np.ndarray
    v0: np.ndarray
    v1: np.ndarray
    p0: np.ndarray
    config: BusConfig


def solve_bus_values(config: BusConfig) -> ValueTables:
    """Exact finite-horizon solution of the replacement problem.

    Backward induction from the terminal period: v0 = beta * V(0, s, t+1);
    v1 = theta0 + theta1 * x + theta2 * s + beta * V(min(x+1, cap), s, t+1);
    V = gamma + log(exp v0 + exp v1)."""
    X = config.mileage_cap + 1
    S = len(config.type_shares)
    t0, t1, t2 = config.theta
    x_grid = np.arange(X, dtype=float)
    s_grid = np.arange(1, S + 1, dtype=float)
    flow = t0 + t1 * x_grid[:, None] + t2 * s_grid[None, :]
    nxt = np.minimum(np.arange(X) + 1, config.mileage_cap)
    V = np.zeros((config.horizon + 1, X, S))
    v0 = np.zeros((config.horizon, X, S))
    v1 = np.zeros((config.horizon, X, S))
    for t in range(config.horizon - 1, -1, -1):
        v0[t] = config.beta * V[t + 1, 0, :][None, :]
        v1[t] = flow + config.beta * V[t + 1, nxt, :]
        m = np.maximum(v0[t], v1[t])
        V[t] = EULER + m + np.log(
            np.exp(v0[t] - m) + np.exp(v1[t] - m)
        )
    with np.errstate(over="ignore"):
        p0 = 1.0 / (1.0 + np.exp(v1 - v0))
    return ValueTables(V=V, v0=v0, v1=v1, p0=p0, config=config)


def simulate_panel(
    config: BusConfig,
    seed=None,
    tables: ValueTables | None = None,
) -> PanelDataset:
    """Simulate a fleet and keep the stationary observation window.

    Mileage starts at zero, increments while kept, and resets to zero on
    replacement.  Bus types are drawn once per bus from type_shares and
    recorded as the second state coordinate.  Times in the returned panel
    are the absolute simulation periods of keep_window."""
    rng = as_rng(config.seed if seed is None else seed)
    if tables is None:
        tables = solve_bus_values(config)
    elif tables.config.to_dict() != config.to_dict():
        raise ValueError("tables were solved for a different configuration")
    n = config.n_buses
    t_start, t_end = config.keep_window
    n_keep = config.n_periods
    types = rng.choice(len(config.type_shares), size=n, p=config.type_shares)
    x = np.zeros(n, dtype=np.int64)
    rec_x = np.zeros((n_keep, n), dtype=np.int64)
    rec_a = np.zeros((n_keep, n), dtype=np.int64)
    u = rng.random((t_end, n))
    for t in range(t_end):
        p_keep = 1.0 - tables.p0[t, x, types]
        a = (u[t] < p_keep).astype(np.int64)
        if t >= t_start:
            rec_x[t - t_start] = x
            rec_a[t - t_start] = a
        x = np.where(a == 1, np.minimum(x + 1, config.mileage_cap), 0)
    ids = np.tile(np.arange(n), n_keep)
    times = np.repeat(np.arange(t_start, t_end), n)
    states = np.column_stack(
        [rec_x.reshape(-1).astype(float), np.tile(types, n_keep)]
    )
    return PanelDataset(
        ids=ids,
        times=times,
        actions=rec_a.reshape(-1),
        states=states,
        n_actions=2,
        discrete_state_levels=(
            config.mileage_cap + 1, len(config.type_shares)
        ),
    )


def hide_types(dataset: PanelDataset, column: int = -1) -> PanelDataset:
    """Drop a state coordinate (default the last), e.g. to hide the bus
    type from a latent-heterogeneity estimator."""
    d = dataset.state_dim
    col = column % d
    keep = [j for j in range(d) if j != col]
    levels = dataset.discrete_state_levels
    if levels is not None:
        levels = tuple(levels[j] for j in keep)
    return PanelDataset(
        ids=dataset.ids,
        times=dataset.times,
        actions=dataset.actions,
        states=dataset.states[:, keep],
        n_actions=dataset.n_actions,
        discrete_state_levels=levels,
        extras=dataset.extras,
    )


def window_stationarity(dataset: PanelDataset, n_bins: int = 20) -> float:
    """Chi-square p-value comparing mileage in the first and second half of
    the observation window; small values flag a non-stationary window."""
    x = dataset.states[:, 0]
    t = dataset.times
    cut = (t.min() + t.max() + 1) / 2
    edges = np.quantile(x, np.linspace(0, 1, n_bins + 1))
    edges = np.unique(edges)
    first = np.histogram(x[t < cut], bins=edges)[0]
    second = np.histogram(x[t >= cut], bins=edges)[0]
    keep = (first + second) > 0
    if keep.sum() < 2:
        return 1.0
    return float(chi2_contingency(np.vstack([first[keep], second[keep]]))[1])


@dataclass
class MonteCarloResult:
    """Per-replication estimates for the simulated-fleet experiment."""

    config: BusConfig
    n_reps: int
    theta_pseudo: np.ndarray        # (n_ok, 3) or empty
    theta_robust: np.ndarray        # (n_ok, 3) or empty
    se_robust: np.ndarray           # (n_ok, 3) or empty
    failures: list = field(default_factory=list)
    seconds: float = 0.0
    max_mileage: int = 0

    def summary(self) -> dict:
        truth = np.asarray(self.config.theta, dtype=float)

        def block(values, ses=None):
            if len(values) == 0:
                return None
            mean = values.mean(axis=0)
            bias = mean - truth
            sd = (values.std(axis=0, ddof=1) if len(values) > 1
                  else np.full(truth.shape, np.nan))
            out = {
                "mean": mean.tolist(),
                "sd": sd.tolist(),
                "bias": bias.tolist(),
                "bias_pct": (100.0 * bias / np.abs(truth)).tolist(),
                "rmse": np.sqrt(((values - truth) ** 2).mean(axis=0)).tolist(),
                "n": int(len(values)),
            }
            if ses is not None and len(ses):
                out["mean_se"] = ses.mean(axis=0).tolist()
            return out

        return {
            "theta_true": truth.tolist(),
            "pseudo_mle": block(self.theta_pseudo),
            "locally_robust": block(self.theta_robust, self.se_robust),
            "n_reps": self.n_reps,
            "n_failures": len(self.failures),
            "max_mileage": int(self.max_mileage),
            "seconds": self.seconds,
        }

    def table(self) -> str:
        s = self.summary()
        rows = [
            f"{'':18s} {'theta0':>10s} {'theta1':>10s} {'theta2':>10s}",
            f"{'true':18s} " + " ".join(f"{v:10.4f}" for v in s["theta_true"]),
        ]
        for name, key in (("pseudo-MLE", "pseudo_mle"),
                          ("loc. robust", "locally_robust")):
            blk = s[key]
            if blk is None:
                continue
            for stat in ("mean", "sd", "bias", "bias_pct"):
                label = {"bias_pct": "bias %"}.get(stat, stat)
                rows.append(f"{name + ' ' + label:18s} "
                            + " ".join(f"{v:10.4f}" for v in blk[stat]))
            if "mean_se" in blk:
                rows.append(f"{name + ' se':18s} "
                            + " ".join(f"{v:10.4f}" for v in blk["mean_se"]))
        rows.append(f"replications: {s['n_reps']}, "
                    f"failures: {s['n_failures']}")
        return "\n".join(rows)


def monte_carlo(
    config: BusConfig,
    n_reps: int = 100,
    seed: int | None = None,
    methods: tuple = ("pseudo_mle", "locally_robust"),
    degree: int = 3,
    ccp=None,
    progress=None,
) -> MonteCarloResult:
    """Repeated simulate-and-estimate under a fixed configuration.

    The exact value tables are solved once and shared across replications;
    each replication gets an independent child seed for both the panel and
    the fold split.  Replications whose estimation raises are recorded in
    failures and excluded from the summaries."""
    import time as _time

    t0 = _time.perf_counter()
    if seed is None:
        seed = config.seed
    tables = solve_bus_values(config)
    children = np.random.SeedSequence(seed).spawn(n_reps)
    th_p, th_r, se_r, failures = [], [], [], []
    max_mileage = 0
    for rep in range(n_reps):
        rng = np.random.default_rng(children[rep])
        panel = simulate_panel(config, seed=rng, tables=tables)
        max_mileage = max(max_mileage, int(panel.states[:, 0].max()))
        fold_seed = int(rng.integers(2**31 - 1))
        try:
            design = build_design(panel, bus_payoff_features,
                                  PolynomialBasis(degree))
            if "pseudo_mle" in methods:
                rep_p = pseudo_mle_estimate(
                    panel, bus_payoff_features, config.beta,
                    design=design, ccp=ccp,
                )
                th_p.append(rep_p.theta)
            if "locally_robust" in methods:
                rep_r = locally_robust_estimate(
                    panel, bus_payoff_features, config.beta,
                    design=design, ccp=ccp, seed=fold_seed,
                )
                th_r.append(rep_r.theta)
                se_r.append(rep_r.std_errors)
        except Exception as exc:  # noqa: BLE001 - harness must survive reps
            failures.append({"rep": rep, "error": f"{type(exc).__name__}: {exc}"})
        if progress is not None:
            progress(rep + 1, n_reps)
    return MonteCarloResult(
        config=config,
        n_reps=n_reps,
        theta_pseudo=np.array(th_p) if th_p else np.empty((0, 3)),
        theta_robust=np.array(th_r) if th_r else np.empty((0, 3)),
        se_robust=np.array(se_r) if se_r else np.empty((0, 3)),
        failures=failures,
        seconds=_time.perf_counter() - t0,
        max_mileage=max_mileage,
    )

"""Command-line entry points: simulate, estimate, mc, select-k.

Every command resolves a run configuration (JSON config file, overridden
by any explicitly passed flags), writes a versioned JSON report plus a
manifest (config echo, seed, package versions) into the output directory,
and logs per-stage wall-clock timings to stderr.  In the default
deterministic mode (threads = 1) the data artifacts and report.json are
byte-identical across reruns of the same manifest; timings live only in
the manifest and the logs.

Exit codes: 0 success, 2 usage error (argparse), 3 invalid configuration,
4 missing input file, 5 runtime failure.  Failures print a
machine-readable error JSON to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from .basis import PolynomialBasis, SaturatedBasis, build_design
from .bus import (
    BusConfig,
    bus_payoff_features,
    hide_types,
    monte_carlo,
    simulate_panel,
)
from .ccp import CcpModel
from .data import PanelDataset, load_panel_csv, save_panel_csv
from .em import em_estimate
from .estimators import locally_robust_estimate, pseudo_mle_estimate
from .games import game_estimate, load_market_csv
from .likelihood import component_values, pseudo_mle
from .recursive import recursive_estimate
from .td import select_k, sgd_solve, solve_td, assemble_td_system

SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_RUNTIME = 5


class ConfigError(ValueError):
    """Invalid run configuration (exit code 3)."""


class MissingFileError(FileNotFoundError):
    """Missing input file (exit code 4)."""


# -- plumbing -----------------------------------------------------------------


def _log(stage: str, seconds: float) -> None:
    print(f"[timing] {stage}: {seconds:.3f}s", file=sys.stderr, flush=True)


class _Timer:
    """Collects named stage durations and logs them as they finish."""

    def __init__(self):
        self.stages: dict[str, float] = {}

    def stage(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()
                return self

            def __exit__(self, *exc):
                dt = time.perf_counter() - self.t0
                timer.stages[name] = timer.stages.get(name, 0.0) + dt
                _log(name, dt)
                return False

        return _Ctx()


def _versions() -> dict:
    import scipy
    import sklearn

    from . import __version__

    out = {
        "tdchoice": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
    }
    try:
        import numba

        out["numba"] = numba.__version__
    except Exception:
        out["numba"] = None
    return out


def _scrub_volatile(obj):
    """Drop wall-clock keys so report.json is reproducible byte-for-byte."""
    if isinstance(obj, dict):
        return {
            k: _scrub_volatile(v)
            for k, v in obj.items()
            if k not in ("seconds",)
        }
    if isinstance(obj, list):
        return [_scrub_volatile(v) for v in obj]
    return obj


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


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _emit_outputs(out_dir, command: str, config: dict, report: dict,
                  timer: _Timer, outputs: list) -> None:
    import os

    os.makedirs(out_dir, exist_ok=True)
    report_path = os.path.join(out_dir, "report.json")
    _write_json(report_path, {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        **_scrub_volatile(report),
    })
    manifest_path = os.path.join(out_dir, "manifest.json")
    _write_json(manifest_path, {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "versions": _versions(),
        "timings": timer.stages,
        "outputs": sorted([*outputs, "report.json"]),
    })


def _load_config_file(path) -> dict:
    import os

    if not os.path.exists(path):
        raise MissingFileError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    return cfg


def _resolve(args: argparse.Namespace, parser: argparse.ArgumentParser) -> dict:
    """Merge config-file values under explicitly passed flags (flags win)."""
    config = vars(args).copy()
    config.pop("func", None)
    file_cfg = {}
    if config.get("config"):
        file_cfg = _load_config_file(config["config"])
    sub = parser._subparser_map[config["command"]]  # noqa: SLF001
    passed = _explicit_flags(parser) | _explicit_flags(sub)
    for key, val in file_cfg.items():
        key = key.replace("-", "_")
        if key not in config:
            raise ConfigError(f"unknown config key {key!r}")
        if key not in passed:
            config[key] = val
    return config


def _explicit_flags(parser: argparse.ArgumentParser) -> set:
    """Destinations of options that actually appeared on the command line."""
    passed = set()
    argv = sys.argv[1:]
    for action in parser._actions:  # noqa: SLF001 - argparse has no public API
        for opt in action.option_strings:
            if any(a == opt or a.startswith(opt + "=") for a in argv):
                passed.add(action.dest)
    return passed


def _positive(value: float, name: str) -> float:
    value = float(value)
    if not value > 0:
        raise ConfigError(f"{name} must be positive, got {value}")
    return value


def _check_beta_config(beta: float) -> float:
    beta = float(beta)
    if not (0.0 <= beta < 1.0):
        raise ConfigError(f"beta must lie in [0, 1), got {beta}")
    return beta


def _require_file(path) -> str:
    import os

    if path is None:
        raise ConfigError("an input file is required (--input)")
    if not os.path.exists(path):
        raise MissingFileError(f"input file not found: {path}")
    return path


def _make_basis(cfg: dict):
    kind = cfg.get("basis", "polynomial")
    if kind == "polynomial":
        degree = int(cfg.get("degree", 3))
        if degree < 0:
            raise ConfigError("degree must be nonnegative")
        return PolynomialBasis(degree)
    if kind == "saturated":
        return SaturatedBasis()
    raise ConfigError(f"unknown basis {kind!r} (polynomial or saturated)")


def _levels_option(levels) -> tuple | None:
    """--levels entries: positive ints declare discrete coordinates, 0 means
    continuous."""
    if not levels:
        return None
    out = []
    for l in levels:
        l = int(l)
        if l < 0:
            raise ConfigError("--levels entries must be >= 0 (0 = continuous)")
        out.append(None if l == 0 else l)
    return tuple(out)


def _generic_payoff(n_actions: int, include_opponents: bool):
    """Linear-in-parameters payoff: per non-baseline action an intercept and
    one slope per state coordinate (plus the mean opponent action for pooled
    game panels).  Action 0 is the zero-payoff baseline."""

    def payoff(actions, states, opponents=None):
        a = np.asarray(actions, dtype=np.int64)
        x = np.asarray(states, dtype=float)
        cols = [x[:, j] for j in range(x.shape[1])]
        if include_opponents and opponents is not None:
            cols.append(np.asarray(opponents, dtype=float).mean(axis=1))
        blocks = []
        for j in range(1, n_actions):
            ind = (a == j).astype(float)
            blocks.append(ind)
            blocks.extend(ind * c for c in cols)
        return np.column_stack(blocks)

    return payoff


def _payoff_map(name: str, n_actions: int, game: bool):
    if name == "bus":
        return bus_payoff_features
    if name == "linear":
        return _generic_payoff(n_actions, include_opponents=game)
    raise ConfigError(f"unknown payoff map {name!r} (bus or linear)")


# -- pseudo-MLE with stochastic TD solves --------------------------------------


def _pseudo_mle_sgd(dataset: PanelDataset, payoff, beta: float, phi, r, ccp,
                    schedule, max_steps, seed: int, threads: int):
    """Pseudo-MLE pipeline with every value component solved by stochastic
    approximation instead of the direct linear solve."""
    design = build_design(dataset, payoff, phi, r)
    eta = CcpModel() if ccp is None else CcpModel(method=ccp)
    eta.fit(dataset)
    cols = []
    for j in range(design.theta_dim):
        sol = sgd_solve(design, beta, ("payoff", j), schedule=schedule,
                        max_steps=max_steps, seed=seed + j, n_threads=threads)
        cols.append(sol.weights)
    Omega = np.column_stack(cols)
    xi = sgd_solve(design, beta, ("shock", eta), schedule=schedule,
                   max_steps=max_steps, seed=seed + design.theta_dim,
                   n_threads=threads).weights
    cv = component_values(design, Omega, xi)
    res = pseudo_mle(cv)
    from .estimators import EstimateReport

    return EstimateReport(
        method="pseudo_mle_sgd",
        theta=res.theta,
        beta=beta,
        theta_stage1=res.theta,
        n_transitions=design.n_transitions,
        n_individuals=dataset.n_individuals,
        n_obs=dataset.n_obs,
        k_phi=design.k_phi,
        k_r=design.k_r,
        theta_dim=design.theta_dim,
        diagnostics={
            "log_likelihood": res.log_likelihood,
            "sgd_schedule": list(schedule),
            "sgd_max_steps": max_steps,
        },
    )


# -- commands -------------------------------------------------------------------


def _bus_config(cfg: dict) -> BusConfig:
    try:
        return BusConfig(
            theta=tuple(cfg["theta"]),
            beta=_check_beta_config(cfg["beta"]),
            n_buses=int(cfg["n_buses"]),
            horizon=int(cfg["horizon"]),
            keep_window=tuple(int(v) for v in cfg["keep_window"]),
            mileage_cap=int(cfg["mileage_cap"]),
            type_shares=tuple(cfg["type_shares"]),
            seed=int(cfg["seed"]),
        )
    except (ValueError, TypeError) as exc:
        raise ConfigError(str(exc)) from None


def cmd_simulate(cfg: dict, timer: _Timer) -> dict:
    import os

    bus_cfg = _bus_config(cfg)
    with timer.stage("simulate"):
        panel = simulate_panel(bus_cfg)
        if cfg["hide_types"]:
            panel = hide_types(panel)
    out_csv = os.path.join(cfg["output_dir"], cfg["out"])
    with timer.stage("write"):
        os.makedirs(cfg["output_dir"], exist_ok=True)
        save_panel_csv(panel, out_csv)
    report = {
        "n_obs": panel.n_obs,
        "n_individuals": panel.n_individuals,
        "n_periods": bus_cfg.n_periods,
        "state_dim": panel.state_dim,
        "csv": cfg["out"],
        "config": bus_cfg.to_dict(),
    }
    return {"report": report, "outputs": [cfg["out"]]}


def _run_single_agent(cfg: dict, timer: _Timer) -> dict:
    with timer.stage("load"):
        dataset = load_panel_csv(
            _require_file(cfg["input"]),
            n_actions=cfg["n_actions"],
            discrete_state_levels=_levels_option(cfg["levels"]),
        )
    payoff = _payoff_map(cfg["payoff"], dataset.n_actions, game=False)
    phi = _make_basis(cfg)
    beta = _check_beta_config(cfg["beta"])
    tol = _positive(cfg["tol"], "tol")
    estimator = cfg["estimator"]
    with timer.stage("estimate"):
        if cfg["solver"] == "sgd":
            if estimator != "pseudo_mle":
                raise ConfigError(
                    "solver 'sgd' is available for the pseudo_mle estimator"
                )
            report = _pseudo_mle_sgd(
                dataset, payoff, beta, phi, None, cfg["ccp"],
                schedule=tuple(cfg["sgd_schedule"]),
                max_steps=cfg["sgd_steps"], seed=cfg["seed"],
                threads=cfg["threads"],
            )
            state = None
        elif estimator == "pseudo_mle":
            report = pseudo_mle_estimate(
                dataset, payoff, beta, phi=phi, ccp=cfg["ccp"],
            )
            state = None
        elif estimator == "locally_robust":
            report = locally_robust_estimate(
                dataset, payoff, beta, phi=phi, ccp=cfg["ccp"],
                n_folds=cfg["folds"], seed=cfg["seed"],
            )
            state = None
        elif estimator == "recursive":
            report = recursive_estimate(
                dataset, payoff, beta, phi=phi, ccp=cfg["ccp"], tol=tol,
                max_iter=cfg["max_iter"], robust=cfg["robust"],
                n_folds=cfg["folds"], seed=cfg["seed"],
            )
            state = None
        elif estimator == "em":
            if cfg["types"] < 1:
                raise ConfigError("--types must be at least 1 for em")
            report, state = em_estimate(
                dataset, payoff, beta, n_types=cfg["types"], phi=phi,
                ccp=cfg["ccp"], tol=tol, max_iter=cfg["max_iter"],
                n_starts=cfg["starts"], seed=cfg["seed"],
            )
        else:
            raise ConfigError(f"unknown estimator {estimator!r}")
    payload = report.to_dict()
    if state is not None:
        payload["mixture"] = {
            "n_types": state.K,
            "pi": state.pi.tolist(),
            "log_likelihood": state.log_likelihood,
        }
    return {"report": payload, "outputs": []}


def _run_game(cfg: dict, timer: _Timer) -> dict:
    with timer.stage("load"):
        panel = load_market_csv(
            _require_file(cfg["input"]), n_actions=cfg["n_actions"]
        )
    payoff = _payoff_map(cfg["payoff"], panel.n_actions, game=True)
    beta = _check_beta_config(cfg["beta"])
    sub = cfg["game_estimator"]
    if sub not in ("pseudo_mle", "locally_robust", "recursive"):
        raise ConfigError(
            "game estimator must be pseudo_mle, locally_robust, or recursive"
        )
    with timer.stage("estimate"):
        report = game_estimate(
            panel, payoff, beta, estimator=sub,
            player_specific=cfg["player_specific"], phi=_make_basis(cfg),
            ccp=cfg["ccp"], n_folds=cfg["folds"], seed=cfg["seed"],
        )
    return {"report": report.to_dict(), "outputs": []}


def cmd_estimate(cfg: dict, timer: _Timer) -> dict:
    if cfg["estimator"] == "game":
        return _run_game(cfg, timer)
    return _run_single_agent(cfg, timer)


def cmd_mc(cfg: dict, timer: _Timer) -> dict:
    bus_cfg = _bus_config(cfg)
    reps = int(cfg["reps"])
    if reps < 1:
        raise ConfigError("--reps must be positive")
    methods = tuple(cfg["methods"])
    for m in methods:
        if m not in ("pseudo_mle", "locally_robust"):
            raise ConfigError(f"unknown mc method {m!r}")
    with timer.stage("monte_carlo"):
        result = monte_carlo(
            bus_cfg, n_reps=reps, methods=methods, degree=int(cfg["degree"]),
        )
    if cfg["table"]:
        print(result.table())
    return {"report": {"summary": result.summary(),
                       "failures": result.failures},
            "outputs": []}


def cmd_select_k(cfg: dict, timer: _Timer) -> dict:
    with timer.stage("load"):
        dataset = load_panel_csv(
            _require_file(cfg["input"]),
            n_actions=cfg["n_actions"],
            discrete_state_levels=_levels_option(cfg["levels"]),
        )
    payoff = _payoff_map(cfg["payoff"], dataset.n_actions, game=False)
    degrees = cfg["degrees"]
    if not degrees:
        raise ConfigError("--degrees needs at least one candidate")
    candidates = [PolynomialBasis(int(d)) for d in degrees]
    names = [f"polynomial({int(d)})" for d in degrees]
    if cfg["include_saturated"]:
        candidates.append(SaturatedBasis())
        names.append("saturated")
    with timer.stage("select_k"):
        result = select_k(
            dataset, payoff, candidates, _check_beta_config(cfg["beta"]),
            split_seed=cfg["seed"],
        )
    report = result.to_dict()
    report["candidates"] = names
    report["selected"] = names[result.index]
    return {"report": report, "outputs": []}


# -- parser ---------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None,
                   help="JSON config file; explicit flags override its values")
    p.add_argument("--output-dir", default=".", dest="output_dir",
                   help="directory for report.json and manifest.json")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads (1 = deterministic mode)")


def _add_bus_flags(p: argparse.ArgumentParser) -> None:
    d = BusConfig()
    p.add_argument("--theta", type=float, nargs=3, default=list(d.theta))
    p.add_argument("--beta", type=float, default=d.beta)
    p.add_argument("--n-buses", type=int, default=d.n_buses, dest="n_buses")
    p.add_argument("--horizon", type=int, default=d.horizon)
    p.add_argument("--keep-window", type=int, nargs=2,
                   default=list(d.keep_window), dest="keep_window")
    p.add_argument("--mileage-cap", type=int, default=d.mileage_cap,
                   dest="mileage_cap")
    p.add_argument("--type-shares", type=float, nargs="+",
                   default=list(d.type_shares), dest="type_shares")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tdchoice",
        description="Structural estimation of dynamic discrete choice "
                    "models via temporal-difference fixed points.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="simulate a bus-engine panel")
    _add_common(p_sim)
    _add_bus_flags(p_sim)
    p_sim.add_argument("--out", default="panel.csv",
                       help="CSV file name inside the output directory")
    p_sim.add_argument("--hide-types", action="store_true", dest="hide_types",
                       help="drop the type column from the written panel")
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser("estimate", help="estimate theta from a panel CSV")
    _add_common(p_est)
    p_est.add_argument("--input", default=None,
                       help="panel CSV (id,t,a,x1..xD) or, with --estimator "
                            "game, a market CSV (market,t,x1..xD,a1..aN)")
    p_est.add_argument("--estimator", default="locally_robust",
                       choices=["pseudo_mle", "locally_robust", "recursive",
                                "em", "game"])
    p_est.add_argument("--game-estimator", default="pseudo_mle",
                       dest="game_estimator",
                       help="estimator run on the pooled game panel")
    p_est.add_argument("--beta", type=float, default=0.9)
    p_est.add_argument("--payoff", default="bus",
                       help="payoff feature map: bus or linear")
    p_est.add_argument("--basis", default="polynomial",
                       choices=["polynomial", "saturated"])
    p_est.add_argument("--degree", type=int, default=3)
    p_est.add_argument("--levels", type=int, nargs="+", default=None,
                       help="declared level count per state coordinate "
                            "(0 = continuous)")
    p_est.add_argument("--n-actions", type=int, default=None, dest="n_actions")
    p_est.add_argument("--ccp", default=None,
                       help="choice-probability model: logit or cells")
    p_est.add_argument("--folds", type=int, default=2)
    p_est.add_argument("--types", type=int, default=2,
                       help="latent type count for --estimator em")
    p_est.add_argument("--starts", type=int, default=5,
                       help="random starts for --estimator em")
    p_est.add_argument("--tol", type=float, default=1e-6)
    p_est.add_argument("--max-iter", type=int, default=500, dest="max_iter")
    p_est.add_argument("--robust", action="store_true",
                       help="cross-fitted corrected steps (recursive)")
    p_est.add_argument("--player-specific", action="store_true",
                       dest="player_specific",
                       help="per-player value components (game)")
    p_est.add_argument("--solver", default="direct",
                       choices=["direct", "sgd"])
    p_est.add_argument("--sgd-schedule", type=float, nargs=2,
                       default=[1.0, 100.0], dest="sgd_schedule",
                       help="(a0, b0) of the step size a0/(b0+l)")
    p_est.add_argument("--sgd-steps", type=int, default=None,
                       dest="sgd_steps",
                       help="stochastic updates per component "
                            "(default 10x transitions)")
    p_est.set_defaults(func=cmd_estimate)

    p_mc = sub.add_parser("mc", help="repeated simulate-and-estimate")
    _add_common(p_mc)
    _add_bus_flags(p_mc)
    p_mc.add_argument("--reps", type=int, default=100)
    p_mc.add_argument("--methods", nargs="+",
                      default=["pseudo_mle", "locally_robust"])
    p_mc.add_argument("--degree", type=int, default=3)
    p_mc.add_argument("--table", action="store_true",
                      help="print the summary table to stdout")
    p_mc.set_defaults(func=cmd_mc)

    p_sel = sub.add_parser("select-k", help="pick a basis size by validation")
    _add_common(p_sel)
    p_sel.add_argument("--input", default=None)
    p_sel.add_argument("--beta", type=float, default=0.9)
    p_sel.add_argument("--payoff", default="bus")
    p_sel.add_argument("--degrees", type=int, nargs="+", default=[1, 2, 3, 4])
    p_sel.add_argument("--include-saturated", action="store_true",
                       dest="include_saturated")
    p_sel.add_argument("--levels", type=int, nargs="+", default=None)
    p_sel.add_argument("--n-actions", type=int, default=None, dest="n_actions")
    p_sel.set_defaults(func=cmd_select_k)

    parser._subparser_map = {  # noqa: SLF001 - consumed by _resolve
        "simulate": p_sim,
        "estimate": p_est,
        "mc": p_mc,
        "select-k": p_sel,
    }
    return parser


def _fail(exc: BaseException, exit_code: int) -> int:
    payload = {
        "error": {
            "type": type(exc).__name__,
            "message": str(exc),
            "exit_code": exit_code,
        }
    }
    print(json.dumps(payload), file=sys.stderr)
    return exit_code


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if argv is not None:
        # _explicit_flags reads sys.argv; make programmatic calls consistent
        sys.argv = [sys.argv[0], *argv]
    timer = _Timer()
    try:
        config = _resolve(args, parser)
        func = args.func
        result = func(config, timer)
        manifest_cfg = {k: v for k, v in config.items() if k != "config"}
        _emit_outputs(config["output_dir"], config["command"], manifest_cfg,
                      {"report": result["report"]}, timer,
                      result["outputs"] + ["manifest.json"])
    except MissingFileError as exc:
        return _fail(exc, EXIT_MISSING)
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail(exc, EXIT_MISSING)
    except (ValueError, RuntimeError, KeyError) as exc:
        return _fail(exc, EXIT_RUNTIME)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Temporal-difference fixed points for linear value-component weights.

Each value component (payoff accumulator h per parameter dimension, shock
accumulator g) solves an empirical projected Bellman equation.  In weight
space that is a k x k linear system

    mean[ phi (phi - beta phi')' ] w = mean[ phi * target ],

whose solution makes the TD error orthogonal to the feature span.  The same
machinery runs backward (features swapped) for the correction multipliers of
the locally robust moments.  A stochastic-approximation solver iterates the
plain TD update on sampled transitions and converges to the same weights.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from sklearn.base import clone

from .basis import DesignSystem, build_design, gram_min_eig
from .ccp import EULER_GAMMA
from .data import PanelDataset, split_folds
from .validation import check_beta

try:  # pragma: no cover - exercised implicitly
    from numba import njit

    _HAVE_NUMBA = True
except Exception:  # pragma: no cover
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn
        return wrap if not (args and callable(args[0])) else args[0]


__all__ = [
    "TdSystem",
    "TdSolution",
    "assemble_td_system",
    "solve_td",
    "solve_h_all",
    "solve_xi",
    "solve_lambda",
    "sgd_solve",
    "select_k",
    "SelectKResult",
]


@dataclass
class TdSystem:
    """Assembled linear system for one TD fixed point."""

    A: np.ndarray
    b: np.ndarray
    beta: float
    direction: str                      # "forward" or "backward"
    feat_now: np.ndarray = field(repr=False)
    feat_next: np.ndarray = field(repr=False)
    target: np.ndarray | None = field(repr=False)   # per-row scalar target
    weights: np.ndarray = field(repr=False)

    @property
    def k(self) -> int:
        return self.A.shape[0]


@dataclass
class TdSolution:
    """Weights solving a TD system plus solver diagnostics."""

    weights: np.ndarray
    residual_mse: float
    negdef_margin: float
    condition_estimate: float
    solver: str
    diagnostics: dict

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "residual_mse": float(self.residual_mse),
            "negdef_margin": float(self.negdef_margin),
            "condition_estimate": float(self.condition_estimate),
            "solver": self.solver,
            "diagnostics": {
                k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.diagnostics.items()
            },
        }


def _shock_next_values(design: DesignSystem, eta) -> np.ndarray:
    """e(a', x'; eta) per transition: the successor shock expectation."""
    ds = design.dataset
    probs = eta.predict_proba(ds.states)
    nxt = design.transitions.next_idx
    chosen = probs[nxt, ds.actions[nxt]]
    return EULER_GAMMA - np.log(chosen)


def _resolve_target(design: DesignSystem, beta: float, target):
    """Map a target spec to (family, per-row scalar target or vectors)."""
    kind = target[0]
    if kind == "payoff":
        j = int(target[1])
        return "phi", design.z_now[:, j], None
    if kind == "shock":
        eta = target[1]
        return "r", beta * _shock_next_values(design, eta), None
    if kind == "values":
        vals = np.asarray(target[1], dtype=float)
        family = target[2] if len(target) > 2 else "phi"
        if vals.shape != (design.n_transitions,):
            raise ValueError("values target must be one scalar per transition")
        return family, vals, None
    if kind == "score":
        values = np.asarray(target[1], dtype=float)
        family = target[2] if len(target) > 2 else "phi"
        if values.shape[0] != design.n_transitions:
            raise ValueError("score values must have one row per transition")
        return family, None, values
    raise ValueError(f"unknown TD target {kind!r}")


def assemble_td_system(
    design: DesignSystem,
    beta: float,
    target,
    direction: str | None = None,
    weights: np.ndarray | None = None,
) -> TdSystem:
    """Assemble mean[phi (phi - beta phi')'] w = mean[phi target].

    target is ("payoff", j), ("shock", eta_model), or ("score", values[,
    family]); score targets are per-transition feature-paired vectors and
    default to the backward direction used by correction multipliers.
    """
    beta = check_beta(beta)
    family, scalar_target, vector_target = _resolve_target(design, beta, target)
    if direction is None:
        direction = "backward" if target[0] == "score" else "forward"
    if family == "phi":
        now, nxt = design.phi_now, design.phi_next
    else:
        now, nxt = design.r_now, design.r_next
    w = design.weights if weights is None else np.asarray(weights, dtype=float)
    wsum = w.sum()
    if wsum <= 0:
        raise ValueError("transition weights must have positive total mass")
    wn = w / wsum
    if direction == "forward":
        A = now.T @ ((now - beta * nxt) * wn[:, None])
    elif direction == "backward":
        A = (beta * nxt - now).T @ (now * wn[:, None])
    else:
        raise ValueError("direction must be 'forward' or 'backward'")
    if scalar_target is not None:
        b = now.T @ (wn * scalar_target)
        target_rows = scalar_target
    else:
        b = vector_target.T @ wn
        target_rows = None
    return TdSystem(
        A=A, b=b, beta=beta, direction=direction,
        feat_now=now, feat_next=nxt, target=target_rows, weights=wn,
    )


def _refine(w, solve_step, residual, resid_tol, max_rounds=4):
    """Iterative refinement: repeatedly solve for the residual correction."""
    resid = residual(w)
    for _ in range(max_rounds):
        if resid <= resid_tol or not np.all(np.isfinite(w)):
            break
        w_new = w + solve_step(w)
        resid_new = residual(w_new)
        if not resid_new < resid:
            break
        w, resid = w_new, resid_new
    return w, resid


def _linear_solve(A: np.ndarray, b: np.ndarray, resid_tol: float = 1e-10):
    """LU solve with iterative refinement and a minimum-norm fallback for
    consistent singular systems.

    Residuals are judged relative to the right-hand side, |Aw - b|/(1 + |b|);
    refinement recovers this accuracy on ill-conditioned but well-posed
    systems, while a genuinely inconsistent singular system (no exact
    solution) raises.
    """
    svals = np.linalg.svd(A, compute_uv=False)
    cond = float(svals[0] / svals[-1]) if svals[-1] > 0 else float("inf")
    b_norm = np.linalg.norm(b)

    def residual(w):
        return float(np.linalg.norm(A @ w - b) / (1.0 + b_norm))

    if np.isfinite(cond) and cond < 1e12:
        try:
            lu_piv = scipy.linalg.lu_factor(A)
            w = scipy.linalg.lu_solve(lu_piv, b)
            w, resid = _refine(
                w, lambda v: scipy.linalg.lu_solve(lu_piv, b - A @ v),
                residual, resid_tol,
            )
            if resid <= resid_tol and np.all(np.isfinite(w)):
                return w, "lu", resid
        except (np.linalg.LinAlgError, ValueError):
            pass
    w = np.linalg.lstsq(A, b, rcond=None)[0]
    w, resid = _refine(
        w, lambda v: np.linalg.lstsq(A, b - A @ v, rcond=None)[0],
        residual, resid_tol,
    )
    if resid <= resid_tol and np.all(np.isfinite(w)):
        return w, "lstsq", resid
    raise RuntimeError(
        "TD system is singular and inconsistent: relative residual "
        f"{resid:.3e} exceeds {resid_tol:.1e} (condition estimate {cond:.3e})"
    )


def _negdef_margin(system: TdSystem) -> float:
    """Largest eigenvalue of sym(mean[phi (beta phi' - phi)']): negative when
    the TD matrix is safely invertible."""
    M = -system.A if system.direction == "forward" else system.A
    return float(np.linalg.eigvalsh((M + M.T) / 2.0)[-1])


def _residual_mse(system: TdSystem, w: np.ndarray) -> float:
    if system.target is None:
        r = system.A @ w - system.b
        return float(r @ r / len(r))
    delta = (
        system.target
        + system.beta * (system.feat_next @ w)
        - system.feat_now @ w
    )
    return float(np.sum(system.weights * delta * delta))


def solve_td(system: TdSystem, resid_tol: float = 1e-10) -> TdSolution:
    """Direct dense solve of an assembled TD system.

    Singular but consistent systems (duplicate feature columns, cells seen
    only as successors) fall back to the minimum-norm solution, which leaves
    fitted values unchanged; inconsistent systems raise.
    """
    try:
        w, solver, resid = _linear_solve(system.A, system.b, resid_tol)
    except RuntimeError as exc:
        margin = _negdef_margin(system)
        gmin = gram_min_eig(system.feat_now, system.weights)
        raise RuntimeError(
            f"{exc}; negdef margin {margin:.3e}, "
            f"min eig of mean[phi phi'] {gmin:.3e}"
        ) from None
    return TdSolution(
        weights=w,
        residual_mse=_residual_mse(system, w),
        negdef_margin=_negdef_margin(system),
        condition_estimate=float(np.linalg.cond(system.A)),
        solver=solver,
        diagnostics={"linear_residual": float(resid)},
    )


def solve_h_all(
    design: DesignSystem,
    beta: float,
    weights: np.ndarray | None = None,
    resid_tol: float = 1e-10,
) -> tuple[np.ndarray, list[TdSolution]]:
    """Solve the payoff-component system for every parameter dimension.

    The TD matrix is shared across dimensions; only the right-hand side
    changes.  Returns the (k_phi, J) weight matrix and per-dimension
    solutions.
    """
    sols = []
    system = assemble_td_system(design, beta, ("payoff", 0), weights=weights)
    sols.append(solve_td(system, resid_tol))
    for j in range(1, design.theta_dim):
        t = design.z_now[:, j]
        b = system.feat_now.T @ (system.weights * t)
        sysj = TdSystem(
            A=system.A, b=b, beta=system.beta, direction="forward",
            feat_now=system.feat_now, feat_next=system.feat_next,
            target=t, weights=system.weights,
        )
        sols.append(solve_td(sysj, resid_tol))
    Omega = np.column_stack([s.weights for s in sols])
    return Omega, sols


def solve_xi(
    design: DesignSystem,
    beta: float,
    eta,
    weights: np.ndarray | None = None,
    folds=None,
    resid_tol: float = 1e-10,
) -> TdSolution:
    """Solve the shock-component system for xi.

    eta is a fitted CCP model (or, with folds given, a mapping fold ->
    model fitted on the complementary fold); the cross-fitted variant
    averages per-fold solutions with transition-count weights.
    """
    if folds is None:
        system = assemble_td_system(design, beta, ("shock", eta), weights=weights)
        return solve_td(system, resid_tol)
    trans_folds = folds.folds_of(design.transitions.individual_codes)
    parts, masses = [], []
    for fold in range(folds.n_folds):
        mask = trans_folds == fold
        if not np.any(mask):
            continue
        sub = design.subset(mask)
        model = eta[fold]
        system = assemble_td_system(sub, beta, ("shock", model))
        parts.append(solve_td(system, resid_tol))
        masses.append(sub.weights.sum())
    masses = np.asarray(masses)
    masses = masses / masses.sum()
    xi = sum(m * p.weights for m, p in zip(masses, parts))
    return TdSolution(
        weights=xi,
        residual_mse=float(sum(m * p.residual_mse for m, p in zip(masses, parts))),
        negdef_margin=float(max(p.negdef_margin for p in parts)),
        condition_estimate=float(max(p.condition_estimate for p in parts)),
        solver="+".join(sorted({p.solver for p in parts})),
        diagnostics={"fold_masses": masses, "n_folds_used": len(parts)},
    )


def solve_lambda(
    design: DesignSystem,
    beta: float,
    score_derivative_values: np.ndarray,
    family: str = "phi",
    weights: np.ndarray | None = None,
    resid_tol: float = 1e-10,
) -> TdSolution:
    """Backward TD solve for a correction-multiplier weight vector.

    score_derivative_values holds per-transition feature-paired score
    derivatives (one k-vector per row); the solution theta_hat satisfies
    mean[(beta phi' - phi) phi'] theta = mean[values].
    """
    system = assemble_td_system(
        design, beta, ("score", score_derivative_values, family),
        direction="backward", weights=weights,
    )
    return solve_td(system, resid_tol)


# -- stochastic approximation -------------------------------------------------


@njit(cache=True, nogil=True)
def _sgd_loop(w, feat_now, feat_next, target, weight_cdf, beta, a0, b0,
              constant_alpha, n_steps, start_step, seed,
              bound):  # pragma: no cover - jitted
    np.random.seed(seed)
    n = feat_now.shape[0]
    k = w.shape[0]
    weighted = weight_cdf.shape[0] == n
    for s in range(n_steps):
        l = start_step + s
        if constant_alpha > 0.0:
            alpha = constant_alpha
        else:
            alpha = a0 / (b0 + l)
        if weighted:
            i = np.searchsorted(weight_cdf, np.random.random())
            if i >= n:
                i = n - 1
        else:
            i = np.random.randint(0, n)
        delta = target[i]
        for j in range(k):
            delta += beta * feat_next[i, j] * w[j] - feat_now[i, j] * w[j]
        scaled = alpha * delta
        for j in range(k):
            w[j] += scaled * feat_now[i, j]
        if (s & 255) == 0:
            m = 0.0
            for j in range(k):
                aj = abs(w[j])
                if aj > m:
                    m = aj
            if m > bound:
                return s + 1, True
    return n_steps, False


def sgd_solve(
    design: DesignSystem,
    beta: float,
    target,
    schedule=(1.0, 100.0),
    max_steps: int | None = None,
    seed: int = 0,
    init: np.ndarray | None = None,
    divergence_bound: float = 1e8,
    compare_direct: bool = False,
    n_threads: int = 1,
) -> TdSolution:
    """Stochastic TD iteration w += alpha_l * delta * phi on sampled rows.

    schedule is (a0, b0) for alpha_l = a0/(b0+l), or ("constant", c).
    max_steps defaults to 10x the number of transitions.  Rows are sampled
    uniformly, or proportionally to the transition weights when those are
    non-uniform, so the stochastic fixed point matches the weighted direct
    solve.  Raises on divergence (sup-norm of the iterate passing the bound,
    the signature of a too-large learning rate).  With n_threads > 1 the
    update runs lock-free on a shared iterate; the result is then not
    bit-for-bit reproducible.
    """
    beta = check_beta(beta)
    family, scalar_target, vector_target = _resolve_target(design, beta, target)
    if vector_target is not None:
        raise ValueError("sgd_solve supports payoff and shock targets only")
    now = design.phi_now if family == "phi" else design.r_now
    nxt = design.phi_next if family == "phi" else design.r_next
    now = np.ascontiguousarray(now)
    nxt = np.ascontiguousarray(nxt)
    tgt = np.ascontiguousarray(scalar_target)
    if max_steps is None:
        max_steps = 10 * now.shape[0]
    k = now.shape[1]
    w = np.zeros(k) if init is None else np.array(init, dtype=float)
    if w.shape != (k,):
        raise ValueError("init must be a length-k vector")
    if schedule[0] == "constant":
        a0, b0, const = 0.0, 1.0, float(schedule[1])
    else:
        a0, b0, const = float(schedule[0]), float(schedule[1]), -1.0
    wts = design.transitions.weights
    if np.ptp(wts) <= 1e-15 * max(1.0, float(np.max(np.abs(wts)))):
        cdf = np.empty(0)  # uniform sampling fast path
    else:
        cdf = np.ascontiguousarray(np.cumsum(wts) / wts.sum())
    t0 = time.perf_counter()
    if n_threads <= 1:
        steps, diverged = _sgd_loop(
            w, now, nxt, tgt, cdf, beta, a0, b0, const,
            int(max_steps), 0, int(seed) & 0x7FFFFFFF, divergence_bound,
        )
    else:
        from concurrent.futures import ThreadPoolExecutor

        per = int(max_steps) // n_threads
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            futs = [
                pool.submit(
                    _sgd_loop, w, now, nxt, tgt, cdf, beta, a0, b0, const,
                    per, t * per, (int(seed) + 7919 * t) & 0x7FFFFFFF,
                    divergence_bound,
                )
                for t in range(n_threads)
            ]
            results = [f.result() for f in futs]
        steps = sum(r[0] for r in results)
        diverged = any(r[1] for r in results)
    elapsed = time.perf_counter() - t0
    if diverged or not np.all(np.isfinite(w)):
        raise RuntimeError(
            f"stochastic TD iterate diverged after {steps} updates "
            f"(|w| passed {divergence_bound:.1e}): learning rate too large "
            "for this system"
        )
    system = assemble_td_system(design, beta, target)
    diag = {"steps": int(steps), "seconds": elapsed, "threads": int(n_threads)}
    if compare_direct:
        direct = solve_td(system)
        diag["distance_to_direct"] = float(np.linalg.norm(w - direct.weights))
    sys_w = TdSystem(
        A=system.A, b=system.b, beta=beta, direction="forward",
        feat_now=system.feat_now, feat_next=system.feat_next,
        target=system.target, weights=system.weights,
    )
    return TdSolution(
        weights=w,
        residual_mse=_residual_mse(sys_w, w),
        negdef_margin=_negdef_margin(system),
        condition_estimate=float(np.linalg.cond(system.A)),
        solver="sgd",
        diagnostics=diag,
    )


# -- basis-size selection ------------------------------------------------------


@dataclass
class SelectKResult:
    index: int
    mses: list
    ks: list
    messages: list

    def to_dict(self) -> dict:
        return {
            "index": int(self.index),
            "mses": [float(m) for m in self.mses],
            "ks": [int(k) for k in self.ks],
            "messages": self.messages,
        }


def select_k(
    dataset: PanelDataset,
    payoff_features,
    candidate_specs,
    beta: float,
    split_seed: int = 0,
) -> SelectKResult:
    """Pick the basis whose payoff-component TD error generalizes best.

    Individuals are split once by split_seed; each candidate basis is
    fitted on the training half and scored by the mean squared TD error of
    the solved payoff components on held-out transitions.  Ties break
    toward the smaller basis.
    """
    beta = check_beta(beta)
    folds = split_folds(dataset, split_seed, 2)
    train = dataset.subset_individuals(folds.codes_in_fold(0))
    mses, ks, messages = [], [], []
    for spec in candidate_specs:
        try:
            basis = clone(spec).fit(train)
            design = build_design(dataset, payoff_features, basis)
            tf = folds.folds_of(design.transitions.individual_codes)
            train_design = design.subset(tf == 0)
            test_design = design.subset(tf == 1)
            Omega, _ = solve_h_all(train_design, beta)
            delta = (
                test_design.z_now
                + beta * (test_design.phi_next @ Omega)
                - test_design.phi_now @ Omega
            )
            wn = test_design.weights / test_design.weights.sum()
            mses.append(float(np.sum(wn[:, None] * delta * delta)))
            ks.append(int(basis.k_))
            messages.append("ok")
        except Exception as exc:  # noqa: BLE001 - candidates may fail legally
            mses.append(float("inf"))
            ks.append(-1)
            messages.append(f"{type(exc).__name__}: {exc}")
    if not np.isfinite(np.min(mses)):
        raise RuntimeError("every candidate basis failed: " + "; ".join(messages))
    best = min(m for m in mses if np.isfinite(m))
    tol = 1e-9 * (1.0 + abs(best))
    tied = [i for i, m in enumerate(mses) if np.isfinite(m) and m <= best + tol]
    index = min(tied, key=lambda i: (ks[i], i))
    return SelectKResult(index=index, mses=mses, ks=ks, messages=messages)

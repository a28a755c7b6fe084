"""Estimation algorithms: logit CCP initialization, one NPL iteration,
the EPL loop with three interchangeable linear-step strategies (analytic
direct solve, analytic Krylov, Jacobian-free Krylov), and an NFXP
baseline whose outer gradient uses central differences.
"""
from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from scipy.special import expit

from .game import EULER_GAMMA, N_ACTIONS, Game, Theta
from .numerics import (
    GmresOptions,
    LinearOperator,
    MaximizeResult,
    central_diff_grad,
    direct_solve,
    fd_jvp,
    gmres,
    maximize_smooth,
)
from .simulate import Dataset, solve_equilibrium

MODES = ("analytic", "krylov", "jacobian-free")


class LinearStepError(RuntimeError):
    """The Newton linear step failed on one of its right-hand sides."""


class LogitFallbackWarning(UserWarning):
    """Logit initialization hit (near-)perfect separation; using smoothed frequencies."""


def _as_game(config) -> Game:
    return config if isinstance(config, Game) else Game(config)


# ---------------------------------------------------------------------------
# data sufficient statistics
# ---------------------------------------------------------------------------


@dataclass
class ActionCounts:
    """Per-state observation and per-(firm, state, action) choice counts."""

    state: np.ndarray  # (X,)
    choice: np.ndarray  # (J, X, A)
    n_obs: int

    @classmethod
    def from_dataset(cls, dataset: Dataset, game: Game) -> "ActionCounts":
        if dataset.n_firms != game.n_firms:
            raise ValueError("dataset and game disagree on the number of firms")
        if np.any(dataset.x >= game.n_states):
            raise ValueError("dataset contains out-of-range state indices")
        n_x = np.bincount(dataset.x, minlength=game.n_states).astype(float)
        choice = np.zeros((game.n_firms, game.n_states, N_ACTIONS))
        for j in range(game.n_firms):
            ones = np.bincount(
                dataset.x, weights=dataset.actions[:, j].astype(float),
                minlength=game.n_states,
            )
            choice[j, :, 1] = ones
            choice[j, :, 0] = n_x - ones
        return cls(state=n_x, choice=choice, n_obs=dataset.n_obs)


def loglik_of_values(v: np.ndarray, counts: ActionCounts) -> float:
    """Mean log-likelihood of the observed actions under logit CCPs at values v."""
    m = v.max(axis=2, keepdims=True)
    lse = (m + np.log(np.exp(v - m).sum(axis=2, keepdims=True)))
    return float((counts.choice * (v - lse)).sum() / counts.n_obs)


# ---------------------------------------------------------------------------
# initialization: semiparametric logit CCPs, then one NPL iteration
# ---------------------------------------------------------------------------


def _logit_features(game: Game, x: np.ndarray, j: int) -> np.ndarray:
    """(n, 4) design: intercept, market size, own lag, rivals' lag count."""
    a_prev = game._a_prev[x]
    own = a_prev[:, j]
    rivals = a_prev.sum(axis=1) - own
    return np.column_stack([np.ones(x.size), game._s_val[x], own, rivals])


def ccp_logit_init(dataset: Dataset, config) -> np.ndarray:
    """Initial CCPs from a per-firm binary logit on (1, s, own lag, rivals' lag count).

    Fitted probabilities are produced for every state, visited or not.  On
    (near-)perfect separation the firm falls back to per-state frequencies
    with add-one smoothing and a LogitFallbackWarning is emitted.
    """
    game = _as_game(config)
    J, X = game.n_firms, game.n_states
    p = np.empty((J, X, N_ACTIONS))
    all_states = np.arange(X)
    for j in range(J):
        a_j = dataset.actions[:, j].astype(float)
        feats = _logit_features(game, dataset.x, j)
        state_feats = _logit_features(game, all_states, j)
        fitted = None
        if 0.0 < a_j.mean() < 1.0:

            def loglik(b):
                z = feats @ b
                return float((a_j * z - np.logaddexp(0.0, z)).mean())

            def grad(b):
                z = feats @ b
                return feats.T @ (a_j - expit(z)) / a_j.size

            res = maximize_smooth(loglik, grad, np.zeros(4), tol_grad=1e-8)
            index = state_feats @ res.theta
            if res.converged and np.max(np.abs(index)) < 30.0:
                fitted = expit(index)
        if fitted is None:
            warnings.warn(
                f"firm {j + 1}: logit initialization separated; "
                "falling back to add-one smoothed frequencies",
                LogitFallbackWarning,
            )
            n_x = np.bincount(dataset.x, minlength=X).astype(float)
            ones = np.bincount(dataset.x, weights=a_j, minlength=X)
            fitted = (ones + 1.0) / (n_x + 2.0)
        p[j, :, 1] = fitted
        p[j, :, 0] = 1.0 - fitted
    return p


@dataclass
class NplSystem:
    """Policy-evaluation pieces built from a CCP profile.

    The policy values W solve (I - beta * kernel) @ W = rhs, and the
    implied choice-specific values are affine in theta:
    gamma(theta) = value_coef @ theta + value_offset.
    """

    kernel: np.ndarray  # (X, X) state kernel under the profile
    policy_rhs_coef: np.ndarray  # (J, X, K)
    policy_rhs_offset: np.ndarray  # (J, X)
    policy_coef: np.ndarray  # (J, X, K): W as a linear map of theta
    policy_offset: np.ndarray  # (J, X)
    value_coef: np.ndarray  # (J, X, A, K)
    value_offset: np.ndarray  # (J, X, A)

    def values(self, theta_vec: np.ndarray) -> np.ndarray:
        return self.value_coef @ theta_vec + self.value_offset


def npl_value_map(ccps: np.ndarray, config, clip: float = 1e-9) -> NplSystem:
    """Affine-in-theta choice-specific values of playing the profile `ccps`."""
    game = _as_game(config)
    J, X, K = game.n_firms, game.n_states, game.n_params
    p = np.clip(np.asarray(ccps, dtype=float), clip, 1.0 - clip)
    p = p / p.sum(axis=2, keepdims=True)

    fac = game._factors(p)
    rival_w = game._rival_weights(p)
    feats = game._expected_features_from_probs(p)  # (J, X, K), a=1 features

    w_all = fac[0].copy()
    for l in range(1, J):
        w_all *= fac[l]
    kernel = np.einsum("xs,xp->xsp", game._fs_rows, w_all).reshape(X, X)

    gamma_const = EULER_GAMMA if game.config.include_euler else 0.0
    entropy = -(p * np.log(p)).sum(axis=2)  # (J, X)
    rhs_coef = p[:, :, 1:2] * feats  # (J, X, K)
    rhs_offset = gamma_const + entropy

    lu = scipy.linalg.lu_factor(np.eye(X) - game.beta * kernel)
    value_coef = np.empty((J, X, N_ACTIONS, K))
    value_offset = np.empty((J, X, N_ACTIONS))
    policy_coef = np.empty((J, X, K))
    policy_offset = np.empty((J, X))
    for j in range(J):
        policy_coef[j] = scipy.linalg.lu_solve(lu, rhs_coef[j])
        policy_offset[j] = scipy.linalg.lu_solve(lu, rhs_offset[j])
        for a in (0, 1):
            mask = game._bit_on[j] if a == 1 else ~game._bit_on[j]
            trans = np.einsum(
                "xs,xp->xsp", game._fs_rows, rival_w[j] * mask
            ).reshape(X, X)
            value_coef[j, :, a, :] = game.beta * trans @ policy_coef[j]
            value_offset[j, :, a] = game.beta * trans @ policy_offset[j]
        value_coef[j, :, 1, :] += feats[j]
    return NplSystem(
        kernel=kernel,
        policy_rhs_coef=rhs_coef,
        policy_rhs_offset=rhs_offset,
        policy_coef=policy_coef,
        policy_offset=policy_offset,
        value_coef=value_coef,
        value_offset=value_offset,
    )


def npl_one_step(dataset: Dataset, ccps: np.ndarray, config) -> tuple[Theta, np.ndarray]:
    """One NPL iteration: pseudo-likelihood estimate of theta at the given CCPs,
    and the implied choice-specific values used to initialize EPL."""
    game = _as_game(config)
    system = npl_value_map(ccps, game)
    counts = ActionCounts.from_dataset(dataset, game)

    def objective(theta_vec):
        return loglik_of_values(system.values(theta_vec), counts)

    def gradient(theta_vec):
        v = system.values(theta_vec)
        p = np.exp(v - v.max(axis=2, keepdims=True))
        p /= p.sum(axis=2, keepdims=True)
        score = counts.choice - counts.state[None, :, None] * p
        return np.einsum("jxa,jxak->k", score, system.value_coef) / counts.n_obs

    res = maximize_smooth(objective, gradient, np.zeros(game.n_params))
    if not res.converged:
        raise RuntimeError(
            f"NPL pseudo-likelihood maximization failed (grad norm {res.grad_norm:.2e})"
        )
    theta = Theta.from_array(res.theta)
    return theta, system.values(res.theta)


# ---------------------------------------------------------------------------
# EPL
# ---------------------------------------------------------------------------


@dataclass
class EplOptions:
    mode: str = "analytic"
    tol_theta: float | None = None  # default (1e-2) / n_params
    tol_values: float | None = None
    max_outer: int = 100
    k_fixed: int | None = None
    gmres: GmresOptions = field(default_factory=GmresOptions)
    warm_start: bool = False
    tol_grad: float = 1e-8

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name in ("tol_theta", "tol_values"):
            val = getattr(self, name)
            if val is not None and val <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class NewtonStep:
    """Affine update map for the values: y(theta) = y_base - coef @ theta - offset.

    coef and offset are the Newton solves of the constraint's linear parts,
    i.e. the Jacobian inverse applied to each parameter column and to the
    parameter-free part.
    """

    y_base: np.ndarray
    coef: np.ndarray  # (|Y|, K)
    offset: np.ndarray  # (|Y|,)

    def values(self, theta_vec: np.ndarray) -> np.ndarray:
        return self.y_base - self.coef @ theta_vec - self.offset


def upsilon(theta_vec: np.ndarray, y_prev: np.ndarray, coef: np.ndarray,
            offset: np.ndarray) -> np.ndarray:
    """Newton-updated values at theta, in the affine form of the EPL iteration."""
    return y_prev - coef @ np.asarray(theta_vec, dtype=float) - offset


def epl_linear_step(game: Game, theta_prev: Theta, y_prev: np.ndarray, mode: str,
                    gmres_opts: GmresOptions | None = None,
                    warm_start: dict | None = None) -> NewtonStep:
    """Solve the constraint Jacobian against the linear parts of the constraint.

    analytic: assemble the sparse analytic Jacobian, one dense LU solve for
    all columns.  krylov: same Jacobian, GMRES per column with exact
    matrix-vector products.  jacobian-free: GMRES per column where every
    matrix-vector product is a central-difference JVP of the constraint;
    the Jacobian is never formed.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if gmres_opts is None:
        gmres_opts = GmresOptions()
    y_prev = np.asarray(y_prev, dtype=float)
    ld = game.linear_parts(y_prev)
    rhs = np.column_stack([ld.coef, ld.offset])
    labels = [f"h_{i + 1}" for i in range(game.n_params)] + ["z"]

    if mode == "analytic":
        jac = game.constraint_jacobian(theta_prev, y_prev).toarray()
        solved = direct_solve(jac, rhs)
    else:
        if mode == "krylov":
            jac = game.constraint_jacobian(theta_prev, y_prev)
            op = LinearOperator(dim=game.n_values, apply=jac.dot)
        else:
            def op_apply(d, _y=y_prev, _t=theta_prev):
                return fd_jvp(lambda yy: game.constraint(_t, yy), _y, d)

            op = LinearOperator(dim=game.n_values, apply=op_apply)
        solved = np.empty_like(rhs)
        for i, label in enumerate(labels):
            col_opts = GmresOptions(
                tol_rel=gmres_opts.tol_rel,
                max_iter=gmres_opts.max_iter,
                restart=gmres_opts.restart,
                d0=None if warm_start is None else warm_start.get(label),
            )
            res = gmres(op, rhs[:, i], col_opts)
            if not res.converged:
                raise LinearStepError(
                    f"GMRES failed on column {label}: residual {res.residual_norm:.3e} "
                    f"after {res.iterations} iterations"
                )
            solved[:, i] = res.d
            if warm_start is not None:
                warm_start[label] = res.d.copy()
    return NewtonStep(y_base=y_prev, coef=solved[:, :-1], offset=solved[:, -1])


def pseudo_loglik(theta_vec: np.ndarray, step: NewtonStep, counts: ActionCounts,
                  game: Game) -> tuple[float, np.ndarray]:
    """Mean log-likelihood at the Newton-updated values, with its analytic gradient."""
    theta_vec = np.asarray(theta_vec, dtype=float)
    v = game.unflatten(step.values(theta_vec))
    m = v.max(axis=2, keepdims=True)
    e = np.exp(v - m)
    denom = e.sum(axis=2, keepdims=True)
    lse = m + np.log(denom)
    q = float((counts.choice * (v - lse)).sum() / counts.n_obs)
    p = e / denom
    score_v = (counts.choice - counts.state[None, :, None] * p).reshape(-1) / counts.n_obs
    grad = -step.coef.T @ score_v
    return q, grad


@dataclass
class EstimateResult:
    method: str
    theta: Theta
    values: np.ndarray
    iterations: int
    converged: bool
    loglik: float
    timings: dict
    theta_trace: list
    diagnostics: str = ""

    def theta_array(self) -> np.ndarray:
        return self.theta.as_array()


def epl_estimate(dataset: Dataset, init: tuple[Theta, np.ndarray], config,
                 opts: EplOptions | None = None) -> EstimateResult:
    """Run the EPL iteration from a consistent initial (theta, values) pair.

    Each iteration solves the Newton linear step, maximizes the
    pseudo-likelihood over theta along the resulting affine value map, and
    updates the values; it stops when both the theta and value updates fall
    below their tolerances, or after exactly k_fixed iterations.
    """
    if opts is None:
        opts = EplOptions()
    game = _as_game(config)
    t_start = time.perf_counter()
    theta0, v0 = init
    counts = ActionCounts.from_dataset(dataset, game)
    tol_theta = opts.tol_theta if opts.tol_theta is not None else 1e-2 / game.n_params
    tol_values = opts.tol_values if opts.tol_values is not None else 1e-2 / game.n_params

    theta_vec = theta0.as_array()
    y = game.flatten(np.asarray(v0, dtype=float)) if np.asarray(v0).ndim == 3 else np.array(v0, dtype=float)
    trace = [theta_vec.copy()]
    timings = {"init": time.perf_counter() - t_start, "linear": 0.0, "theta": 0.0}
    warm: dict | None = {} if opts.warm_start else None
    method = {"analytic": "epl-anal", "krylov": "epl-krylov", "jacobian-free": "epl-jf"}[opts.mode]

    limit = opts.k_fixed if opts.k_fixed is not None else opts.max_outer
    converged = False
    iterations = 0
    diagnostics = ""
    for k in range(1, limit + 1):
        t0 = time.perf_counter()
        try:
            step = epl_linear_step(game, Theta.from_array(theta_vec), y, opts.mode,
                                   opts.gmres, warm)
        except LinearStepError as exc:
            diagnostics = str(exc)
            iterations = k - 1
            break
        timings["linear"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        res = maximize_smooth(
            lambda t: pseudo_loglik(t, step, counts, game)[0],
            lambda t: pseudo_loglik(t, step, counts, game)[1],
            theta_vec,
            tol_grad=opts.tol_grad,
        )
        timings["theta"] += time.perf_counter() - t0
        if not res.converged:
            diagnostics = f"theta step failed at iteration {k} (grad norm {res.grad_norm:.2e})"
            iterations = k - 1
            break

        theta_new = res.theta
        y_new = step.values(theta_new)
        d_theta = float(np.max(np.abs(theta_new - theta_vec)))
        d_values = float(np.max(np.abs(y_new - y)))
        theta_vec, y = theta_new, y_new
        trace.append(theta_vec.copy())
        iterations = k
        if opts.k_fixed is not None:
            if k == opts.k_fixed:
                converged = True
                break
        elif d_theta <= tol_theta and d_values <= tol_values:
            converged = True
            break

    v_hat = game.unflatten(y)
    timings["total"] = time.perf_counter() - t_start
    return EstimateResult(
        method=method,
        theta=Theta.from_array(theta_vec),
        values=v_hat,
        iterations=iterations,
        converged=converged,
        loglik=loglik_of_values(v_hat, counts),
        timings=timings,
        theta_trace=trace,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# NFXP baseline (Jacobian-free: numerical outer gradient)
# ---------------------------------------------------------------------------


def nfxp_estimate(dataset: Dataset, theta0: Theta, config,
                  outer_tol: float = 1e-6, inner_tol: float = 1e-12,
                  warm_start: bool = False, max_outer: int = 500) -> EstimateResult:
    """Maximize the likelihood with the equilibrium fully solved at every trial theta.

    The inner loop runs the accelerated fixed-point iteration to inner_tol
    from a single initial value (zeros; optionally the previous solution
    when warm_start is set).  The outer gradient uses per-coordinate
    central differences, i.e. 2K equilibrium solves per gradient.
    """
    game = _as_game(config)
    t_start = time.perf_counter()
    counts = ActionCounts.from_dataset(dataset, game)
    state = {"v": None, "inner_time": 0.0}

    def solve_at(theta_vec: np.ndarray) -> np.ndarray:
        t0 = time.perf_counter()
        v0 = state["v"] if (warm_start and state["v"] is not None) else None
        v = solve_equilibrium(game, Theta.from_array(theta_vec), v0=v0, tol=inner_tol)
        if warm_start:
            state["v"] = v
        state["inner_time"] += time.perf_counter() - t0
        return v

    def objective(theta_vec: np.ndarray) -> float:
        return loglik_of_values(solve_at(theta_vec), counts)

    grad = central_diff_grad(objective)
    res = maximize_smooth(objective, grad, theta0.as_array(), tol_grad=outer_tol,
                          max_iter=max_outer)
    v_hat = solve_at(res.theta)
    total = time.perf_counter() - t_start
    timings = {
        "init": 0.0,
        "linear": state["inner_time"],
        "theta": total - state["inner_time"],
        "total": total,
    }
    return EstimateResult(
        method="nfxp-jf",
        theta=Theta.from_array(res.theta),
        values=v_hat,
        iterations=res.iterations,
        converged=res.converged,
        loglik=loglik_of_values(v_hat, counts),
        timings=timings,
        theta_trace=[theta0.as_array(), res.theta.copy()],
    )


# ---------------------------------------------------------------------------
# result record serialization
# ---------------------------------------------------------------------------


def format_result_record(result: EstimateResult) -> str:
    lines = [
        f"method = {result.method}",
        f"converged = {int(result.converged)}",
        f"iterations = {result.iterations}",
        f"time_total_sec = {result.timings.get('total', 0.0):.6f}",
        f"time_linear_sec = {result.timings.get('linear', 0.0):.6f}",
        f"time_theta_sec = {result.timings.get('theta', 0.0):.6f}",
        f"loglik = {result.loglik!r}",
    ]
    for i, val in enumerate(result.theta.as_array()):
        lines.append(f"theta_{i + 1} = {float(val)!r}")
    return "\n".join(lines) + "\n"


def write_result_record(result: EstimateResult, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_result_record(result))

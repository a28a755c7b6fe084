"""Monte Carlo replication runner, summary tables, and the linear-solve
error-bound diagnostic.

Replication seeds are base_seed + replication index, so every method sees
the same data within a replication and cross-method parameter differences
are meaningful.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .estimators import (
    ActionCounts,
    EplOptions,
    EstimateResult,
    ccp_logit_init,
    epl_estimate,
    nfxp_estimate,
    npl_one_step,
)
from .game import Game, GameConfig, Theta, default_theta
from .numerics import GmresOptions, LinearOperator, direct_solve, fd_jvp, gmres
from .simulate import simulate_dataset

KNOWN_METHODS = ("epl-anal", "epl-krylov", "epl-jf", "nfxp-jf")
_EPL_MODE = {"epl-anal": "analytic", "epl-krylov": "krylov", "epl-jf": "jacobian-free"}
DIFF_FLOOR = -15.0


@dataclass
class MonteCarloConfig:
    replications: int = 20
    base_seed: int = 20240501
    game: GameConfig = field(default_factory=GameConfig)
    theta_true: Theta = field(default_factory=default_theta)
    n_obs: int = 1600
    methods: tuple = ("epl-anal", "epl-jf")
    k_list: tuple = (None,)  # None means iterate to convergence

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if not self.methods:
            raise ValueError("at least one method is required")
        for m in self.methods:
            if m not in KNOWN_METHODS:
                raise ValueError(f"unknown method {m!r}; choose from {KNOWN_METHODS}")
        if self.theta_true.n_firms != self.game.n_firms:
            raise ValueError("theta_true and game disagree on the number of firms")


@dataclass
class ReplicationRecord:
    rep: int
    method: str
    k: int | None
    converged: bool
    iterations: int
    time_total_sec: float
    loglik: float
    theta: np.ndarray


def _record_from_result(rep: int, k: int | None, result: EstimateResult) -> ReplicationRecord:
    return ReplicationRecord(
        rep=rep,
        method=result.method,
        k=k,
        converged=result.converged,
        iterations=result.iterations,
        time_total_sec=result.timings.get("total", float("nan")),
        loglik=result.loglik,
        theta=result.theta_array(),
    )


def run_replication(cfg: MonteCarloConfig, rep: int) -> list[ReplicationRecord]:
    """Simulate one dataset and run every requested method/k from a shared init."""
    game = Game(cfg.game)
    seed = cfg.base_seed + rep
    records: list[ReplicationRecord] = []
    dataset = simulate_dataset(game, cfg.theta_true, cfg.n_obs, seed)
    ccps = ccp_logit_init(dataset, game)
    theta0, v0 = npl_one_step(dataset, ccps, game)
    n_params = game.n_params
    for method in cfg.methods:
        if method == "nfxp-jf":
            k_values: tuple = (None,)
        else:
            k_values = cfg.k_list
        for k in k_values:
            try:
                if method == "nfxp-jf":
                    result = nfxp_estimate(dataset, theta0, game)
                else:
                    opts = EplOptions(mode=_EPL_MODE[method], k_fixed=k)
                    result = epl_estimate(dataset, (theta0, v0), game, opts)
                records.append(_record_from_result(rep, k, result))
            except Exception:  # noqa: BLE001 - a failed cell must not sink the run
                records.append(ReplicationRecord(
                    rep=rep, method=method, k=k, converged=False, iterations=0,
                    time_total_sec=float("nan"), loglik=float("nan"),
                    theta=np.full(n_params, np.nan),
                ))
    return records


def _sort_key(rec: ReplicationRecord):
    k_ord = math.inf if rec.k is None else rec.k
    return (rec.rep, KNOWN_METHODS.index(rec.method), k_ord)


def run_monte_carlo(cfg: MonteCarloConfig, out_dir=None, threads: int = 1,
                    progress=None) -> list[ReplicationRecord]:
    """Run all replications (optionally on a process pool) and write records.csv."""
    reps = list(range(cfg.replications))
    records: list[ReplicationRecord] = []
    if threads <= 1:
        for rep in reps:
            records.extend(run_replication(cfg, rep))
            if progress is not None:
                progress(rep)
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for rep, chunk in zip(reps, pool.map(run_replication, [cfg] * len(reps), reps)):
                records.extend(chunk)
                if progress is not None:
                    progress(rep)
    records.sort(key=_sort_key)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_records(records, os.path.join(out_dir, "records.csv"))
    return records


def _k_str(k: int | None) -> str:
    return "inf" if k is None else str(k)


def _k_parse(text: str) -> int | None:
    return None if text == "inf" else int(text)


def write_records(records: list[ReplicationRecord], path) -> None:
    n_params = records[0].theta.size if records else 0
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["rep", "method", "k", "converged", "iterations", "time_total_sec", "loglik"]
            + [f"theta_{i + 1}" for i in range(n_params)]
        )
        for rec in records:
            writer.writerow(
                [rec.rep, rec.method, _k_str(rec.k), int(rec.converged), rec.iterations,
                 repr(float(rec.time_total_sec)), repr(float(rec.loglik))]
                + [repr(float(t)) for t in rec.theta]
            )


def read_records(path) -> list[ReplicationRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            theta = [float(v) for k, v in row.items() if k.startswith("theta_")]
            records.append(ReplicationRecord(
                rep=int(row["rep"]),
                method=row["method"],
                k=_k_parse(row["k"]),
                converged=bool(int(row["converged"])),
                iterations=int(row["iterations"]),
                time_total_sec=float(row["time_total_sec"]),
                loglik=float(row["loglik"]),
                theta=np.array(theta),
            ))
    return records


# ---------------------------------------------------------------------------
# summaries
# ---------------------------------------------------------------------------

_STATS = (
    "diff_mean", "diff_max",
    "iter_median", "iter_max", "nonconv_pct",
    "time_total", "time_mean", "time_median", "time_med_per_iter",
)


@dataclass
class SummaryRow:
    method: str
    k: int | None
    stats: dict


def log10_theta_diff(theta_a: np.ndarray, theta_b: np.ndarray) -> float:
    """log10 of the max-norm parameter difference, floored at -15 for exact ties."""
    gap = float(np.max(np.abs(theta_a - theta_b)))
    return max(math.log10(gap), DIFF_FLOOR) if gap > 0 else DIFF_FLOOR


def summarize(records: list[ReplicationRecord], baseline: str = "epl-anal") -> list[SummaryRow]:
    """Per method/k summary: parameter agreement with the baseline, iteration
    profile, and timing statistics.

    diff columns compare against the baseline method at the same k (the
    baseline for an nfxp-jf row, or any row when the baseline is nfxp-jf,
    is the baseline's k=inf run).  time_med_per_iter divides the median
    time by k; runs to convergence use each replication's realized
    iteration count.
    """
    cells: dict[tuple, list[ReplicationRecord]] = {}
    for rec in records:
        cells.setdefault((rec.method, rec.k), []).append(rec)
    methods_present = {m for m, _ in cells}
    need_diff = any(m != baseline for m in methods_present)
    if need_diff and baseline not in methods_present:
        raise ValueError(
            f"baseline method {baseline!r} has no records; cannot compute parameter differences"
        )

    def baseline_for(method: str, k: int | None) -> dict[int, ReplicationRecord]:
        use_k = k if (method != "nfxp-jf" and baseline != "nfxp-jf") else None
        key = (baseline, use_k)
        if key not in cells and (baseline, None) in cells:
            key = (baseline, None)
        return {r.rep: r for r in cells.get(key, [])}

    rows = []
    for (method, k), recs in sorted(cells.items(), key=lambda mk: (
            KNOWN_METHODS.index(mk[0][0]), math.inf if mk[0][1] is None else mk[0][1])):
        stats: dict = {}
        ok = [r for r in recs if r.converged and np.all(np.isfinite(r.theta))]
        if method != baseline:
            base = baseline_for(method, k)
            diffs = [
                log10_theta_diff(r.theta, base[r.rep].theta)
                for r in ok
                if r.rep in base and base[r.rep].converged
            ]
            stats["diff_mean"] = float(np.mean(diffs)) if diffs else float("nan")
            stats["diff_max"] = float(np.max(diffs)) if diffs else float("nan")
        else:
            stats["diff_mean"] = float("nan")
            stats["diff_max"] = float("nan")
        iters = np.array([r.iterations for r in ok], dtype=float)
        stats["iter_median"] = float(np.median(iters)) if iters.size else float("nan")
        stats["iter_max"] = float(np.max(iters)) if iters.size else float("nan")
        stats["nonconv_pct"] = 100.0 * sum(1 for r in recs if not r.converged) / len(recs)
        times = np.array([r.time_total_sec for r in ok], dtype=float)
        stats["time_total"] = float(np.sum(times)) if times.size else float("nan")
        stats["time_mean"] = float(np.mean(times)) if times.size else float("nan")
        stats["time_median"] = float(np.median(times)) if times.size else float("nan")
        if times.size:
            if k is not None:
                stats["time_med_per_iter"] = float(np.median(times)) / k
            else:
                per_iter = times / np.maximum(iters, 1.0)
                stats["time_med_per_iter"] = float(np.median(per_iter))
        else:
            stats["time_med_per_iter"] = float("nan")
        rows.append(SummaryRow(method=method, k=k, stats=stats))
    return rows


def _fmt_stat(name: str, value: float) -> str:
    if math.isnan(value):
        return "-"
    if name.startswith("diff") and value <= DIFF_FLOOR:
        return "< -15"
    if name in ("iter_median", "iter_max"):
        return f"{value:.0f}" if float(value).is_integer() else f"{value:.1f}"
    if name == "nonconv_pct":
        return f"{value:.0f}%"
    return f"{value:.3f}"


def format_summary(rows: list[SummaryRow]) -> str:
    headers = ["method", "k"] + list(_STATS)
    table = [headers]
    for row in rows:
        table.append([row.method, _k_str(row.k)]
                     + [_fmt_stat(s, row.stats[s]) for s in _STATS])
    widths = [max(len(r[i]) for r in table) for i in range(len(headers))]
    lines = []
    for irow, r in enumerate(table):
        lines.append("  ".join(cell.rjust(w) for cell, w in zip(r, widths)))
        if irow == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def write_summary(rows: list[SummaryRow], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["method", "k", "stat", "value"])
        for row in rows:
            for stat in _STATS:
                writer.writerow([row.method, _k_str(row.k), stat,
                                 repr(float(row.stats[stat]))])


# ---------------------------------------------------------------------------
# Appendix-style forward error bound for the Jacobian-free linear solve
# ---------------------------------------------------------------------------


@dataclass
class ErrorBoundReport:
    """Forward-error check of the Jacobian-free solves against the direct ones.

    For each right-hand side b: actual = ||d_jf - d_direct|| / ||d_direct||
    must be bounded by cond * (eps_jvp + eps_gmres_abs) / ||b||, where
    eps_jvp bounds the JVP error over probe directions (including the
    JF solution itself) and eps_gmres_abs is the achieved GMRES residual
    (at least tol_rel * ||b||).  All norms are 2-norms.
    """

    cond: float
    eps_jvp: float
    eps_gmres: float  # relative GMRES tolerance used
    labels: list
    b_norms: np.ndarray
    achieved_residuals: np.ndarray
    actual_rel_err: np.ndarray
    bound: np.ndarray
    holds: np.ndarray

    def all_hold(self) -> bool:
        return bool(np.all(self.holds))


MAX_DENSE_DIM = 4096


def error_bound_report(config, theta: Theta, v: np.ndarray,
                       b_choice: int | None = None,
                       gmres_tol: float = 1e-5,
                       n_probes: int = 8, seed: int = 0) -> ErrorBoundReport:
    """Compare direct and Jacobian-free solves column by column.

    b_choice selects a single column (0..K-1 the parameter columns, K the
    parameter-free part); None checks all K+1.  Requires forming the dense
    Jacobian, so the instance must satisfy |Y| <= 4096.
    """
    game = config if isinstance(config, Game) else Game(config)
    if game.n_values > MAX_DENSE_DIM:
        raise ValueError(
            f"|Y| = {game.n_values} exceeds {MAX_DENSE_DIM}; "
            "use a smaller game for the dense diagnostic"
        )
    v = np.asarray(v, dtype=float)
    y = game.flatten(v) if v.ndim == 3 else v
    jac = game.constraint_jacobian(theta, y).toarray()
    cond = float(np.linalg.cond(jac))
    ld = game.linear_parts(y)
    cols = np.column_stack([ld.coef, ld.offset])
    all_labels = [f"h_{i + 1}" for i in range(game.n_params)] + ["z"]
    idx = range(cols.shape[1]) if b_choice is None else [int(b_choice)]

    def jvp_fd(d):
        return fd_jvp(lambda yy: game.constraint(theta, yy), y, d)

    rng = np.random.default_rng(seed)
    probes = [rng.standard_normal(game.n_values) for _ in range(n_probes)]
    probes = [d / np.linalg.norm(d) for d in probes]
    eps_jvp = max(float(np.linalg.norm(jvp_fd(d) - jac @ d)) for d in probes)

    labels, b_norms, achieved, actual = [], [], [], []
    op = LinearOperator(dim=game.n_values, apply=jvp_fd)
    for i in idx:
        b = cols[:, i]
        b_norm = float(np.linalg.norm(b))
        d_star = direct_solve(jac, b)
        res = gmres(op, b, GmresOptions(tol_rel=gmres_tol))
        d_tilde = res.d
        # premises of the bound, measured: JVP error at the solution itself,
        # and the residual at which GMRES actually stopped
        g_at_sol = jvp_fd(d_tilde)
        eps_jvp = max(eps_jvp, float(np.linalg.norm(g_at_sol - jac @ d_tilde)))
        fd_resid = float(np.linalg.norm(g_at_sol - b))
        rel_err = float(np.linalg.norm(d_tilde - d_star) / np.linalg.norm(d_star))
        labels.append(all_labels[i])
        b_norms.append(b_norm)
        achieved.append(fd_resid)
        actual.append(rel_err)
    b_norms_arr = np.array(b_norms)
    eps_g = np.maximum(gmres_tol * b_norms_arr, np.array(achieved))
    actual = np.array(actual)
    bound = cond * (eps_jvp + eps_g) / b_norms_arr
    return ErrorBoundReport(
        cond=cond,
        eps_jvp=eps_jvp,
        eps_gmres=gmres_tol,
        labels=labels,
        b_norms=b_norms_arr,
        achieved_residuals=np.array(achieved),
        actual_rel_err=actual,
        bound=bound,
        holds=actual <= bound,
    )


def format_error_bound(report: ErrorBoundReport) -> str:
    lines = [
        f"cond(grad G) = {report.cond:.6e}   eps_jvp = {report.eps_jvp:.3e}   "
        f"eps_gmres(rel) = {report.eps_gmres:.1e}",
        f"{'column':>8}  {'||b||':>12}  {'residual':>12}  {'actual':>12}  "
        f"{'bound':>12}  holds",
    ]
    for i, label in enumerate(report.labels):
        lines.append(
            f"{label:>8}  {report.b_norms[i]:12.4e}  {report.achieved_residuals[i]:12.4e}  "
            f"{report.actual_rel_err[i]:12.4e}  {report.bound[i]:12.4e}  "
            f"{'yes' if report.holds[i] else 'NO'}"
        )
    return "\n".join(lines)

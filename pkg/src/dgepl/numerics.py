"""Generic numerical kernels used by the estimators.

Operator-based GMRES (Arnoldi with modified Gram-Schmidt and Givens
rotations), dense direct solve, central-difference Jacobian-vector
products with a cube-root-of-machine-epsilon step rule, fixed-point
iteration with Anderson acceleration, and a quasi-Newton maximizer.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.optimize

MACHINE_EPS = float(np.finfo(np.float64).eps)
CBRT_EPS = float(np.cbrt(MACHINE_EPS))  # 6.0554544523933395e-06


class SingularMatrixError(ValueError):
    """Coefficient matrix is singular to working precision."""


@dataclass
class LinearOperator:
    """Matrix-free linear map: dim and a callable computing A @ x."""

    dim: int
    apply: Callable[[np.ndarray], np.ndarray]

    @classmethod
    def from_matrix(cls, a) -> "LinearOperator":
        if a.shape[0] != a.shape[1]:
            raise ValueError("operator matrix must be square")
        return cls(dim=a.shape[0], apply=lambda x: a @ x)


@dataclass
class GmresOptions:
    tol_rel: float = 1e-5
    max_iter: int | None = None  # default min(dim, 200)
    restart: int | None = None  # None: full (unrestarted) GMRES
    d0: np.ndarray | None = None

    def __post_init__(self):
        if self.tol_rel <= 0:
            raise ValueError("tol_rel must be positive")
        if self.max_iter is not None and self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass
class GmresResult:
    d: np.ndarray
    residual_norm: float
    iterations: int
    converged: bool


def gmres(op: LinearOperator, b: np.ndarray, opts: GmresOptions | None = None) -> GmresResult:
    """Minimize ||A d - b||2 over the Krylov subspace; stop at a relative residual.

    Convergence means ||A d - b||2 <= tol_rel * ||b||2.  A zero right-hand
    side returns d = 0 immediately.  Happy breakdown (an exactly dependent
    Arnoldi vector) exits with the subspace-exact solution.
    """
    if opts is None:
        opts = GmresOptions()
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side must be finite")
    m = b.size
    if op.dim != m:
        raise ValueError(f"operator dim {op.dim} != rhs length {m}")
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return GmresResult(d=np.zeros(m), residual_norm=0.0, iterations=0, converged=True)

    max_iter = opts.max_iter if opts.max_iter is not None else min(m, 200)
    cycle = opts.restart if opts.restart is not None else max_iter
    tol_abs = opts.tol_rel * b_norm
    x = np.zeros(m) if opts.d0 is None else np.array(opts.d0, dtype=float)
    if x.size != m:
        raise ValueError("initial guess has wrong length")

    total_iters = 0
    if np.any(x != 0.0):
        r = b - op.apply(x)
    else:
        r = b.copy()
    res_norm = float(np.linalg.norm(r))

    while total_iters < max_iter and res_norm > tol_abs:
        n_inner = min(cycle, max_iter - total_iters)
        beta = res_norm
        v_basis = [r / beta]
        h_cols: list[np.ndarray] = []
        cs: list[float] = []
        sn: list[float] = []
        g = [beta]
        k_used = 0
        for k in range(n_inner):
            w = np.asarray(op.apply(v_basis[k]), dtype=float)
            if w.size != m:
                raise ValueError("operator returned a vector of wrong length")
            h = np.zeros(k + 2)
            for i in range(k + 1):
                h[i] = v_basis[i] @ w
                w = w - h[i] * v_basis[i]
            h[k + 1] = np.linalg.norm(w)
            breakdown = h[k + 1] <= 1e-14 * max(1.0, abs(h[: k + 1]).max())
            if not breakdown:
                v_basis.append(w / h[k + 1])
            # previously accumulated rotations, then a new one to keep H triangular
            for i in range(k):
                t = cs[i] * h[i] + sn[i] * h[i + 1]
                h[i + 1] = -sn[i] * h[i] + cs[i] * h[i + 1]
                h[i] = t
            denom = np.hypot(h[k], h[k + 1])
            c, s = (1.0, 0.0) if denom == 0.0 else (h[k] / denom, h[k + 1] / denom)
            cs.append(c)
            sn.append(s)
            h[k] = c * h[k] + s * h[k + 1]
            h[k + 1] = 0.0
            h_cols.append(h[: k + 1].copy())
            g.append(-s * g[k])
            g[k] = c * g[k]
            total_iters += 1
            k_used = k + 1
            res_norm = abs(g[k + 1])
            if res_norm <= tol_abs or breakdown or total_iters >= max_iter:
                break
        if k_used > 0:
            r_mat = np.zeros((k_used, k_used))
            for j, col in enumerate(h_cols):
                r_mat[: j + 1, j] = col
            y = scipy.linalg.solve_triangular(r_mat, np.asarray(g[:k_used]))
            x = x + np.column_stack(v_basis[:k_used]) @ y
        r = b - op.apply(x)
        res_norm = float(np.linalg.norm(r))
        if res_norm <= tol_abs:
            break

    return GmresResult(
        d=x,
        residual_norm=res_norm,
        iterations=total_iters,
        converged=res_norm <= tol_abs,
    )


def direct_solve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve A X = B by LU with partial pivoting; reject singular systems."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("matrix must be square")
    if b.shape[0] != a.shape[0]:
        raise ValueError("right-hand side rows must match the matrix")
    lu, piv = scipy.linalg.lu_factor(a, check_finite=True)
    diag = np.abs(np.diag(lu))
    max_pivot = diag.max() if diag.size else 0.0
    min_pivot = diag.min() if diag.size else 0.0
    if max_pivot == 0.0 or min_pivot <= a.shape[0] * MACHINE_EPS * max_pivot:
        raise SingularMatrixError(
            f"matrix singular to working precision: min |pivot| {min_pivot:.3e}, "
            f"max |pivot| {max_pivot:.3e}"
        )
    return scipy.linalg.lu_solve((lu, piv), b)


def epsilon_rule(y: np.ndarray) -> float:
    """Central-difference step: cbrt(machine eps) / max(||y||_inf, 1e-8)."""
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("epsilon_rule requires a finite vector")
    scale = max(float(np.max(np.abs(y))) if y.size else 0.0, 1e-8)
    return CBRT_EPS / scale


def fd_jvp(g: Callable[[np.ndarray], np.ndarray], y: np.ndarray, d: np.ndarray,
           eps: float | None = None) -> np.ndarray:
    """Central-difference Jacobian-vector product (grad g at y) @ d.

    Two evaluations of g per call; the step follows epsilon_rule(y).
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    if eps is None:
        eps = epsilon_rule(y)
    g_plus = np.asarray(g(y + eps * d), dtype=float)
    if not np.all(np.isfinite(g_plus)):
        raise ValueError("fd_jvp: evaluation at the + side returned non-finite values")
    g_minus = np.asarray(g(y - eps * d), dtype=float)
    if not np.all(np.isfinite(g_minus)):
        raise ValueError("fd_jvp: evaluation at the - side returned non-finite values")
    return (g_plus - g_minus) / (2.0 * eps)


@dataclass
class AndersonOptions:
    memory: int = 5  # 0 reproduces plain fixed-point iteration
    damping: float = 1.0
    max_iter: int = 1000
    tol: float = 1e-10

    def __post_init__(self):
        if self.memory < 0:
            raise ValueError("memory must be >= 0")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must lie in (0, 1]")


@dataclass
class FixedPointResult:
    y: np.ndarray
    iterations: int
    converged: bool
    residual_norm: float


def fixed_point_solve(map_fn: Callable[[np.ndarray], np.ndarray], y0: np.ndarray,
                      opts: AndersonOptions | None = None) -> FixedPointResult:
    """Solve y = map(y) by damped iteration with type-II Anderson mixing.

    Mixing weights come from a least-squares fit over the last `memory`
    residual differences; an ill-conditioned or non-finite mixing step falls
    back to the plain damped update.  Convergence is measured in the max
    norm of map(y) - y.
    """
    if opts is None:
        opts = AndersonOptions()
    y = np.array(y0, dtype=float)
    prev_y: list[np.ndarray] = []
    prev_g: list[np.ndarray] = []
    prev_r: list[np.ndarray] = []
    res_norm = np.inf
    for k in range(opts.max_iter + 1):
        gy = np.asarray(map_fn(y), dtype=float)
        if gy.shape != y.shape:
            raise ValueError("map output must match the iterate's shape")
        r = gy - y
        res_norm = float(np.max(np.abs(r))) if r.size else 0.0
        if res_norm <= opts.tol:
            return FixedPointResult(y=y, iterations=k, converged=True, residual_norm=res_norm)
        if k == opts.max_iter:
            break
        y_next = None
        if opts.memory > 0 and prev_r:
            n_hist = min(opts.memory, len(prev_r))
            dr = np.column_stack([r - prev_r[-i] for i in range(n_hist, 0, -1)])
            # columns are r_k - r_{k-i}; equivalent span to consecutive differences
            dy = np.column_stack([y - prev_y[-i] for i in range(n_hist, 0, -1)])
            try:
                gamma, *_ = np.linalg.lstsq(dr, r, rcond=1e-12)
                cand = y + opts.damping * r - (dy + opts.damping * dr) @ gamma
                if np.all(np.isfinite(cand)):
                    y_next = cand
            except np.linalg.LinAlgError:
                y_next = None
        if y_next is None:
            y_next = y + opts.damping * r
        if opts.memory > 0:
            prev_y.append(y.copy())
            prev_g.append(gy)
            prev_r.append(r)
            if len(prev_r) > opts.memory:
                prev_y.pop(0)
                prev_g.pop(0)
                prev_r.pop(0)
        y = y_next
    return FixedPointResult(y=y, iterations=opts.max_iter, converged=False, residual_norm=res_norm)


@dataclass
class MaximizeResult:
    theta: np.ndarray
    value: float
    converged: bool
    iterations: int
    grad_norm: float


def maximize_smooth(f: Callable[[np.ndarray], float],
                    grad: Callable[[np.ndarray], np.ndarray],
                    theta0: np.ndarray,
                    tol_grad: float = 1e-8,
                    max_iter: int | None = None) -> MaximizeResult:
    """Quasi-Newton (BFGS) ascent of a smooth objective.

    Stops when the max-norm of the gradient falls below tol_grad; a failed
    line search returns the best iterate with converged=False.
    """
    theta0 = np.asarray(theta0, dtype=float)
    options = {"gtol": tol_grad, "norm": np.inf}
    if max_iter is not None:
        options["maxiter"] = max_iter
    res = scipy.optimize.minimize(
        lambda t: -f(t),
        theta0,
        jac=lambda t: np.asarray(-grad(t), dtype=float),
        method="BFGS",
        options=options,
    )
    g_norm = float(np.max(np.abs(res.jac))) if res.jac is not None else np.inf
    return MaximizeResult(
        theta=np.asarray(res.x, dtype=float),
        value=float(-res.fun),
        converged=bool(res.success) or g_norm <= tol_grad,
        iterations=int(res.nit),
        grad_norm=g_norm,
    )


def central_diff_grad(f: Callable[[np.ndarray], float],
                      rel_step: float = CBRT_EPS) -> Callable[[np.ndarray], np.ndarray]:
    """Gradient of a scalar function by per-coordinate central differences."""

    def grad(theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        out = np.empty_like(theta)
        for i in range(theta.size):
            h = rel_step * max(1.0, abs(theta[i]))
            up = theta.copy()
            dn = theta.copy()
            up[i] += h
            dn[i] -= h
            out[i] = (f(up) - f(dn)) / (2.0 * h)
        return out

    return grad

"""Stationary dynamic entry/exit game with type-I extreme value shocks.

Encodes the state space, flow utilities, choice probabilities, the
fixed-point map over choice-specific values, the equilibrium constraint
(values minus the fixed-point map), its decomposition into a part linear in
the structural parameters, and the analytic sparse Jacobian of the
constraint with respect to the values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

EULER_GAMMA = 0.5772156649015329

N_ACTIONS = 2  # stay out / be active


def default_size_transition(n_sizes: int) -> np.ndarray:
    """Persistent market-size chain: 0.8 stay, 0.1 to each neighbor, reflected at the edges."""
    f = np.zeros((n_sizes, n_sizes))
    if n_sizes == 1:
        f[0, 0] = 1.0
        return f
    for s in range(n_sizes):
        f[s, s] = 0.8
        if s > 0:
            f[s, s - 1] = 0.1
        else:
            f[s, s] += 0.1
        if s < n_sizes - 1:
            f[s, s + 1] = 0.1
        else:
            f[s, s] += 0.1
    return f


@dataclass
class GameConfig:
    """Primitives of the game that are held fixed during estimation.

    size_transition rows are conditional distributions of next market size;
    include_euler adds Euler's constant to the surplus function (the mean of
    a standard type-I extreme value shock).
    """

    n_firms: int = 5
    n_sizes: int = 5
    beta: float = 0.95
    size_transition: np.ndarray | None = None
    include_euler: bool = True

    def __post_init__(self):
        if self.n_firms < 1:
            raise ValueError("n_firms must be >= 1")
        if self.n_sizes < 1:
            raise ValueError("n_sizes must be >= 1")
        if not (0.0 <= self.beta < 1.0):
            raise ValueError("discount factor must lie in [0, 1)")
        if self.size_transition is None:
            self.size_transition = default_size_transition(self.n_sizes)
        self.size_transition = np.asarray(self.size_transition, dtype=float)
        if self.size_transition.shape != (self.n_sizes, self.n_sizes):
            raise ValueError("size_transition must be n_sizes x n_sizes")
        if np.any(self.size_transition < 0):
            raise ValueError("size_transition entries must be nonnegative")
        rowsum = self.size_transition.sum(axis=1)
        if np.max(np.abs(rowsum - 1.0)) > 1e-12:
            raise ValueError("size_transition rows must sum to 1 (tol 1e-12)")

    @property
    def n_states(self) -> int:
        return self.n_sizes * (1 << self.n_firms)

    @property
    def n_params(self) -> int:
        return self.n_firms + 3

    @property
    def n_values(self) -> int:
        return self.n_firms * self.n_states * N_ACTIONS

    def fingerprint_fields(self):
        return (
            self.n_firms,
            self.n_sizes,
            round(self.beta, 15),
            tuple(np.round(self.size_transition, 15).ravel()),
            self.include_euler,
        )


@dataclass
class Theta:
    """Structural parameters: per-firm fixed costs, market-size slope,
    rivals' competition effect, and entry cost.

    Stacked ordering is (fc_1..fc_J, rs, rn, ec)."""

    fc: np.ndarray
    rs: float
    rn: float
    ec: float

    def __post_init__(self):
        self.fc = np.atleast_1d(np.asarray(self.fc, dtype=float))
        if not np.all(np.isfinite(self.fc)):
            raise ValueError("fixed costs must be finite")
        for name in ("rs", "rn", "ec"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")

    @property
    def n_firms(self) -> int:
        return self.fc.size

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.fc, [self.rs, self.rn, self.ec]])

    @classmethod
    def from_array(cls, arr) -> "Theta":
        arr = np.asarray(arr, dtype=float)
        if arr.size < 4:
            raise ValueError("parameter vector must have length >= 4")
        return cls(fc=arr[:-3].copy(), rs=float(arr[-3]), rn=float(arr[-2]), ec=float(arr[-1]))

    @classmethod
    def zeros(cls, n_firms: int) -> "Theta":
        return cls(fc=np.zeros(n_firms), rs=0.0, rn=0.0, ec=0.0)


def default_theta(n_firms: int = 5) -> Theta:
    """Monte Carlo design point: fc_j = -2 + 0.1 j, rs = 1, rn = 4, ec = 1."""
    fc = np.array([-2.0 + 0.1 * (j + 1) for j in range(n_firms)])
    return Theta(fc=fc, rs=1.0, rn=4.0, ec=1.0)


@dataclass(frozen=True)
class State:
    """Observable state: market size s (1-based) and lagged activity profile."""

    s: int
    a_prev: tuple

    def to_index(self, config: GameConfig) -> int:
        if not (1 <= self.s <= config.n_sizes):
            raise ValueError("market size out of range")
        if len(self.a_prev) != config.n_firms:
            raise ValueError("lagged action profile has wrong length")
        code = 0
        for j, a in enumerate(self.a_prev):
            if a not in (0, 1):
                raise ValueError("lagged actions must be 0/1")
            code |= int(a) << j
        return (self.s - 1) * (1 << config.n_firms) + code

    @classmethod
    def from_index(cls, x: int, config: GameConfig) -> "State":
        n_prof = 1 << config.n_firms
        if not (0 <= x < config.n_states):
            raise ValueError("state index out of range")
        s = x // n_prof + 1
        code = x % n_prof
        a_prev = tuple((code >> j) & 1 for j in range(config.n_firms))
        return cls(s=s, a_prev=a_prev)


@dataclass
class LinearDecomposition:
    """Constraint split G = coef @ theta + offset at a fixed value function."""

    coef: np.ndarray
    offset: np.ndarray


def surplus(v_row, include_euler: bool = True) -> float:
    """Expected maximum of values plus EV1 shocks: logsumexp, optionally + Euler's constant."""
    v_row = np.asarray(v_row, dtype=float)
    if not np.all(np.isfinite(v_row)):
        raise ValueError("surplus requires finite inputs")
    m = v_row.max()
    out = m + np.log(np.exp(v_row - m).sum())
    if include_euler:
        out += EULER_GAMMA
    return float(out)


def choice_probs(v: np.ndarray) -> np.ndarray:
    """Logit choice probabilities, softmax over the action axis with max subtraction."""
    v = np.asarray(v, dtype=float)
    if not np.all(np.isfinite(v)):
        raise ValueError("choice_probs requires finite values")
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _logsumexp_last(v: np.ndarray) -> np.ndarray:
    m = v.max(axis=-1)
    return m + np.log(np.exp(v - m[..., None]).sum(axis=-1))


class Game:
    """Game primitives on the enumerated state space.

    States are indexed size-major, then the binary code of the lagged
    activity profile (firm j contributes bit j).  The value function is a
    (n_firms, n_states, 2) array; its flattened form is firm-major, then
    state, then action.
    """

    def __init__(self, config: GameConfig):
        self.config = config
        J = config.n_firms
        P = 1 << J
        S = config.n_sizes
        self.n_firms = J
        self.n_profiles = P
        self.n_states = S * P
        self.n_params = config.n_params
        self.n_values = config.n_values
        self.beta = config.beta
        self.fs = config.size_transition

        prof = np.arange(P)
        self._bits = ((prof[:, None] >> np.arange(J)[None, :]) & 1).astype(float)  # (P, J)
        self._bit_on = self._bits.T.astype(bool)  # (J, P)
        x = np.arange(self.n_states)
        self._s_idx = x // P
        self._s_val = (self._s_idx + 1).astype(float)
        self._a_prev = self._bits[x % P]  # (X, J)
        # ln(1 + number of active rivals) per firm and current-action profile
        totals = self._bits.sum(axis=1)
        self._ln_rivals = np.log1p(totals[None, :] - self._bits.T)  # (J, P)
        self._fs_rows = self.fs[self._s_idx]  # (X, S)

    # -- state helpers -------------------------------------------------

    def flatten(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.shape != (self.n_firms, self.n_states, N_ACTIONS):
            raise ValueError("value array has wrong shape")
        return v.reshape(-1)

    def unflatten(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if y.size != self.n_values:
            raise ValueError("flattened value vector has wrong length")
        return y.reshape(self.n_firms, self.n_states, N_ACTIONS)

    def _as_values(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        if v.ndim == 1:
            v = self.unflatten(v)
        if v.shape != (self.n_firms, self.n_states, N_ACTIONS):
            raise ValueError("value array has wrong shape")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        return v

    # -- profile weights -----------------------------------------------

    def _factors(self, p: np.ndarray) -> np.ndarray:
        """Per-firm probability of its own bit in each profile: (J, X, P)."""
        J, P = self.n_firms, self.n_profiles
        cols = self._bits.T.astype(int)  # (J, P)
        out = np.empty((J, self.n_states, P))
        for l in range(J):
            out[l] = p[l][:, cols[l]]
        return out

    def _rival_weights(self, p: np.ndarray) -> np.ndarray:
        """W[j, x, pi] = prod over l != j of firm l's probability of its bit in pi."""
        J, X, P = self.n_firms, self.n_states, self.n_profiles
        fac = self._factors(p)
        prefix = np.ones((J + 1, X, P))
        suffix = np.ones((J + 1, X, P))
        for l in range(J):
            prefix[l + 1] = prefix[l] * fac[l]
        for l in range(J - 1, -1, -1):
            suffix[l] = suffix[l + 1] * fac[l]
        w = np.empty((J, X, P))
        for j in range(J):
            w[j] = prefix[j] * suffix[j + 1]
        return w

    def _rival_ln_mean(self, rival_w: np.ndarray) -> np.ndarray:
        """E[ln(1 + active rivals)] per (firm, state) under independent rival entry."""
        J = self.n_firms
        out = np.empty((J, self.n_states))
        for j in range(J):
            out[j] = rival_w[j] @ (self._ln_rivals[j] * self._bit_on[j])
        return out

    # -- spec operations ------------------------------------------------

    def choice_probs(self, v) -> np.ndarray:
        return choice_probs(self._as_values(v))

    def flow_utility_features(self, j: int, x, a_j: int, rival_actions) -> np.ndarray:
        """Feature vector h with flow utility h @ theta; zero when the firm stays out.

        rival_actions lists the current actions of firms l != j in increasing l.
        """
        feat = np.zeros(self.n_params)
        if a_j == 0:
            return feat
        xi = x.to_index(self.config) if isinstance(x, State) else int(x)
        rival_actions = np.asarray(rival_actions)
        if rival_actions.size != self.n_firms - 1:
            raise ValueError("need one action per rival")
        feat[j] = 1.0
        feat[self.n_firms] = self._s_val[xi]
        feat[self.n_firms + 1] = -np.log1p(rival_actions.sum())
        feat[self.n_firms + 2] = -(1.0 - self._a_prev[xi, j])
        return feat

    def expected_features(self, v) -> np.ndarray:
        """Rival-averaged entry features, (J, X, K); the a=0 features are identically zero."""
        v = self._as_values(v)
        p = choice_probs(v)
        return self._expected_features_from_probs(p)

    def _expected_features_from_probs(self, p: np.ndarray) -> np.ndarray:
        J, X, K = self.n_firms, self.n_states, self.n_params
        rival_w = self._rival_weights(p)
        eln = self._rival_ln_mean(rival_w)
        feat = np.zeros((J, X, K))
        for j in range(J):
            feat[j, :, j] = 1.0
        feat[:, :, J] = self._s_val[None, :]
        feat[:, :, J + 1] = -eln
        feat[:, :, J + 2] = -(1.0 - self._a_prev.T)
        return feat

    def expected_utility(self, v, theta: Theta, j: int, x: int, a_j: int) -> float:
        """Flow utility averaged over rivals' actions drawn from their choice probabilities."""
        if a_j == 0:
            return 0.0
        feat = self.expected_features(v)
        return float(feat[j, int(x)] @ theta.as_array())

    def transition_probs(self, v, j: int, x: int, a_j: int) -> np.ndarray:
        """Distribution of the next state given firm j plays a_j, rivals play their CCPs."""
        v = self._as_values(v)
        p = choice_probs(v)
        rival_w = self._rival_weights(p)[j, int(x)]  # (P,)
        mask = self._bit_on[j] if a_j == 1 else ~self._bit_on[j]
        prof_w = rival_w * mask
        return np.kron(self.fs[self._s_idx[int(x)]], prof_w)

    def bellman_map(self, theta: Theta, v) -> np.ndarray:
        """One application of the choice-specific value operator."""
        v = self._as_values(v)
        p = choice_probs(v)
        rival_w = self._rival_weights(p)
        u1 = self._entry_utility(theta, rival_w)
        cont = self._continuation(v, rival_w)
        out = self.beta * cont
        out[:, :, 1] += u1
        return out

    def _entry_utility(self, theta: Theta, rival_w: np.ndarray) -> np.ndarray:
        eln = self._rival_ln_mean(rival_w)
        u1 = (
            theta.fc[:, None]
            + theta.rs * self._s_val[None, :]
            - theta.rn * eln
            - theta.ec * (1.0 - self._a_prev.T)
        )
        return u1

    def _surplus_grid(self, v: np.ndarray) -> np.ndarray:
        s = _logsumexp_last(v)
        if self.config.include_euler:
            s = s + EULER_GAMMA
        return s  # (J, X)

    def _continuation(self, v: np.ndarray, rival_w: np.ndarray) -> np.ndarray:
        """beta-free continuation term: sum over next states of transition * surplus."""
        J, X, P, S = self.n_firms, self.n_states, self.n_profiles, self.config.n_sizes
        surv = self._surplus_grid(v).reshape(J, S, P)
        cont = np.empty((J, X, N_ACTIONS))
        for j in range(J):
            next_sur = self.fs @ surv[j]  # (S, P): E over s' of surplus at (s', profile)
            wk = rival_w[j] * next_sur[self._s_idx]  # (X, P)
            cont[j, :, 1] = wk @ self._bit_on[j]
            cont[j, :, 0] = wk @ (~self._bit_on[j])
        return cont

    def constraint(self, theta: Theta, v) -> np.ndarray:
        """Equilibrium constraint: flattened values minus the value operator applied once."""
        v = self._as_values(v)
        return self.flatten(v) - self.flatten(self.bellman_map(theta, v))

    def linear_parts(self, v) -> LinearDecomposition:
        """Split the constraint into coef @ theta + offset, exact for every theta."""
        v = self._as_values(v)
        p = choice_probs(v)
        rival_w = self._rival_weights(p)
        feat = self._expected_features_from_probs(p)
        cont = self._continuation(v, rival_w)
        coef = np.zeros((self.n_values, self.n_params))
        coef.reshape(self.n_firms, self.n_states, N_ACTIONS, self.n_params)[:, :, 1, :] = -feat
        offset = self.flatten(v - self.beta * cont)
        return LinearDecomposition(coef=coef, offset=offset)

    def constraint_jacobian(self, theta: Theta, v) -> sp.csr_matrix:
        """Analytic Jacobian of the constraint in the values, stored sparse.

        Own-firm blocks are dense across states (the continuation channel);
        cross-firm entries exist only within the same state, through the
        rivals' choice probabilities inside both the expected flow utility
        and the transition weights.
        """
        v = self._as_values(v)
        J, X, P, S = self.n_firms, self.n_states, self.n_profiles, self.config.n_sizes
        A = N_ACTIONS
        p = choice_probs(v)
        fac = self._factors(p)
        rival_w = self._rival_weights(p)
        surv = self._surplus_grid(v).reshape(J, S, P)

        rows, cols, vals = [], [], []
        base = np.arange(X) * A

        # continuation channel: d Phi^j(x,a) / d v^j(x~,a~) = beta * f^j(x~|x,a) * p^j(x~,a~)
        for j in range(J):
            w = rival_w[j]
            for a in (0, 1):
                mask = self._bit_on[j] if a == 1 else ~self._bit_on[j]
                t_a = w * mask  # (X, P)
                m_a = np.einsum("xs,xp->xsp", self._fs_rows, t_a).reshape(X, X)
                block = self.beta * m_a[:, :, None] * p[j][None, :, :]  # (X, X~, A~)
                r = np.repeat(j * X * A + base + a, X * A)
                c = np.tile((j * X * A + base[:, None] + np.arange(A)).ravel(), X)
                rows.append(r)
                cols.append(c)
                vals.append(block.reshape(-1))

        # same-state channel through rivals' choice probabilities
        if J > 1:
            kappa = np.empty((J, X, P))
            for j in range(J):
                kappa[j] = (self.fs @ surv[j])[self._s_idx]
            eln = self._ln_rivals  # (J, P)
            tiny = np.finfo(float).tiny
            for j in range(J):
                u1_prof = (
                    theta.fc[j]
                    + theta.rs * self._s_val[:, None]
                    - theta.rn * eln[j][None, :]
                    - theta.ec * (1.0 - self._a_prev[:, j])[:, None]
                )  # (X, P)
                psi1 = u1_prof + self.beta * kappa[j]
                psi0 = self.beta * kappa[j]
                mask1 = self._bit_on[j]
                for l in range(J):
                    if l == j:
                        continue
                    w_pair = rival_w[j] / np.maximum(fac[l], tiny)  # (X, P)
                    dl = np.empty((A, A, X))  # [a, a_l', x]
                    for a, psi in ((0, psi0), (1, psi1)):
                        sel = mask1 if a == 1 else ~mask1
                        wp = w_pair * psi
                        dl[a, 1] = (wp * (sel & self._bit_on[l])) @ np.ones(P)
                        dl[a, 0] = (wp * (sel & ~self._bit_on[l])) @ np.ones(P)
                    p0, p1 = p[l][:, 0], p[l][:, 1]
                    for a in (0, 1):
                        for at in (0, 1):
                            d_at = (
                                dl[a, 1] * p1 * ((1.0 if at == 1 else 0.0) - p[l][:, at])
                                + dl[a, 0] * p0 * ((1.0 if at == 0 else 0.0) - p[l][:, at])
                            )
                            rows.append(j * X * A + base + a)
                            cols.append(l * X * A + base + at)
                            vals.append(d_at)

        dphi = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_values, self.n_values),
        )
        jac = (sp.identity(self.n_values, format="coo") - dphi).tocsr()
        return jac

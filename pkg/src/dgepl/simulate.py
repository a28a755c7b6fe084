"""Equilibrium solving, stationary distributions, dataset simulation and file IO.

Datasets are i.i.d. cross-sections: states drawn from the ergodic
distribution of the equilibrium play, actions drawn independently across
firms from their equilibrium choice probabilities.  Reproducibility is
within-implementation: a (config, theta, n_obs, seed) tuple always yields
the same dataset.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .game import Game, GameConfig, Theta, choice_probs
from .numerics import AndersonOptions, fixed_point_solve


class EquilibriumError(RuntimeError):
    """Fixed-point solve for the equilibrium values did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class DatasetFormatError(ValueError):
    pass


class ConfigFormatError(ValueError):
    pass


class Observation(NamedTuple):
    x: int
    actions: tuple


@dataclass
class Dataset:
    """Cross-section of observations plus generation metadata."""

    x: np.ndarray  # (N,) state indices
    actions: np.ndarray  # (N, J) binary actions
    seed: int | None = None
    fingerprint: str | None = None
    theta_true: Theta | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.x.ndim != 1 or self.actions.ndim != 2 or self.actions.shape[0] != self.x.size:
            raise ValueError("x must be (N,), actions (N, J)")
        if self.x.size < 1:
            raise ValueError("dataset must contain at least one observation")
        if np.any(self.x < 0):
            raise ValueError("state indices must be nonnegative")
        if np.any((self.actions != 0) & (self.actions != 1)):
            raise ValueError("actions must be binary")

    @property
    def n_obs(self) -> int:
        return self.x.size

    @property
    def n_firms(self) -> int:
        return self.actions.shape[1]

    def rows(self) -> Iterator[Observation]:
        for i in range(self.n_obs):
            yield Observation(int(self.x[i]), tuple(int(a) for a in self.actions[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        theta_eq = (self.theta_true is None) == (other.theta_true is None) and (
            self.theta_true is None
            or np.array_equal(self.theta_true.as_array(), other.theta_true.as_array())
        )
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.actions, other.actions)
            and self.seed == other.seed
            and self.fingerprint == other.fingerprint
            and theta_eq
        )


def config_fingerprint(config: GameConfig, theta: Theta | None) -> str:
    """Stable short hash of the game primitives and the generating parameters."""
    payload = repr(config.fingerprint_fields())
    if theta is not None:
        payload += repr(tuple(np.round(theta.as_array(), 15)))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def solve_equilibrium(config, theta: Theta, v0: np.ndarray | None = None,
                      tol: float = 1e-12, max_iter: int = 5000,
                      memory: int = 5) -> np.ndarray:
    """Markov perfect equilibrium values: the root of the equilibrium constraint.

    Iterates the value operator with Anderson acceleration from v0 (zeros by
    default; starting from zeros is the equilibrium-selection rule all
    estimators in this package share).
    """
    game = config if isinstance(config, Game) else Game(config)
    if v0 is None:
        y0 = np.zeros(game.n_values)
    else:
        v0 = np.asarray(v0, dtype=float)
        y0 = game.flatten(v0) if v0.ndim == 3 else v0.copy()

    def step(y: np.ndarray) -> np.ndarray:
        return game.flatten(game.bellman_map(theta, game.unflatten(y)))

    res = fixed_point_solve(step, y0, AndersonOptions(memory=memory, tol=tol, max_iter=max_iter))
    if not res.converged:
        raise EquilibriumError(
            f"equilibrium solve stalled at residual {res.residual_norm:.3e} "
            f"after {res.iterations} iterations (tol {tol:.1e})",
            residual=res.residual_norm,
        )
    return game.unflatten(res.y)


def state_kernel(ccps: np.ndarray, game: Game) -> np.ndarray:
    """State-to-state transition matrix induced by the size chain and the CCPs."""
    p = np.asarray(ccps, dtype=float)
    fac = game._factors(p)
    w_all = fac[0].copy()
    for l in range(1, game.n_firms):
        w_all *= fac[l]
    kernel = np.einsum("xs,xp->xsp", game._fs_rows, w_all)
    return kernel.reshape(game.n_states, game.n_states)


def stationary_distribution(ccps: np.ndarray, config, tol: float = 1e-12,
                            max_iter: int = 200_000) -> np.ndarray:
    """Stationary distribution of the induced state chain, by power iteration.

    If the kernel is the identity (every state absorbing) the iteration
    returns its uniform starting point; callers should treat that case as
    degenerate.
    """
    game = config if isinstance(config, Game) else Game(config)
    kernel = state_kernel(ccps, game)
    pi = np.full(game.n_states, 1.0 / game.n_states)
    for _ in range(max_iter):
        nxt = pi @ kernel
        nxt /= nxt.sum()
        if np.max(np.abs(nxt - pi)) <= tol:
            return nxt
        pi = nxt
    raise RuntimeError(f"power iteration did not reach tol {tol:.1e} in {max_iter} iterations")


def simulate_dataset(config: GameConfig, theta_true: Theta, n_obs: int, seed: int) -> Dataset:
    """Solve the equilibrium, then sample an i.i.d. cross-section from it."""
    if n_obs < 1:
        raise ValueError("n_obs must be >= 1")
    game = config if isinstance(config, Game) else Game(config)
    v_star = solve_equilibrium(game, theta_true)
    p = choice_probs(v_star)
    pi = stationary_distribution(p, game)
    rng = np.random.default_rng(seed)
    x = rng.choice(game.n_states, size=n_obs, p=pi)
    entry_prob = p[:, :, 1][:, x].T  # (N, J)
    actions = (rng.random((n_obs, game.n_firms)) < entry_prob).astype(np.int64)
    return Dataset(
        x=x,
        actions=actions,
        seed=seed,
        fingerprint=config_fingerprint(game.config, theta_true),
        theta_true=theta_true,
    )


# ---------------------------------------------------------------------------
# dataset file format: CSV with header obs_id,s,a_prev_1..J,a_1..J,
# integers only.  Generation metadata rides in leading '#' comment lines.
# ---------------------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    n_firms = dataset.n_firms
    n_prof = 1 << n_firms
    header = (
        ["obs_id", "s"]
        + [f"a_prev_{j + 1}" for j in range(n_firms)]
        + [f"a_{j + 1}" for j in range(n_firms)]
    )
    lines = []
    if dataset.seed is not None:
        lines.append(f"# seed = {dataset.seed}")
    if dataset.fingerprint is not None:
        lines.append(f"# fingerprint = {dataset.fingerprint}")
    if dataset.theta_true is not None:
        vals = ",".join(repr(float(v)) for v in dataset.theta_true.as_array())
        lines.append(f"# theta_true = {vals}")
    lines.append(",".join(header))
    s_idx = dataset.x // n_prof
    code = dataset.x % n_prof
    for i in range(dataset.n_obs):
        prev_bits = [(int(code[i]) >> j) & 1 for j in range(n_firms)]
        row = [str(i), str(int(s_idx[i]) + 1)]
        row += [str(b) for b in prev_bits]
        row += [str(int(a)) for a in dataset.actions[i]]
        lines.append(",".join(row))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_dataset(path) -> Dataset:
    seed = None
    fingerprint = None
    theta_true = None
    header = None
    data_rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line.lstrip("#").strip()
                if "=" in body:
                    key, _, val = body.partition("=")
                    key = key.strip()
                    val = val.strip()
                    if key == "seed":
                        seed = int(val)
                    elif key == "fingerprint":
                        fingerprint = val
                    elif key == "theta_true":
                        theta_true = Theta.from_array([float(t) for t in val.split(",")])
                continue
            if header is None:
                header = line.split(",")
                continue
            data_rows.append((lineno, line.split(",")))
    if header is None:
        raise DatasetFormatError("dataset file has no header line")
    if header[:2] != ["obs_id", "s"]:
        raise DatasetFormatError("header must start with obs_id,s")
    n_firms = sum(1 for c in header if c.startswith("a_prev_"))
    expected = (
        ["obs_id", "s"]
        + [f"a_prev_{j + 1}" for j in range(n_firms)]
        + [f"a_{j + 1}" for j in range(n_firms)]
    )
    for col in expected:
        if col not in header:
            raise DatasetFormatError(f"missing column {col!r} in dataset header")
    if header != expected:
        raise DatasetFormatError("unexpected column order in dataset header")
    if not data_rows:
        raise DatasetFormatError("dataset file has no observation rows")
    n_prof = 1 << n_firms
    xs = []
    acts = []
    for lineno, cells in data_rows:
        if len(cells) != len(expected):
            raise DatasetFormatError(
                f"line {lineno}: expected {len(expected)} fields, found {len(cells)}"
            )
        try:
            ints = [int(c) for c in cells]
        except ValueError as exc:
            raise DatasetFormatError(f"line {lineno}: non-integer field ({exc})") from exc
        s = ints[1]
        prev = ints[2 : 2 + n_firms]
        a = ints[2 + n_firms :]
        if s < 1:
            raise DatasetFormatError(f"line {lineno}: market size must be >= 1")
        if any(b not in (0, 1) for b in prev + a):
            raise DatasetFormatError(f"line {lineno}: action fields must be 0/1")
        code = sum(b << j for j, b in enumerate(prev))
        xs.append((s - 1) * n_prof + code)
        acts.append(a)
    return Dataset(
        x=np.array(xs), actions=np.array(acts), seed=seed,
        fingerprint=fingerprint, theta_true=theta_true,
    )


# ---------------------------------------------------------------------------
# config file format: line-oriented `key = value`
# ---------------------------------------------------------------------------


def write_config(path, config: GameConfig, theta: Theta, n_obs: int, seed: int) -> None:
    lines = [
        f"n_firms = {config.n_firms}",
        f"n_sizes = {config.n_sizes}",
        f"beta = {config.beta!r}",
    ]
    for j in range(config.n_firms):
        lines.append(f"theta_fc_{j + 1} = {float(theta.fc[j])!r}")
    lines.append(f"theta_rs = {theta.rs!r}")
    lines.append(f"theta_rn = {theta.rn!r}")
    lines.append(f"theta_ec = {theta.ec!r}")
    lines.append(f"n_obs = {n_obs}")
    lines.append(f"seed = {seed}")
    for k in range(config.n_sizes):
        row = ",".join(repr(float(v)) for v in config.size_transition[k])
        lines.append(f"size_transition_row_{k + 1} = {row}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_config(path) -> tuple[GameConfig, Theta, int, int]:
    """Parse a run configuration; returns (game config, theta, n_obs, seed)."""
    entries: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigFormatError(f"line {lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key in entries:
                raise ConfigFormatError(f"line {lineno}: duplicate key {key!r}")
            entries[key] = val

    def take(key: str) -> str:
        if key not in entries:
            raise ConfigFormatError(f"missing required key {key!r}")
        return entries.pop(key)

    try:
        n_firms = int(take("n_firms"))
        n_sizes = int(take("n_sizes"))
        beta = float(take("beta"))
        fc = np.array([float(take(f"theta_fc_{j + 1}")) for j in range(n_firms)])
        rs = float(take("theta_rs"))
        rn = float(take("theta_rn"))
        ec = float(take("theta_ec"))
        n_obs = int(take("n_obs"))
        seed = int(take("seed"))
    except ValueError as exc:
        raise ConfigFormatError(f"malformed numeric value: {exc}") from exc
    row_keys = [f"size_transition_row_{k + 1}" for k in range(n_sizes)]
    present = [k for k in row_keys if k in entries]
    if present and len(present) != n_sizes:
        raise ConfigFormatError("size_transition rows must be given in full or not at all")
    size_transition = None
    if present:
        try:
            size_transition = np.array(
                [[float(v) for v in entries.pop(k).split(",")] for k in row_keys]
            )
        except ValueError as exc:
            raise ConfigFormatError(f"malformed size_transition row: {exc}") from exc
    if entries:
        raise ConfigFormatError(f"unknown key {sorted(entries)[0]!r}")
    config = GameConfig(
        n_firms=n_firms, n_sizes=n_sizes, beta=beta, size_transition=size_transition
    )
    theta = Theta(fc=fc, rs=rs, rn=rn, ec=ec)
    return config, theta, n_obs, seed

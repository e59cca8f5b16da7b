"""Toy environments and exact dynamic-programming oracles.

Two environment kinds share a small duck-typed interface used by the data and
training code: ``reset(rng)``, ``step(state, action, rng)``, ``encode(states)``,
``horizon``, ``discrete``, ``obs_dim`` and ``action_dim``/``n_actions``.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, InvalidArgumentError, NumericalError

# action order for gridworlds: up, right, down, left as (drow, dcol)
MOVES = ((-1, 0), (0, 1), (1, 0), (0, -1))
ACTION_NAMES = ("up", "right", "down", "left")


@dataclass
class TabularMdp:
    transition: np.ndarray  # T[s, a, s']
    reward: np.ndarray  # R[s, a, s']
    gamma: float
    rho: np.ndarray
    horizon: int = 100
    terminal: np.ndarray | None = None

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        S, A, S2 = self.transition.shape
        if S != S2 or self.reward.shape != (S, A, S):
            raise InvalidArgumentError("transition/reward tensors must be S x A x S")
        if not 0.0 < self.gamma < 1.0:
            raise InvalidArgumentError(f"gamma must lie in (0, 1), got {self.gamma}")
        if np.any(self.transition < 0) or np.max(np.abs(self.transition.sum(axis=2) - 1.0)) > 1e-12:
            raise InvalidArgumentError("each T[s, a] must be a probability vector")
        if self.rho.shape != (S,) or np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-12:
            raise InvalidArgumentError("rho must be a probability vector over states")
        if self.horizon < 1:
            raise InvalidArgumentError("horizon must be positive")
        if self.terminal is None:
            self.terminal = np.zeros(S, dtype=bool)
        self.terminal = np.asarray(self.terminal, dtype=bool)
        for s in np.flatnonzero(self.terminal):
            if not (np.all(self.transition[s, :, s] == 1.0) and np.all(self.reward[s] == 0.0)):
                raise InvalidArgumentError(f"terminal state {s} must self-loop with zero reward")
        self.r_max = float(np.max(np.abs(self.reward))) if self.reward.size else 0.0

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def expected_reward(self) -> np.ndarray:
        """R(s, a) = E_{s' ~ T(.|s, a)} R(s, a, s')."""
        return np.einsum("ijk,ijk->ij", self.transition, self.reward)


@dataclass
class TabularPolicy:
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2 or np.any(self.probs < 0):
            raise InvalidArgumentError("policy must be a non-negative S x A matrix")
        if np.max(np.abs(self.probs.sum(axis=1) - 1.0)) > 1e-12:
            raise InvalidArgumentError("policy rows must sum to 1")

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "TabularPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "TabularPolicy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)


@dataclass
class VisitDist:
    d: np.ndarray

    def __post_init__(self):
        self.d = np.asarray(self.d, dtype=np.float64)
        if np.any(self.d < 0):
            raise InvalidArgumentError("visitation entries must be non-negative")
        if abs(self.d.sum() - 1.0) > 1e-9:
            raise InvalidArgumentError(f"visitation must sum to 1, got {self.d.sum()!r}")


# ---------------------------------------------------------------- gridworld

@dataclass
class GridworldSpec:
    width: int
    height: int
    walls: frozenset = frozenset()
    start: tuple[int, int] = (0, 0)
    goal: tuple[int, int] = (0, 1)
    slip_prob: float = 0.0
    gamma: float = 0.99
    horizon: int = 100
    name: str = "grid"

    def __post_init__(self):
        self.walls = frozenset(tuple(c) for c in self.walls)
        self.start = tuple(self.start)
        self.goal = tuple(self.goal)
        if self.start == self.goal:
            raise ConfigurationError("start and goal must differ")
        for cell in (self.start, self.goal):
            if not self.inside(cell) or cell in self.walls:
                raise ConfigurationError(f"cell {cell} is outside the grid or a wall")
        if not 0.0 <= self.slip_prob < 1.0:
            raise ConfigurationError("slip_prob must lie in [0, 1)")
        if self.shortest_path() is None:
            raise ConfigurationError(f"goal {self.goal} is unreachable from {self.start}")

    def inside(self, cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def free_cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.height) for c in range(self.width)
                if (r, c) not in self.walls]

    def move(self, cell, action: int):
        r, c = cell
        dr, dc = MOVES[action]
        nxt = (r + dr, c + dc)
        if not self.inside(nxt) or nxt in self.walls:
            return cell
        return nxt

    def shortest_path(self) -> int | None:
        """Number of moves on a BFS shortest path from start to goal."""
        seen = {self.start: 0}
        queue = deque([self.start])
        while queue:
            cell = queue.popleft()
            if cell == self.goal:
                return seen[cell]
            for a in range(4):
                nxt = self.move(cell, a)
                if nxt not in seen:
                    seen[nxt] = seen[cell] + 1
                    queue.append(nxt)
        return None


def parse_grid_map(text: str, **kwargs) -> GridworldSpec:
    """Build a spec from a text map: ``#`` wall, ``S`` start, ``G`` goal, ``.`` free."""
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        raise ConfigurationError("empty grid map")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise ConfigurationError("grid map rows must have equal length")
    walls, start, goal = set(), None, None
    for i, row in enumerate(rows):
        for j, ch in enumerate(row):
            if ch == "#":
                walls.add((i, j))
            elif ch == "S":
                start = (i, j)
            elif ch == "G":
                goal = (i, j)
            elif ch != ".":
                raise ConfigurationError(f"unknown map character {ch!r} at row {i}, col {j}")
    if start is None or goal is None:
        raise ConfigurationError("map needs exactly one S and one G")
    return GridworldSpec(width=width, height=len(rows), walls=frozenset(walls),
                         start=start, goal=goal, **kwargs)


def load_grid_map(path, **kwargs) -> GridworldSpec:
    path = Path(path)
    kwargs.setdefault("name", path.stem)
    return parse_grid_map(path.read_text(), **kwargs)


def grid_to_mdp(spec: GridworldSpec) -> TabularMdp:
    cells = spec.free_cells()
    index = {cell: i for i, cell in enumerate(cells)}
    S, A = len(cells), 4
    T = np.zeros((S, A, S))
    R = np.zeros((S, A, S))
    g = index[spec.goal]
    for cell, s in index.items():
        if s == g:
            T[s, :, s] = 1.0
            continue
        for a in range(A):
            # intended move with prob 1 - slip, uniform random move with prob slip
            probs = np.full(A, spec.slip_prob / A)
            probs[a] += 1.0 - spec.slip_prob
            for b in range(A):
                if probs[b] > 0:
                    T[s, a, index[spec.move(cell, b)]] += probs[b]
        R[s, :, g] = 1.0
    rho = np.zeros(S)
    rho[index[spec.start]] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[g] = True
    return TabularMdp(T, R, spec.gamma, rho, spec.horizon, terminal)


# ---------------------------------------------------------------- oracles

def value_iteration(mdp: TabularMdp, tol: float = 1e-10, max_iter: int = 1_000_000):
    """Optimal (V, Q, greedy policy); stops once the sup-norm Bellman residual is <= tol."""
    if tol <= 0:
        raise InvalidArgumentError("tol must be positive")
    r_bar = mdp.expected_reward()
    T = mdp.transition
    V = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        Q = r_bar + mdp.gamma * T @ V
        V_new = Q.max(axis=1)
        residual = np.max(np.abs(V_new - V))
        V = V_new
        if residual <= tol * (1.0 - mdp.gamma):
            break
    Q = r_bar + mdp.gamma * T @ V
    V = Q.max(axis=1)
    # lowest-index tie-break, robust to rounding noise between equal-valued actions
    scale = max(1.0, float(np.max(np.abs(Q))))
    best = Q >= V[:, None] - 1e-12 * scale
    greedy = TabularPolicy.deterministic(np.argmax(best, axis=1), mdp.n_actions)
    return V, Q, greedy


def exact_visitation(mdp: TabularMdp, policy: TabularPolicy) -> VisitDist:
    """Normalized discounted state-action occupancy, solved as a linear system."""
    pi = policy.probs
    if pi.shape != (mdp.n_states, mdp.n_actions):
        raise InvalidArgumentError(f"policy shape {pi.shape} does not match MDP")
    P = np.einsum("sa,sat->st", pi, mdp.transition)
    A = np.eye(mdp.n_states) - mdp.gamma * P.T
    try:
        d_state = np.linalg.solve(A, (1.0 - mdp.gamma) * mdp.rho)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"occupancy system is singular: {exc}") from exc
    d = d_state[:, None] * pi
    d[d < 0] = 0.0  # clamp round-off
    return VisitDist(d / d.sum())


def policy_evaluation(mdp: TabularMdp, policy: TabularPolicy) -> np.ndarray:
    pi = policy.probs
    P = np.einsum("sa,sat->st", pi, mdp.transition)
    r = np.einsum("sa,sa->s", pi, mdp.expected_reward())
    return np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P, r)


def exact_policy_return(mdp: TabularMdp, policy: TabularPolicy) -> float:
    d = exact_visitation(mdp, policy).d
    return float(np.sum(d * mdp.expected_reward()) / (1.0 - mdp.gamma))


def random_mdp(n_states: int, n_actions: int, rng: np.random.Generator,
               gamma: float | None = None) -> TabularMdp:
    """Dense random MDP with Dirichlet dynamics and rewards uniform in [-1, 1]."""
    T = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    T /= T.sum(axis=2, keepdims=True)
    R = rng.uniform(-1.0, 1.0, size=(n_states, n_actions, n_states))
    rho = rng.dirichlet(np.ones(n_states))
    rho /= rho.sum()
    if gamma is None:
        gamma = float(rng.uniform(0.5, 0.99))
    return TabularMdp(T, R, gamma, rho, horizon=100)


def random_policy(n_states: int, n_actions: int, rng: np.random.Generator) -> TabularPolicy:
    p = rng.dirichlet(np.ones(n_actions), size=n_states)
    return TabularPolicy(p / p.sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- sampled envs

class TabularEnv:
    """Samples an MDP; states are integer indices, observations one-hot rows."""

    discrete = True

    def __init__(self, mdp: TabularMdp, name: str = "tabular", spec: GridworldSpec | None = None):
        self.mdp = mdp
        self.name = name
        self.spec = spec
        self._cum_T = np.cumsum(mdp.transition, axis=2)
        self._eye = np.eye(mdp.n_states)

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    @property
    def gamma(self) -> float:
        return self.mdp.gamma

    @property
    def n_actions(self) -> int:
        return self.mdp.n_actions

    @property
    def action_dim(self) -> int:
        return 1

    @property
    def obs_dim(self) -> int:
        return self.mdp.n_states

    @property
    def r_max(self) -> float:
        return self.mdp.r_max

    def encode(self, states) -> np.ndarray:
        return self._eye[np.asarray(states, dtype=int)]

    def reset(self, rng: np.random.Generator) -> int:
        return int(np.searchsorted(np.cumsum(self.mdp.rho), rng.random(), side="right"))

    def step(self, state: int, action, rng: np.random.Generator):
        """Returns (next_state, reward, terminal); the caller applies the horizon cap."""
        a = int(action)
        if not 0 <= a < self.mdp.n_actions or a != action:
            raise InvalidArgumentError(f"action {action!r} out of range")
        row = self._cum_T[state, a]
        nxt = int(min(np.searchsorted(row, rng.random() * row[-1], side="right"),
                      self.mdp.n_states - 1))
        reward = float(self.mdp.reward[state, a, nxt])
        return nxt, reward, bool(self.mdp.terminal[nxt])

    def reference_returns(self) -> dict:
        _, _, greedy = value_iteration(self.mdp)
        uniform = TabularPolicy.uniform(self.mdp.n_states, self.mdp.n_actions)
        return {"random": exact_policy_return(self.mdp, uniform),
                "expert": exact_policy_return(self.mdp, greedy)}


@dataclass
class PointMassSpec:
    start: tuple[float, float] = (-0.5, -0.5)
    goal: tuple[float, float] = (0.5, 0.5)
    dt: float = 0.1
    horizon: int = 200
    gamma: float = 0.99
    reward_scale: float = 0.1
    control_cost: float = 0.01
    start_noise: float = 0.05
    arena: float = 1.0
    name: str = "pointmass"


class PointMassEnv:
    """2-D point mass; state (x, y, vx, vy), action acceleration in [-1, 1]^2."""

    discrete = False
    n_actions = None
    action_dim = 2
    obs_dim = 4

    def __init__(self, spec: PointMassSpec | None = None):
        self.spec = spec or PointMassSpec()
        self.name = self.spec.name
        self._goal = np.asarray(self.spec.goal, dtype=np.float64)

    @property
    def horizon(self) -> int:
        return self.spec.horizon

    @property
    def gamma(self) -> float:
        return self.spec.gamma

    @property
    def r_max(self) -> float:
        # farthest distance inside the arena plus the largest control penalty
        return self.spec.reward_scale * 2.0 * np.sqrt(2.0) * self.spec.arena + 2.0 * self.spec.control_cost

    def encode(self, states) -> np.ndarray:
        return np.asarray(states, dtype=np.float64)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        s = self.spec
        pos = np.asarray(s.start, dtype=np.float64)
        if s.start_noise > 0:
            pos = pos + rng.uniform(-s.start_noise, s.start_noise, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def step(self, state, action, rng: np.random.Generator | None = None):
        a = np.asarray(action, dtype=np.float64)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise InvalidArgumentError(f"point-mass action must be a finite 2-vector, got {action!r}")
        a = np.clip(a, -1.0, 1.0)
        s = self.spec
        pos, vel = state[:2], state[2:]
        pos = pos + vel * s.dt
        vel = np.clip(vel + a * s.dt, -1.0, 1.0)
        hit = np.abs(pos) > s.arena
        pos = np.clip(pos, -s.arena, s.arena)
        vel = np.where(hit, 0.0, vel)
        reward = -s.reward_scale * float(np.linalg.norm(pos - self._goal)) - s.control_cost * float(a @ a)
        return np.concatenate([pos, vel]), reward, False

    def pd_action(self, state) -> np.ndarray:
        """Hand-tuned proportional-derivative controller toward the goal."""
        return np.clip(4.0 * (self._goal - state[:2]) - 3.0 * state[2:], -1.0, 1.0)

    def reference_returns(self, n_episodes: int = 100, seed: int = 0) -> dict:
        rng = np.random.default_rng(seed)
        rand = rollout_returns(self, lambda s, r: r.uniform(-1, 1, size=2), n_episodes, rng)
        expert = rollout_returns(self, lambda s, r: self.pd_action(s), n_episodes, rng)
        return {"random": float(np.mean(rand)), "expert": float(np.mean(expert))}


def rollout_returns(env, act, n_episodes: int, rng: np.random.Generator) -> np.ndarray:
    """Discounted returns of ``act(state, rng)`` over horizon-capped episodes."""
    out = np.empty(n_episodes)
    for ep in range(n_episodes):
        s = env.reset(rng)
        total, disc = 0.0, 1.0
        for _ in range(env.horizon):
            s, r, term = env.step(s, act(s, rng), rng)
            total += disc * r
            disc *= env.gamma
            if term:
                break
        out[ep] = total
    return out


# ---------------------------------------------------------------- presets

GRID_MAPS = {
    "grid1x2": "SG",
    "grid5": """
        S.#..
        ..#..
        ..#..
        ....G
        ..#..
    """,
    "grid8": """
        S.......
        #######.
        ........
        .#######
        ........
        #######.
        ........
        G#######
    """,
}

GRID_OPTIONS = {
    "grid1x2": {"slip_prob": 0.0, "horizon": 100, "gamma": 0.95},
    "grid5": {"slip_prob": 0.0, "horizon": 100, "gamma": 0.95},
    "grid8": {"slip_prob": 0.1, "horizon": 100, "gamma": 0.95},
}


def make_env(env_id: str, slip: float | None = None):
    """Resolve a preset id (``grid1x2``, ``grid5``, ``grid8``, ``pointmass``) or a map-file path."""
    if env_id == "pointmass":
        return PointMassEnv()
    if env_id in GRID_MAPS:
        opts = dict(GRID_OPTIONS[env_id])
        if slip is not None:
            opts["slip_prob"] = slip
        spec = parse_grid_map(GRID_MAPS[env_id], name=env_id, **opts)
    else:
        path = Path(env_id)
        if not path.is_file():
            raise ConfigurationError(f"unknown environment {env_id!r}")
        spec = load_grid_map(path, slip_prob=slip or 0.0, name=str(path))
    return TabularEnv(grid_to_mdp(spec), name=env_id, spec=spec)

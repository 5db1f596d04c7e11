"""Puddle World variants and a small deterministic grid MDP with exact DP."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

LEFT, RIGHT, UP, DOWN = range(4)
ACTION_NAMES = ("left", "right", "up", "down")
_DIRECTIONS = np.array([[-1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])


@dataclass(frozen=True)
class Box:
    low: tuple[float, float]
    high: tuple[float, float]

    def contains(self, state) -> bool:
        s = np.asarray(state, dtype=float)
        return bool(np.all(s >= self.low) and np.all(s <= self.high))


@dataclass(frozen=True)
class PuddleSpec:
    goal: Box = Box((0.8, 0.8), (1.0, 1.0))
    goal_reward: float = 100.0
    puddles: tuple[tuple[Box, float], ...] = (
        (Box((0.2, 0.6), (0.4, 0.8)), -10.0),
        (Box((0.6, 0.2), (0.8, 0.4)), -10.0),
    )
    displacement: float = 0.1
    noise_std: float = 0.01
    start: tuple[float, float] = (0.0, 0.0)
    horizon: int = 50
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if not self.displacement > 0:
            raise ValueError("displacement must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        for box in [self.goal] + [b for b, _ in self.puddles]:
            if min(box.low) < self.low or max(box.high) > self.high:
                raise ValueError(f"region {box} leaves the state box")

    @property
    def reward_scale(self) -> float:
        return max([abs(self.goal_reward)] + [abs(p) for _, p in self.puddles])


VARIANTS = ("standard", "goal10", "easy")


def make_variant(name: str, **overrides) -> PuddleSpec:
    """Named Puddle World layouts; keyword overrides (noise_std, horizon, ...) apply on top."""
    base = PuddleSpec()
    if name == "standard":
        spec = base
    elif name == "goal10":
        spec = replace(base, goal_reward=10.0)
    elif name == "easy":
        spec = replace(base, puddles=((Box((0.2, 0.6), (0.4, 0.8)), -1.0),))
    else:
        raise ValueError(f"unknown Puddle World variant {name!r}; expected one of {VARIANTS}")
    return replace(spec, **overrides) if overrides else spec


def puddle_step(state, action: int, rng: np.random.Generator | None, spec: PuddleSpec = PuddleSpec()) -> np.ndarray:
    """Move 0.1 in the action direction, add Gaussian noise, clip to the box."""
    if not 0 <= action < 4:
        raise ValueError(f"invalid action {action}")
    nxt = np.asarray(state, dtype=float) + spec.displacement * _DIRECTIONS[action]
    if spec.noise_std > 0:
        nxt = nxt + rng.normal(0.0, spec.noise_std, size=2)
    return np.clip(nxt, spec.low, spec.high)


def puddle_reward(state, spec: PuddleSpec = PuddleSpec()) -> float:
    if spec.goal.contains(state):
        return spec.goal_reward
    for box, penalty in spec.puddles:
        if box.contains(state):
            return penalty
    return 0.0


class PuddleWorld:
    """Non-absorbing Puddle World; every episode runs exactly ``horizon`` steps."""

    n_actions = 4

    def __init__(self, spec: PuddleSpec = PuddleSpec()):
        self.spec = spec
        self.horizon = spec.horizon
        self.reward_scale = spec.reward_scale

    @property
    def state_low(self):
        return np.full(2, self.spec.low)

    @property
    def state_high(self):
        return np.full(2, self.spec.high)

    def reset(self, seed: int) -> np.ndarray:
        return np.array(self.spec.start, dtype=float)

    def reward(self, h: int, state, action: int) -> float:
        return puddle_reward(state, self.spec)

    def rewards(self, h: int, states, actions) -> np.ndarray:
        """Vectorised reward for planning; depends on the state only."""
        s = np.atleast_2d(states)
        out = np.zeros(len(s))
        for box, penalty in self.spec.puddles:
            out[np.all((s >= box.low) & (s <= box.high), axis=1)] = penalty
        g = self.spec.goal
        out[np.all((s >= g.low) & (s <= g.high), axis=1)] = self.spec.goal_reward
        return out

    def step(self, h: int, state, action: int, rng: np.random.Generator):
        return puddle_step(state, action, rng, self.spec), self.reward(h, state, action)


@dataclass(frozen=True)
class GridOracleSpec:
    """Finite deterministic MDP whose states sit at given coordinates.

    ``transitions[s, a]`` is the next state index, ``rewards[s, a]`` the reward.
    """

    points: np.ndarray
    transitions: np.ndarray
    rewards: np.ndarray
    horizon: int
    start: int = 0

    def __post_init__(self):
        S, A = self.transitions.shape
        if self.rewards.shape != (S, A):
            raise ValueError("rewards and transitions shapes differ")
        if len(self.points) != S:
            raise ValueError("one coordinate row per state required")
        if self.transitions.min() < 0 or self.transitions.max() >= S:
            raise ValueError("transitions must map grid states to grid states")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transitions.shape[1]

    @property
    def spacing(self) -> float:
        p = np.asarray(self.points, dtype=float)
        d = np.linalg.norm(p[:, None] - p[None], axis=-1)
        return float(d[~np.eye(len(p), dtype=bool)].min()) if len(p) > 1 else 1.0


def chain_spec(n_states: int = 3, horizon: int = 3, spacing: float = 1.0, goal_reward: float = 1.0) -> GridOracleSpec:
    """Deterministic line: action 0 stays, action 1 moves right; reward at the far end."""
    S = n_states
    T = np.empty((S, 2), dtype=int)
    T[:, 0] = np.arange(S)
    T[:, 1] = np.minimum(np.arange(S) + 1, S - 1)
    R = np.zeros((S, 2))
    R[S - 1, :] = goal_reward
    pts = np.column_stack([spacing * np.arange(S, dtype=float), np.zeros(S)])
    return GridOracleSpec(pts, T, R, horizon)


def square_spec(horizon: int = 4, spacing: float = 1.0) -> GridOracleSpec:
    """2x2 grid, four compass moves (clipped), reward 1 in the far corner and 0.2 for staying at start."""
    pts = spacing * np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    T = np.empty((4, 4), dtype=int)
    for s, (x, y) in enumerate([(0, 0), (1, 0), (0, 1), (1, 1)]):
        for a, (dx, dy) in enumerate(_DIRECTIONS.astype(int)):
            nx, ny = min(max(x + dx, 0), 1), min(max(y + dy, 0), 1)
            T[s, a] = nx + 2 * ny
    R = np.zeros((4, 4))
    R[3, :] = 1.0
    R[0, LEFT] = R[0, DOWN] = 0.2
    return GridOracleSpec(pts, T, R, horizon)


def grid_oracle_values(spec: GridOracleSpec) -> tuple[np.ndarray, np.ndarray]:
    """Backward DP on the true model.

    Returns ``V`` with shape (H + 1, S) and ``Q`` with shape (H, S, A); row
    ``h - 1`` holds step ``h`` and ``V[H] = 0``.
    """
    H, S, A = spec.horizon, spec.n_states, spec.n_actions
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = spec.rewards + V[h + 1][spec.transitions]
        V[h] = Q[h].max(axis=1)
    return V, Q


class GridOracleEnv:
    """EnvHandle over a :class:`GridOracleSpec`; states are the grid coordinates.

    With ``random_start`` the initial state is drawn from the seed, so
    different seeds explore from different corners.
    """

    def __init__(self, spec: GridOracleSpec, random_start: bool = False):
        self.spec = spec
        self.random_start = random_start
        self.horizon = self.spec.horizon
        self.n_actions = self.spec.n_actions
        self.reward_scale = max(1.0, float(np.abs(self.spec.rewards).max()))
        self._pts = np.asarray(self.spec.points, dtype=float)

    @property
    def state_low(self):
        return self._pts.min(axis=0)

    @property
    def state_high(self):
        return self._pts.max(axis=0)

    def index(self, state) -> int:
        return int(np.argmin(np.linalg.norm(self._pts - np.asarray(state, dtype=float), axis=1)))

    def reset(self, seed: int) -> np.ndarray:
        if self.random_start:
            return self._pts[np.random.default_rng(seed).integers(self.spec.n_states)].copy()
        return self._pts[self.spec.start].copy()

    def reward(self, h: int, state, action: int) -> float:
        return float(self.spec.rewards[self.index(state), action])

    def rewards(self, h: int, states, actions) -> np.ndarray:
        s = np.atleast_2d(states)
        idx = np.argmin(np.linalg.norm(s[:, None, :] - self._pts[None], axis=-1), axis=1)
        return self.spec.rewards[idx, np.asarray(actions, dtype=int)]

    def step(self, h: int, state, action: int, rng=None):
        s = self.index(state)
        return self._pts[self.spec.transitions[s, action]].copy(), float(self.spec.rewards[s, action])

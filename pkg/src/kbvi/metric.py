"""Geometry and episodic-MDP plumbing shared by the smoother, agents and envs.

States are real coordinate vectors, actions are indices into a finite set.
Distances on state-action pairs add a Euclidean state term and a discrete
action term.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Protocol, Sequence

import numpy as np

#: Action gap that keeps kernel weights and interpolation cones within one action.
PER_ACTION = math.inf


@dataclass(frozen=True)
class ProductMetric:
    """rho((s,a),(s',a')) = |s - s'|_2 + action_gap * [a != a'].

    ``action_gap=0`` pools every action together; ``action_gap=PER_ACTION``
    (infinity) makes pairs with different actions infinitely far apart.
    """

    action_gap: float = 0.0

    def __post_init__(self):
        if not self.action_gap >= 0:
            raise ValueError(f"action_gap must be >= 0, got {self.action_gap}")

    @property
    def per_action(self) -> bool:
        return math.isinf(self.action_gap)

    def action_term(self, a, b):
        """Vectorised discrete action distance."""
        differ = np.asarray(a) != np.asarray(b)
        if self.action_gap == 0.0:
            return np.zeros(differ.shape)
        return np.where(differ, self.action_gap, 0.0)

    def pairwise(self, states_a, actions_a, states_b, actions_b) -> np.ndarray:
        """Distance matrix of shape (len(a), len(b))."""
        xa = np.atleast_2d(np.asarray(states_a, dtype=float))
        xb = np.atleast_2d(np.asarray(states_b, dtype=float))
        if xa.shape[1] != xb.shape[1]:
            raise ValueError(f"state dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
        diff = xa[:, None, :] - xb[None, :, :]
        d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
        aa = np.asarray(actions_a).reshape(-1, 1)
        ab = np.asarray(actions_b).reshape(1, -1)
        return d + self.action_term(aa, ab)


def product_distance(p, q, metric: ProductMetric | None = None) -> float:
    """Distance between two ``(state, action)`` pairs."""
    metric = metric or ProductMetric()
    s, a = p
    t, b = q
    s = np.asarray(s, dtype=float).ravel()
    t = np.asarray(t, dtype=float).ravel()
    if s.shape != t.shape:
        raise ValueError(f"state dimension mismatch: {s.shape} vs {t.shape}")
    return float(np.linalg.norm(s - t)) + float(metric.action_term(a, b))


@dataclass(frozen=True)
class LipschitzSpec:
    lambda_r: float
    lambda_p: float
    horizon: int

    def __post_init__(self):
        if not self.lambda_r > 0:
            raise ValueError(f"lambda_r must be > 0, got {self.lambda_r}")
        if not 0 < self.lambda_p < 1:
            raise ValueError(f"lambda_p must lie in (0, 1), got {self.lambda_p}")
        if self.horizon < 1:
            raise ValueError(f"horizon must be >= 1, got {self.horizon}")


def lipschitz_L(h: int, spec: LipschitzSpec) -> float:
    """Lipschitz constant of Q*_h: sum_{h'=h}^{H} lambda_r * lambda_p^(H - h').

    Steps are 1-based.
    """
    H = spec.horizon
    if not 1 <= h <= H:
        raise ValueError(f"step {h} outside [1, {H}]")
    return float(sum(spec.lambda_r * spec.lambda_p ** (H - j) for j in range(h, H + 1)))


def lipschitz_table(spec: LipschitzSpec) -> np.ndarray:
    """L_h for h = 1..H, stored at index h - 1."""
    return np.array([lipschitz_L(h, spec) for h in range(1, spec.horizon + 1)])


class Step(NamedTuple):
    h: int
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]

    def __len__(self):
        return len(self.steps)

    @property
    def total_return(self) -> float:
        return float(sum(s.reward for s in self.steps))

    def states(self) -> np.ndarray:
        """s_1, ..., s_{H+1} stacked row-wise."""
        if not self.steps:
            return np.empty((0, 0))
        return np.vstack([s.state for s in self.steps] + [self.steps[-1].next_state])


class EnvHandle(Protocol):
    """What agents and the runner need from an environment.

    ``step`` must be a pure function of its arguments and the draws it takes
    from ``rng``; ``reward`` depends only on ``(h, state, action)``.
    """

    horizon: int
    n_actions: int
    reward_scale: float

    @property
    def state_low(self) -> np.ndarray: ...

    @property
    def state_high(self) -> np.ndarray: ...

    def reset(self, seed: int) -> np.ndarray: ...

    def reward(self, h: int, state, action: int) -> float: ...

    def step(self, h: int, state, action: int, rng: np.random.Generator) -> tuple[np.ndarray, float]: ...


Policy = Callable[[int, np.ndarray], int]


def step_rng(seed: int, episode: int, h: int) -> np.random.Generator:
    """Counter-based stream keyed by (seed, episode, step); order independent."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, episode, h])))


def run_episode(env: EnvHandle, policy: Policy, seed: int, episode: int = 0) -> Trajectory:
    """Roll out one H-step episode; bit-identical for identical arguments."""
    state = np.asarray(env.reset(seed), dtype=float)
    steps = []
    for h in range(1, env.horizon + 1):
        action = int(policy(h, state))
        if not 0 <= action < env.n_actions:
            raise ValueError(f"policy returned invalid action {action}")
        next_state, reward = env.step(h, state, action, step_rng(seed, episode, h))
        next_state = np.asarray(next_state, dtype=float)
        steps.append(Step(h, state, action, float(reward), next_state))
        state = next_state
    return Trajectory(tuple(steps))


def check_trajectory(traj: Trajectory, horizon: int, reward_scale: float) -> None:
    """Raise if a trajectory breaks the fixed-length / bounded-return contract."""
    if len(traj) != horizon:
        raise ValueError(f"trajectory has {len(traj)} steps, expected {horizon}")
    if traj.total_return > horizon * reward_scale + 1e-9:
        raise ValueError("episodic return exceeds horizon * reward_scale")


def as_points(states: Sequence) -> np.ndarray:
    return np.atleast_2d(np.asarray(states, dtype=float))

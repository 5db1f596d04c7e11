"""Kernel-smoothed optimistic value iteration agents.

All three agents share one planner (:func:`backward_induction`) and differ
only in the exploration bonus:

* ``kbvi-bucb``: Bernstein bonus built from the smoothed next-value variance.
* ``kernel-ucbvi``: Hoeffding bonus that only sees the value range.
* ``kernel-vi``: no bonus.
"""
from __future__ import annotations

import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np

from .kernel import GAUSSIAN, BufferSlice, KernelFn, SmootherParams, TransitionBuffer, weights_from_distance
from .metric import PER_ACTION, EnvHandle, LipschitzSpec, ProductMetric, Trajectory, lipschitz_L

BONUS_KINDS = ("bernstein", "hoeffding", "zero")
AGENT_BONUS = {"kbvi-bucb": "bernstein", "kernel-ucbvi": "hoeffding", "kernel-vi": "zero"}
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TheoryConstants:
    eta: float
    eta1: float
    eta2: float
    eta3: float
    eta4: float
    gamma: float
    D_delta: float
    L: tuple[float, ...]

    @property
    def L1(self) -> float:
        return self.L[0]


def make_theory_constants(delta: float, beta: float, sigma: float, H: int, K: int,
                          lambda_p: float, lambda_r: float, kernel: KernelFn = GAUSSIAN) -> TheoryConstants:
    if not 0 < delta < math.exp(-1):
        raise ValueError(f"delta must lie in (0, 1/e), got {delta}")
    if not 0 < beta <= 1:
        raise ValueError(f"beta must lie in (0, 1], got {beta}")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if H < 1 or K < 1:
        raise ValueError("H and K must be >= 1")
    spec = LipschitzSpec(lambda_r, lambda_p, H)
    L = tuple(lipschitz_L(h, spec) for h in range(1, H + 1))
    L1 = L[0]
    C1, C2 = kernel.C1, kernel.C2
    eta = math.log(2.0 / delta)
    eta1 = C1 * eta
    eta2 = 7.0 * max(C1, 1.0) * eta + beta
    eta4 = 16.0 * eta1 + 2.0 * eta2
    gamma = 4.0 * math.sqrt(math.log(H * K / beta + math.e))
    eta3 = 8.0 * lambda_p * L1 * eta * gamma
    D = (16.0 * math.sqrt(C2 * eta1 * eta / beta ** 3)
         + (C2 * eta4 + 2.0 * C2) * sigma / (H * beta ** 2)
         + lambda_p * L1 * sigma ** 2 / (K * H ** 2)
         + eta3)
    return TheoryConstants(eta, eta1, eta2, eta3, eta4, gamma, D, L)


@dataclass(frozen=True)
class BonusConfig:
    mode: str = "theory"
    scale: float = 1.0

    def __post_init__(self):
        if self.mode not in ("theory", "scaled"):
            raise ValueError(f"bonus mode must be 'theory' or 'scaled', got {self.mode!r}")
        if not self.scale > 0:
            raise ValueError("bonus scale must be > 0")

    @property
    def multiplier(self) -> float:
        return self.scale if self.mode == "scaled" else 1.0


def bernstein_bonus(v_hat, count, H_eff: float, consts: TheoryConstants, cfg: BonusConfig, sigma: float):
    """9 sqrt(V eta4 / C) + 162 H eta4 / C + sigma D_delta, times the configured multiplier."""
    v = np.asarray(v_hat, dtype=float)
    if np.any(v < 0):
        raise ValueError("variance estimate must be >= 0")
    c = np.asarray(count, dtype=float)
    b = (9.0 * np.sqrt(v * consts.eta4 / c) + 162.0 * H_eff * consts.eta4 / c
         + sigma * consts.D_delta) * cfg.multiplier
    return float(b) if np.ndim(b) == 0 else b


def hoeffding_bonus(count, H_eff: float, delta: float, sigma: float, consts: TheoryConstants, cfg: BonusConfig):
    """H sqrt(2 log(2/delta) / C) + sigma L_1, times the configured multiplier."""
    c = np.asarray(count, dtype=float)
    b = (H_eff * np.sqrt(2.0 * math.log(2.0 / delta) / c) + sigma * consts.L1) * cfg.multiplier
    return float(b) if np.ndim(b) == 0 else b


@dataclass
class StepModel:
    """Per-representative sufficient statistics of one step's data.

    With ``sum_v``/``sum_v2`` the sums of V_{h+1} and V_{h+1}^2 over each
    representative's next-state samples, the smoothed mean, variance and
    generalized count at any query only need the query-to-representative
    kernel weights.
    """

    h: int
    rep_states: np.ndarray
    rep_actions: np.ndarray
    mult: np.ndarray
    sum_v: np.ndarray
    sum_v2: np.ndarray
    params: SmootherParams
    metric: ProductMetric
    bonus: Callable[[np.ndarray, np.ndarray], np.ndarray]
    reward_fn: Callable

    def moments(self, dist: np.ndarray, q_actions) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(P V, V-hat, C) for queries with state distances ``dist`` (n_queries, n_reps)."""
        q_actions = np.asarray(q_actions).reshape(-1, 1)
        d = dist + self.metric.action_term(q_actions, self.rep_actions[None, :])
        W = weights_from_distance(d, self.params)
        counts = self.params.beta + W @ self.mult
        mean = (W @ self.sum_v) / counts
        mass = (W @ self.mult) / counts
        second = (W @ self.sum_v2) / counts
        # sum_l w~_l (v_l - m)^2 = E2 - 2 m^2 + m^2 * mass
        var = np.maximum(second - mean * mean * (2.0 - mass), 0.0)
        return mean, var, counts

    def q_tilde(self, states, actions, dist: np.ndarray | None = None):
        """r + P V_{h+1} + bonus at arbitrary (state, action) queries; also returns (counts, bonus)."""
        s = np.atleast_2d(np.asarray(states, dtype=float))
        a = np.atleast_1d(np.asarray(actions, dtype=int))
        if dist is None:
            dist = _state_dist(s, self.rep_states)
        mean, var, counts = self.moments(dist, a)
        bonus = np.asarray(self.bonus(var, counts), dtype=float)
        r = np.asarray(self.reward_fn(self.h, s, a), dtype=float)
        return r + mean + bonus, counts, bonus


def _state_dist(xa: np.ndarray, xb: np.ndarray) -> np.ndarray:
    diff = xa[:, None, :] - xb[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


@dataclass
class StepTable:
    """Optimistic values at one step's representatives.

    ``v_next`` holds the clipped V_{h+1} at every stored next-state sample of
    this step, aligned with the buffer's sample order. ``model`` (if set)
    evaluates the kernel estimate Q~_h away from the representatives.
    """

    states: np.ndarray
    actions: np.ndarray
    q_tilde: np.ndarray
    v_next: np.ndarray
    counts: np.ndarray
    bonus: np.ndarray
    model: StepModel | None = None

    def __len__(self):
        return len(self.actions)


def _empty_slice(dim: int) -> BufferSlice:
    return BufferSlice(np.zeros((0, dim)), np.zeros(0, dtype=int), np.zeros(0, dtype=int), np.zeros((0, dim)))


def _empty_table(dim: int, model: StepModel | None = None) -> StepTable:
    z = np.zeros(0)
    return StepTable(np.zeros((0, dim)), np.zeros(0, dtype=int), z, z, z, z, model)


@dataclass
class ValueTables:
    steps: list[StepTable]
    L: tuple[float, ...]
    H_cap: float
    n_actions: int
    metric: ProductMetric
    query_cone: bool = False
    range_to_go: bool = False

    def __getitem__(self, h: int) -> StepTable:
        return self.steps[h - 1]

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def q_values(self, h: int, states) -> np.ndarray:
        """(n_states, n_actions) Q_h: Lipschitz upper extension of the step's Q~.

        With ``query_cone`` the kernel estimate at the query itself joins the
        minimum, i.e. Q_h(s, a) = min(Q~_h(s, a), min_l [Q~_l + L_h rho]).
        """
        s = np.atleast_2d(np.asarray(states, dtype=float))
        t = self[h]
        q = interpolate_q_batch(s, t, self.L[h - 1], self.H_cap, self.n_actions, self.metric)
        if self.query_cone and t.model is not None:
            dist = _state_dist(s, t.model.rep_states)
            for a in range(self.n_actions):
                est, _, _ = t.model.q_tilde(s, np.full(len(s), a), dist)
                q[:, a] = np.minimum(q[:, a], est)
        return q

    def cap(self, h: int) -> float:
        """Upper clip for V_h: H_cap, or its share (H-h+1)/H of the horizon with ``range_to_go``."""
        if self.range_to_go:
            return self.H_cap * (self.horizon - h + 1) / self.horizon
        return self.H_cap

    def values(self, h: int, states) -> np.ndarray:
        """V_h = clip(max_a Q_h, 0, cap(h)); V_{H+1} = 0."""
        s = np.atleast_2d(np.asarray(states, dtype=float))
        if h == self.horizon + 1:
            return np.zeros(len(s))
        return np.clip(self.q_values(h, s).max(axis=1), 0.0, self.cap(h))


def interpolate_q_batch(states, table: StepTable, L_h: float, default: float, n_actions: int,
                        metric: ProductMetric) -> np.ndarray:
    """min_l [q_tilde_l + L_h rho((s, a), point_l)] for every state and action.

    An empty table gives ``default`` everywhere. Under the per-action metric
    an action with no stored point of its own is infinitely far from the data,
    so its cone minimum is +inf (V still clips it to the cap).
    """
    s = np.atleast_2d(np.asarray(states, dtype=float))
    out = np.full((len(s), n_actions), float(default))
    if len(table) == 0:
        return out
    cones = table.q_tilde[None, :] + L_h * _state_dist(s, table.states)
    if metric.per_action:
        for a in range(n_actions):
            mask = table.actions == a
            out[:, a] = cones[:, mask].min(axis=1) if mask.any() else math.inf
        return out
    for a in range(n_actions):
        gap = L_h * metric.action_term(table.actions, a)
        out[:, a] = (cones + gap[None, :]).min(axis=1)
    return out


def interpolate_q(query, table: StepTable, L_h: float, default_if_empty: float,
                  metric: ProductMetric = ProductMetric()) -> float:
    """Lipschitz upper extension of q_tilde evaluated at one ``(state, action)``."""
    state, action = query
    n_actions = max(int(action) + 1, int(table.actions.max()) + 1 if len(table) else 1)
    return float(interpolate_q_batch(state, table, L_h, default_if_empty, n_actions, metric)[0, int(action)])


def backward_induction(buffer: TransitionBuffer, k: int, params: SmootherParams, consts: TheoryConstants,
                       cfg: BonusConfig, bonus_kind: str, *, reward_fn, n_actions: int, H_cap: float,
                       metric: ProductMetric = ProductMetric(), delta: float = 0.1,
                       H_eff: float | None = None, query_cone: bool = False,
                       range_to_go: bool = False) -> ValueTables:
    """Rebuild optimistic Q-tables from the data of episodes 1..k-1.

    ``reward_fn(h, states, actions)`` returns the known rewards as an array.
    ``H_eff`` is the value range fed to the bonuses; it defaults to ``H_cap``.
    With ``query_cone`` every step keeps a :class:`StepModel` so Q~ can be
    evaluated at the query itself (see :meth:`ValueTables.q_values`).
    With ``range_to_go`` the bonus at step h uses the range of V_{h+1},
    H_eff * (H - h) / H, and V_h is capped at H_cap * (H - h + 1) / H.
    """
    if bonus_kind not in BONUS_KINDS:
        raise ValueError(f"unknown bonus kind {bonus_kind!r}")
    H = buffer.horizon
    H_eff = H_cap if H_eff is None else H_eff

    def make_bonus(h_range):
        def bonus(var, counts):
            if bonus_kind == "bernstein":
                return bernstein_bonus(var, counts, h_range, consts, cfg, params.sigma)
            if bonus_kind == "hoeffding":
                return hoeffding_bonus(counts, h_range, delta, params.sigma, consts, cfg)
            return np.zeros(np.shape(counts))
        return bonus

    tables = ValueTables([_empty_table(buffer.dim) for _ in range(H)], consts.L, H_cap, n_actions, metric,
                         query_cone, range_to_go)
    for h in range(H, 0, -1):
        bonus = make_bonus(H_eff * (H - h) / H if range_to_go else H_eff)
        # episode 1 plans from no data at all
        view = buffer[h] if k > 1 else _empty_slice(buffer.dim)
        v_next = tables.values(h + 1, view.sample_next) if view.n_samples else np.zeros(0)
        mult = view.multiplicity.astype(float)
        model = StepModel(h, view.rep_states, view.rep_actions, mult,
                          np.bincount(view.sample_rep, weights=v_next, minlength=view.n_reps),
                          np.bincount(view.sample_rep, weights=v_next * v_next, minlength=view.n_reps),
                          params, metric, bonus, reward_fn)
        if view.n_reps == 0:
            tables.steps[h - 1] = _empty_table(buffer.dim, model if query_cone else None)
            continue
        q, counts, b = model.q_tilde(view.rep_states, view.rep_actions)
        tables.steps[h - 1] = StepTable(view.rep_states, view.rep_actions, q, v_next, counts, b,
                                        model if query_cone else None)
    return tables


@dataclass(frozen=True)
class AgentConfig:
    sigma: float = 0.025
    beta: float = 0.05
    delta: float = 0.1
    lambda_r: float = 10.0
    lambda_p: float = 0.9
    merge_threshold: float = 0.02
    action_gap: float = PER_ACTION
    bonus_mode: str = "scaled"
    bonus_scale: float = 0.01
    episodes: int = 300
    bonus_range: float = 0.0
    query_cone: bool = False
    range_to_go: bool = False

    def bonus_config(self) -> BonusConfig:
        return BonusConfig(self.bonus_mode, self.bonus_scale)


class KernelAgent:
    """Greedy agent over kernel-smoothed optimistic Q estimates.

    ``act`` in episode k uses tables planned from episodes < k; call
    ``observe`` then ``plan`` between episodes.
    """

    def __init__(self, env: EnvHandle, config: AgentConfig = AgentConfig(), kind: str = "kbvi-bucb"):
        if kind not in AGENT_BONUS:
            raise ValueError(f"unknown agent {kind!r}; expected one of {tuple(AGENT_BONUS)}")
        self.env = env
        self.kind = kind
        self.bonus_kind = AGENT_BONUS[kind]
        self.config = config
        self.H = env.horizon
        self.H_cap = env.horizon * env.reward_scale
        self.metric = ProductMetric(config.action_gap)
        self.params = SmootherParams(config.sigma, config.beta)
        self.consts = make_theory_constants(config.delta, config.beta, config.sigma, self.H,
                                            config.episodes, config.lambda_p, config.lambda_r)
        dim = len(np.asarray(env.state_low))
        self.buffer = TransitionBuffer(self.H, dim, config.merge_threshold)
        self.k = 1
        self.tables = self._plan_tables()

    def _reward_fn(self, h, states, actions):
        if hasattr(self.env, "rewards"):
            return self.env.rewards(h, states, actions)
        return np.array([self.env.reward(h, s, int(a)) for s, a in zip(states, actions)])

    def _plan_tables(self) -> ValueTables:
        return backward_induction(self.buffer, self.k, self.params, self.consts, self.config.bonus_config(),
                                  self.bonus_kind, reward_fn=self._reward_fn, n_actions=self.env.n_actions,
                                  H_cap=self.H_cap, metric=self.metric, delta=self.config.delta,
                                  H_eff=self.config.bonus_range or None, query_cone=self.config.query_cone,
                                  range_to_go=self.config.range_to_go)

    def act(self, h: int, state) -> int:
        q = self.tables.q_values(h, state)[0]
        return int(np.argmax(q))

    def value(self, h: int, state) -> float:
        return float(self.tables.values(h, state)[0])

    def observe(self, trajectory: Trajectory) -> None:
        if len(trajectory) != self.H:
            raise ValueError(f"expected a length-{self.H} trajectory")
        for st in trajectory.steps:
            self.buffer.merge_or_insert(st.h, st.state, st.action, st.next_state)
        self.k += 1

    def plan(self) -> ValueTables:
        self.tables = self._plan_tables()
        return self.tables

    def save(self, path) -> None:
        """Versioned flat checkpoint: header of parameters, then one CSV block per step."""
        out = io.StringIO()
        out.write(f"# kbvi-agent-checkpoint v{CHECKPOINT_VERSION}\n")
        out.write(f"agent={self.kind}\nk={self.k}\n")
        for key, val in asdict(self.config).items():
            out.write(f"{key}={val!r}\n")
        for h in range(1, self.H + 1):
            out.write(f"[h={h}]\n")
            v = self.buffer[h]
            for rep, nxt in zip(v.sample_rep, v.sample_next):
                vals = [*map(float, v.rep_states[rep]), int(v.rep_actions[rep]), *map(float, nxt)]
                out.write(",".join(repr(x) for x in vals) + "\n")
        Path(path).write_text(out.getvalue())

    @classmethod
    def load(cls, path, env: EnvHandle) -> "KernelAgent":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != f"# kbvi-agent-checkpoint v{CHECKPOINT_VERSION}":
            raise ValueError(f"{path}: not a v{CHECKPOINT_VERSION} agent checkpoint")
        header, i = {}, 1
        while i < len(lines) and not lines[i].startswith("[h="):
            key, _, val = lines[i].partition("=")
            header[key] = val
            i += 1
        types = {f.name: f.type for f in fields(AgentConfig)}
        kwargs = {}
        for key in types:
            raw = header[key]
            if key == "bonus_mode":
                kwargs[key] = raw.strip("'")
            elif key in ("query_cone", "range_to_go"):
                kwargs[key] = raw == "True"
            else:
                kwargs[key] = int(raw) if key == "episodes" else float(raw)
        agent = cls(env, AgentConfig(**kwargs), header["agent"])
        dim = agent.buffer.dim
        h = 0
        for line in lines[i:]:
            if line.startswith("[h="):
                h = int(line[3:-1])
                continue
            vals = [float(x) for x in line.split(",")]
            agent.buffer.add_raw(h, vals[:dim], int(vals[dim]), vals[dim + 1:])
        agent.k = int(header["k"])
        agent.plan()
        return agent

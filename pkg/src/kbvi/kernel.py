"""Nadaraya-Watson transition estimates over per-step sample buffers."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .metric import ProductMetric, product_distance

WEIGHT_CUTOFF = 1e-12


@dataclass(frozen=True)
class KernelFn:
    """Gaussian profile g(z) = exp(-z^2 / 2) with its Assumption-2 constants."""

    C1: float = 1.0
    C2: float = math.exp(-0.5)  # sup |g'| attained at z = 1

    @property
    def g4(self) -> float:
        return math.exp(-8.0)

    def __call__(self, z):
        return np.exp(-0.5 * np.square(z))


GAUSSIAN = KernelFn()


def kernel_eval(z: float, k: KernelFn = GAUSSIAN) -> float:
    if not z >= 0:
        raise ValueError(f"kernel argument must be >= 0, got {z}")
    return float(k(z))


@dataclass(frozen=True)
class SmootherParams:
    sigma: float
    beta: float = 0.05
    kernel: KernelFn = GAUSSIAN

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must lie in (0, 1], got {self.beta}")


def weights_from_distance(d, params: SmootherParams):
    """g(d / sigma) elementwise, with weights below WEIGHT_CUTOFF set to exactly 0."""
    w = params.kernel(np.asarray(d, dtype=float) / params.sigma)
    return np.where(w < WEIGHT_CUTOFF, 0.0, w)


def raw_weight(query, sample, params: SmootherParams, metric: ProductMetric = ProductMetric()) -> float:
    """g(rho(query, sample) / sigma) for two ``(state, action)`` pairs."""
    return float(weights_from_distance(product_distance(query, sample, metric), params))


@dataclass
class BufferSlice:
    """Immutable array view of one step's buffer.

    ``rep_states``/``rep_actions`` are the representative query points; each
    next-state sample ``l`` hangs off representative ``sample_rep[l]``.
    """

    rep_states: np.ndarray
    rep_actions: np.ndarray
    sample_rep: np.ndarray
    sample_next: np.ndarray

    @property
    def n_reps(self) -> int:
        return len(self.rep_actions)

    @property
    def n_samples(self) -> int:
        return len(self.sample_rep)

    @property
    def multiplicity(self) -> np.ndarray:
        return np.bincount(self.sample_rep, minlength=self.n_reps)

    def sample_points(self):
        """Query point of every sample (its representative), sample-aligned."""
        return self.rep_states[self.sample_rep], self.rep_actions[self.sample_rep]

    def raw_weights(self, q_states, q_actions, params: SmootherParams, metric: ProductMetric) -> np.ndarray:
        """(n_queries, n_samples) raw kernel weights."""
        q_states = np.atleast_2d(np.asarray(q_states, dtype=float))
        q_actions = np.atleast_1d(q_actions)
        if self.n_samples == 0:
            return np.zeros((len(q_states), 0))
        d = metric.pairwise(q_states, q_actions, self.rep_states, self.rep_actions)
        return weights_from_distance(d, params)[:, self.sample_rep]


def _query_arrays(query):
    s, a = query
    return np.atleast_2d(np.asarray(s, dtype=float)), np.atleast_1d(a)


def generalized_count(query, buffer_h: BufferSlice, params: SmootherParams,
                      metric: ProductMetric = ProductMetric()) -> float:
    """C = beta + sum_l w_l(query)."""
    w = buffer_h.raw_weights(*_query_arrays(query), params, metric)[0]
    return params.beta + float(w.sum())


def normalized_weights(query, buffer_h: BufferSlice, params: SmootherParams,
                       metric: ProductMetric = ProductMetric()) -> np.ndarray:
    """w_l / (beta + sum_n w_n), one entry per stored next-state sample."""
    w = buffer_h.raw_weights(*_query_arrays(query), params, metric)[0]
    return w / (params.beta + w.sum())


def normalized_weight_matrix(q_states, q_actions, buffer_h: BufferSlice, params: SmootherParams,
                             metric: ProductMetric) -> tuple[np.ndarray, np.ndarray]:
    """Batched normalized weights and generalized counts for many queries."""
    w = buffer_h.raw_weights(q_states, q_actions, params, metric)
    counts = params.beta + w.sum(axis=1)
    return w / counts[:, None], counts


def _check_lengths(f_values, weights):
    f = np.asarray(f_values, dtype=float)
    w = np.asarray(weights, dtype=float)
    if f.shape[-1:] != w.shape[-1:]:
        raise ValueError(f"length mismatch: {f.shape[-1:]} values vs {w.shape[-1:]} weights")
    return f, w


def estimate_expectation(f_values, weights):
    """Deficit-distribution mean sum_l w_l f(s'_l). Works row-wise on 2-D weights."""
    f, w = _check_lengths(f_values, weights)
    out = w @ f
    return float(out) if np.ndim(out) == 0 else out


def estimate_variance(f_values, weights):
    """sum_l w_l (f(s'_l) - Pf)^2 with Pf the deficit mean."""
    f, w = _check_lengths(f_values, weights)
    mean = w @ f
    if w.ndim == 1:
        return float(w @ np.square(f - mean))
    return np.einsum("ij,ij->i", w, np.square(f[None, :] - mean[:, None]))


@dataclass
class _StepBuffer:
    rep_states: list = field(default_factory=list)
    rep_actions: list = field(default_factory=list)
    sample_rep: list = field(default_factory=list)
    sample_next: list = field(default_factory=list)
    _view: BufferSlice | None = None

    def view(self, dim: int) -> BufferSlice:
        if self._view is None:
            self._view = BufferSlice(
                rep_states=np.array(self.rep_states, dtype=float).reshape(-1, dim),
                rep_actions=np.array(self.rep_actions, dtype=int),
                sample_rep=np.array(self.sample_rep, dtype=int),
                sample_next=np.array(self.sample_next, dtype=float).reshape(-1, dim),
            )
        return self._view


class TransitionBuffer:
    """Per-step store of (query point, next state) samples.

    Query points within ``merge_threshold`` of an existing representative with
    the same action are snapped to it; every next-state sample is kept.
    """

    def __init__(self, horizon: int, dim: int, merge_threshold: float = 0.0):
        if merge_threshold < 0:
            raise ValueError("merge_threshold must be >= 0")
        self.horizon = horizon
        self.dim = dim
        self.merge_threshold = merge_threshold
        self._steps = [_StepBuffer() for _ in range(horizon)]

    def __getitem__(self, h: int) -> BufferSlice:
        """Snapshot of step ``h`` (1-based)."""
        return self._steps[h - 1].view(self.dim)

    def n_samples(self, h: int | None = None) -> int:
        if h is None:
            return sum(len(b.sample_rep) for b in self._steps)
        return len(self._steps[h - 1].sample_rep)

    def n_reps(self, h: int) -> int:
        return len(self._steps[h - 1].rep_actions)

    def merge_or_insert(self, h: int, state, action: int, next_state) -> int:
        """Add one transition at step ``h``; return the representative index used."""
        buf = self._steps[h - 1]
        s = np.asarray(state, dtype=float).reshape(self.dim)
        rep = -1
        if buf.rep_actions:
            view = buf.view(self.dim)
            same = np.flatnonzero(view.rep_actions == action)
            if same.size:
                d = np.linalg.norm(view.rep_states[same] - s, axis=1)
                j = int(np.argmin(d))
                if d[j] <= self.merge_threshold:
                    rep = int(same[j])
        if rep < 0:
            rep = len(buf.rep_actions)
            buf.rep_states.append(s.copy())
            buf.rep_actions.append(int(action))
        buf.sample_rep.append(rep)
        buf.sample_next.append(np.asarray(next_state, dtype=float).reshape(self.dim).copy())
        buf._view = None
        return rep

    def add_raw(self, h: int, query_state, action: int, next_state) -> None:
        """Append a sample whose query point is taken verbatim (used by loaders)."""
        buf = self._steps[h - 1]
        q = np.asarray(query_state, dtype=float).reshape(self.dim)
        view = buf.view(self.dim)
        match = np.flatnonzero((view.rep_actions == action) & np.all(view.rep_states == q, axis=1)) \
            if view.n_reps else np.empty(0, dtype=int)
        if match.size:
            rep = int(match[0])
        else:
            rep = len(buf.rep_actions)
            buf.rep_states.append(q.copy())
            buf.rep_actions.append(int(action))
        buf.sample_rep.append(rep)
        buf.sample_next.append(np.asarray(next_state, dtype=float).reshape(self.dim).copy())
        buf._view = None

    def rows(self):
        """(h, query coords, action, next coords) per sample, in insertion order."""
        for h in range(1, self.horizon + 1):
            v = self[h]
            for rep, nxt in zip(v.sample_rep, v.sample_next):
                yield h, v.rep_states[rep], int(v.rep_actions[rep]), nxt

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["h"] + [f"q{i}" for i in range(self.dim)] + ["action"] + [f"n{i}" for i in range(self.dim)])
        for h, q, a, n in self.rows():
            w.writerow([h, *map(repr, map(float, q)), a, *map(repr, map(float, n))])

    @classmethod
    def read_csv(cls, fh, horizon: int, merge_threshold: float = 0.0) -> "TransitionBuffer":
        reader = csv.reader(fh)
        header = next(reader)
        dim = (len(header) - 2) // 2
        buf = cls(horizon, dim, merge_threshold)
        for row in reader:
            if not row:
                continue
            h = int(row[0])
            q = [float(x) for x in row[1:1 + dim]]
            a = int(row[1 + dim])
            n = [float(x) for x in row[2 + dim:]]
            buf.add_raw(h, q, a, n)
        return buf

    def dump(self, path) -> None:
        with Path(path).open("w", newline="") as fh:
            self.write_csv(fh)

    @classmethod
    def load(cls, path, horizon: int, merge_threshold: float = 0.0) -> "TransitionBuffer":
        with Path(path).open(newline="") as fh:
            return cls.read_csv(fh, horizon, merge_threshold)


def merge_or_insert(point, next_state, buffer: TransitionBuffer, h: int) -> int:
    """Functional alias of :meth:`TransitionBuffer.merge_or_insert`."""
    state, action = point
    return buffer.merge_or_insert(h, state, action, next_state)

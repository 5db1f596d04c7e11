"""Experiment runner, aggregation, oracle checks and the ``kbvi`` command line.

Config files are flat ``key = value`` text; ``#`` starts a comment. Unknown
keys are rejected. See :class:`RunConfig` for the keys and their defaults.
"""
from __future__ import annotations

import argparse
import csv
import itertools
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np

from .agents import AGENT_BONUS, AgentConfig, KernelAgent, make_theory_constants
from .concentration import DEFAULT_FAMILIES, coverage_table
from .envs import VARIANTS, GridOracleEnv, GridOracleSpec, PuddleWorld, chain_spec, grid_oracle_values, \
    make_variant, square_spec
from .kernel import SmootherParams, TransitionBuffer, estimate_expectation, normalized_weight_matrix
from .metric import PER_ACTION, ProductMetric, run_episode

CSV_HEADER = ("run_id", "agent", "seed", "episode", "return", "wall_ms")
SWEEP_KEYS = ("sigma", "bonus_scale", "lambda_r", "lambda_p")


@dataclass(frozen=True)
class RunConfig:
    variant: str = "standard"
    agent: str = "kbvi-bucb"
    seeds: tuple[int, ...] = tuple(range(8))
    episodes: int = 300
    horizon: int = 50
    sigma: float = 0.025
    beta: float = 0.05
    delta: float = 0.1
    bonus_mode: str = "scaled"
    bonus_scale: float = 1e-5
    bonus_range: float = 50.0
    lambda_r: float = 500.0
    lambda_p: float = 0.5
    merge_threshold: float = 0.02
    action_gap: float = PER_ACTION
    noise_std: float = 0.01
    out: str = "runs"
    query_cone: bool = False
    range_to_go: bool = False
    workers: int = 1
    timing: bool = False

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.agent not in AGENT_BONUS:
            raise ValueError(f"unknown agent {self.agent!r}; expected one of {tuple(AGENT_BONUS)}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        # surface range errors from the downstream modules now, not mid-run
        self.agent_config()
        self.env_spec()

    @property
    def run_id(self) -> str:
        return f"{self.variant}_{self.agent}"

    def env_spec(self):
        return make_variant(self.variant, horizon=self.horizon, noise_std=self.noise_std)

    def agent_config(self) -> AgentConfig:
        cfg = AgentConfig(sigma=self.sigma, beta=self.beta, delta=self.delta, lambda_r=self.lambda_r,
                          lambda_p=self.lambda_p, merge_threshold=self.merge_threshold,
                          action_gap=self.action_gap, bonus_mode=self.bonus_mode,
                          bonus_scale=self.bonus_scale, episodes=self.episodes, bonus_range=self.bonus_range,
                          query_cone=self.query_cone, range_to_go=self.range_to_go)
        cfg.bonus_config()
        SmootherParams(cfg.sigma, cfg.beta)
        ProductMetric(cfg.action_gap)
        make_theory_constants(cfg.delta, cfg.beta, cfg.sigma, self.horizon, cfg.episodes, cfg.lambda_p,
                              cfg.lambda_r)
        return cfg


def _parse_bool(raw: str) -> bool:
    low = raw.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_seeds(raw: str) -> tuple[int, ...]:
    """``0..7`` (inclusive range) or a comma list."""
    if ".." in raw:
        lo, hi = raw.split("..")
        return tuple(range(int(lo), int(hi) + 1))
    return tuple(int(x) for x in raw.split(",") if x.strip())


def _parse_value(key: str, raw: str):
    kind = {f.name: f.type for f in fields(RunConfig)}[key]
    if key == "seeds":
        return _parse_seeds(raw)
    if kind == "bool":
        return _parse_bool(raw)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return math.inf if raw.lower() in ("inf", "per-action") else float(raw)
    return raw


def read_config_text(text: str) -> dict[str, str]:
    """Raw key -> value strings; rejects unknown and duplicate keys."""
    known = {f.name for f in fields(RunConfig)}
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        if key not in known:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def config_from_mapping(raw: dict[str, str], **overrides) -> RunConfig:
    values = {k: _parse_value(k, v) for k, v in raw.items()}
    values.update(overrides)
    return RunConfig(**values)


def load_config(path) -> RunConfig:
    return config_from_mapping(read_config_text(Path(path).read_text()))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        val = getattr(cfg, f.name)
        if f.name == "seeds":
            val = ",".join(map(str, val))
        elif isinstance(val, bool):
            val = str(val).lower()
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


class EpisodeRecord(NamedTuple):
    run_id: str
    agent: str
    seed: int
    episode: int
    ret: float
    wall_ms: float


def _run_seed(cfg: RunConfig, seed: int) -> list[EpisodeRecord]:
    env = PuddleWorld(cfg.env_spec())
    agent = KernelAgent(env, cfg.agent_config(), cfg.agent)
    out = []
    for k in range(cfg.episodes):
        t0 = time.perf_counter()
        traj = run_episode(env, agent.act, seed, k)
        agent.observe(traj)
        agent.plan()
        wall = (time.perf_counter() - t0) * 1000.0 if cfg.timing else 0.0
        out.append(EpisodeRecord(cfg.run_id, cfg.agent, seed, k + 1, traj.total_return, wall))
    return out


def run_experiment(cfg: RunConfig) -> Iterator[EpisodeRecord]:
    """One fresh agent per seed, K act/observe/plan rounds each.

    Seeds may run in parallel (``workers``); records always come out sorted
    by (seed, episode), so the output does not depend on scheduling.
    """
    if cfg.workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            per_seed = list(pool.map(_run_seed, itertools.repeat(cfg), cfg.seeds))
    else:
        per_seed = [_run_seed(cfg, s) for s in cfg.seeds]
    records = sorted(itertools.chain.from_iterable(per_seed), key=lambda r: (r.seed, r.episode))
    yield from records


def _fmt(x: float) -> str:
    return repr(float(x))


def write_records(records: Iterable[EpisodeRecord], path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in records:
            w.writerow([r.run_id, r.agent, r.seed, r.episode, _fmt(r.ret), _fmt(r.wall_ms)])
            n += 1
    return n


def read_records(path) -> list[EpisodeRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        out = []
        for row in reader:
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}: malformed row {row}")
            out.append(EpisodeRecord(row[0], row[1], int(row[2]), int(row[3]), float(row[4]), float(row[5])))
    return out


@dataclass
class Curve:
    """Across-seed statistics for one run_id."""

    run_id: str
    agent: str
    seeds: tuple[int, ...]
    returns: np.ndarray          # (n_seeds, K), rows in seed order
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.mean = self.returns.mean(axis=0)
        self.std = self.returns.std(axis=0)

    @property
    def episodes(self) -> int:
        return self.returns.shape[1]

    def window(self, which: str) -> np.ndarray:
        """Per-seed mean over the first or last 10% of episodes (at least one)."""
        n = max(1, self.episodes // 10)
        if which == "first":
            return self.returns[:, :n].mean(axis=1)
        if which == "last":
            return self.returns[:, -n:].mean(axis=1)
        raise ValueError(f"unknown window {which!r}")


def aggregate(records: Iterable[EpisodeRecord]) -> dict[str, Curve]:
    """Per-episode mean and population std across seeds, keyed by run_id.

    Every seed of a run must report exactly the episodes 1..K.
    """
    groups: dict[str, dict[int, dict[int, float]]] = {}
    agents: dict[str, str] = {}
    for r in records:
        per_seed = groups.setdefault(r.run_id, {}).setdefault(r.seed, {})
        if r.episode in per_seed:
            raise ValueError(f"{r.run_id}: duplicate record for seed {r.seed}, episode {r.episode}")
        per_seed[r.episode] = r.ret
        agents.setdefault(r.run_id, r.agent)
    out = {}
    for run_id, by_seed in groups.items():
        lengths = {len(eps) for eps in by_seed.values()}
        if len(lengths) != 1:
            raise ValueError(f"{run_id}: ragged input, seeds report {sorted(lengths)} episodes")
        K = lengths.pop()
        seeds = tuple(sorted(by_seed))
        for s in seeds:
            if sorted(by_seed[s]) != list(range(1, K + 1)):
                raise ValueError(f"{run_id}: seed {s} does not cover episodes 1..{K}")
        returns = np.array([[by_seed[s][k] for k in range(1, K + 1)] for s in seeds], dtype=float)
        out[run_id] = Curve(run_id, agents[run_id], seeds, returns)
    return out


def pooled_std(a: np.ndarray, b: np.ndarray) -> float:
    return math.sqrt((np.var(a) + np.var(b)) / 2.0)


def write_summary(curves: dict[str, Curve], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path, window_path = out_dir / "summary.csv", out_dir / "windows.csv"
    with curve_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run_id", "agent", "episode", "mean", "std", "n_seeds"))
        for c in curves.values():
            for k in range(c.episodes):
                w.writerow([c.run_id, c.agent, k + 1, _fmt(c.mean[k]), _fmt(c.std[k]), len(c.seeds)])
    with window_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("run_id", "agent", "window", "mean", "std", "n_seeds"))
        for c in curves.values():
            for which in ("first", "last"):
                vals = c.window(which)
                w.writerow([c.run_id, c.agent, which, _fmt(vals.mean()), _fmt(vals.std()), len(c.seeds)])
    return curve_path, window_path


def oracle_check(spec: GridOracleSpec, sigma_ratio: float = 0.01, beta: float = 1e-8,
                 episodes: int | None = None) -> float:
    """Largest gap between kernel and frequency-count estimates of E[V*_{h+1}].

    Scripted episodes start from every state in turn and cycle through the
    actions so every (state, action) pair is visited. The kernel uses the
    per-action metric with bandwidth ``sigma_ratio * spacing``; in the
    tabular limit it must reproduce the empirical next-value means.
    """
    if not spec.spacing > 0:
        raise ValueError("grid spacing must be > 0")
    env = GridOracleEnv(spec)
    V, _ = grid_oracle_values(spec)
    S, A, H = spec.n_states, spec.n_actions, spec.horizon
    pts = np.asarray(spec.points, dtype=float)
    n_eps = 2 * S * A if episodes is None else episodes
    buf = TransitionBuffer(H, pts.shape[1])
    for e in range(n_eps):
        s = pts[e % S]
        for h in range(1, H + 1):
            a = (e // S + h) % A
            nxt, _ = env.step(h, s, a)
            buf.merge_or_insert(h, s, a, nxt)
            s = nxt
    params = SmootherParams(sigma_ratio * spec.spacing, beta)
    metric = ProductMetric(PER_ACTION)
    worst = 0.0
    for h in range(1, H + 1):
        view = buf[h]
        if view.n_samples == 0:
            continue
        f = V[h, [env.index(x) for x in view.sample_next]]
        w, _ = normalized_weight_matrix(view.rep_states, view.rep_actions, view, params, metric)
        kernel_est = estimate_expectation(f, w)
        tabular = np.bincount(view.sample_rep, weights=f, minlength=view.n_reps) / view.multiplicity
        worst = max(worst, float(np.abs(kernel_est - tabular).max()))
    return worst


ORACLE_SPECS = {"chain": chain_spec, "square": square_spec}


# ---------------------------------------------------------------- CLI


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", default=None, help="output directory")
    p.add_argument("--seed-base", type=int, default=None, help="shift every seed by this amount")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kbvi", description="Kernel-smoothed optimistic value iteration experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    p = sub.add_parser("run", help="run one config, write one CSV per run")
    p.add_argument("--config", required=True)
    _common(p)
    p = sub.add_parser("sweep", help="grid over comma-separated sigma / bonus_scale / lambda_r / lambda_p values")
    p.add_argument("--config", required=True)
    _common(p)
    p = sub.add_parser("verify-bernstein", help="Monte-Carlo coverage of the empirical Bernstein bound")
    p.add_argument("--trials", type=int, default=10_000)
    p.add_argument("--config", default=None, help="unused; accepted for symmetry")
    _common(p)
    p = sub.add_parser("oracle-check", help="kernel vs frequency-count estimates on the grid oracles")
    p.add_argument("--sigma-ratio", type=float, default=0.01)
    p.add_argument("--beta", type=float, default=1e-8)
    p.add_argument("--tol", type=float, default=None, help="exit 1 if any deviation exceeds this")
    p.add_argument("--config", default=None, help="unused; accepted for symmetry")
    _common(p)
    p = sub.add_parser("aggregate", help="episode CSVs in, summary.csv and windows.csv out")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--config", default=None, help="unused; accepted for symmetry")
    _common(p)
    return parser


def _shift(cfg: RunConfig, seed_base: int | None) -> RunConfig:
    return cfg if not seed_base else replace(cfg, seeds=tuple(s + seed_base for s in cfg.seeds))


def _cmd_run(args) -> int:
    cfg = _shift(load_config(args.config), args.seed_base)
    out = Path(args.out or cfg.out)
    path = out / f"{cfg.run_id}.csv"
    n = write_records(run_experiment(cfg), path)
    print(f"{path}: {n} records")
    return 0


def _cmd_sweep(args) -> int:
    raw = read_config_text(Path(args.config).read_text())
    axes = {k: [v.strip() for v in raw[k].split(",")] for k in SWEEP_KEYS if k in raw}
    base = {k: v for k, v in raw.items() if k not in axes}
    # validate every grid point before running any
    grid = []
    for combo in itertools.product(*axes.values()):
        point = dict(zip(axes, combo))
        grid.append((point, _shift(config_from_mapping({**base, **point}), args.seed_base)))
    out = Path(args.out or grid[0][1].out)
    for point, cfg in grid:
        tag = "_".join(f"{k}={v}" for k, v in point.items())
        path = out / (f"{cfg.run_id}_{tag}.csv" if tag else f"{cfg.run_id}.csv")
        n = write_records(run_experiment(cfg), path)
        print(f"{path}: {n} records")
    return 0


def _cmd_verify(args) -> int:
    rows = coverage_table(DEFAULT_FAMILIES, trials=args.trials, seed=args.seed_base or 0)
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "coverage.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("family", "n", "delta", "trials", "rate", "budget", "slack", "passed"))
        for r in rows:
            w.writerow([r.family, r.n, r.delta, r.trials, _fmt(r.rate), _fmt(r.budget), _fmt(r.slack),
                        int(r.passed)])
    failed = [r for r in rows if not r.passed]
    print(f"{path}: {len(rows)} cells, {len(failed)} over budget")
    return 1 if failed else 0


def _cmd_oracle(args) -> int:
    lines = []
    bad = False
    for name, make in ORACLE_SPECS.items():
        dev = oracle_check(make(), args.sigma_ratio, args.beta)
        bad |= args.tol is not None and dev > args.tol
        lines.append(f"{name},{args.sigma_ratio!r},{args.beta!r},{dev!r}")
    text = "spec,sigma_ratio,beta,max_deviation\n" + "\n".join(lines) + "\n"
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.csv").write_text(text)
    print(text, end="")
    return 1 if bad else 0


def _cmd_aggregate(args) -> int:
    records = []
    for path in args.inputs:
        records.extend(read_records(path))
    curves = aggregate(records)
    paths = write_summary(curves, args.out or ".")
    for c in curves.values():
        first, last = c.window("first"), c.window("last")
        print(f"{c.run_id}: first10% {first.mean():.2f} ± {first.std():.2f}, "
              f"last10% {last.mean():.2f} ± {last.std():.2f} ({len(c.seeds)} seeds)")
    print(f"wrote {paths[0]} and {paths[1]}")
    return 0


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "verify-bernstein": _cmd_verify,
            "oracle-check": _cmd_oracle, "aggregate": _cmd_aggregate}


def cli(argv: list[str] | None = None) -> int:
    """Exit codes: 0 ok, 1 usage or validation failure, 2 I/O failure."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(str(e).rstrip(), file=sys.stderr)
        return 1
    except OSError as e:
        print(f"kbvi: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"kbvi: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())

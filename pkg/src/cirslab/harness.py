"""Experiment orchestration: pre-learn the user model, plan, evaluate every epoch."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import env as envmod
from .baselines import StaticPolicy, UCBPolicy
from .policy import STAGE_EVAL, PPOConfig, RLPolicy, build_agent, plan, stream
from .statetracker import TrackerConfig
from .usermodel import TrainConfig, train_user_model

log = logging.getLogger(__name__)

POLICIES = ("cirs", "cirs-no-ci", "random", "eps-greedy", "ucb", "softmax-static")
ENV_KINDS = ("synthetic-categorical", "synthetic-continuous", "files")
METRICS_HEADER = ["epoch", "mean_cum_sat", "mean_len", "mean_single_round"]
SWEEP_HEADER = ["tau", "tau_star", "final_cum_sat"]


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")
        self.stage = stage


@dataclass
class EnvConfig:
    kind: str = "synthetic-categorical"
    n_users: int = 20
    n_items: int = 100
    n_tags: int = 10
    window: int = 1
    n_q: int = 1
    d_q: float = 3.0
    max_round: int = 30
    # synthetic training logs
    log_records_per_user: int = 60
    log_tau: float = 2.0
    log_mean_gap: float = 20.0
    # files mode
    matrix_path: str = ""
    catalog_path: str = ""
    logs_path: str = ""


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    user_model: TrainConfig = field(default_factory=TrainConfig)
    # a shorter discount plans better over 30-step desk episodes than 0.99
    ppo: PPOConfig = field(default_factory=lambda: PPOConfig(gamma=0.9))
    tracker: TrackerConfig = field(default_factory=TrackerConfig)
    policy: str = "cirs"
    epochs: int = 150
    eval_trajectories: int = 100
    eval_mode: str = "greedy"
    epsilon: float = 0.1
    ucb_c: float = 1.0
    softmax_temperature: float = 1.0
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; expected one of {POLICIES}")
        if self.env.kind not in ENV_KINDS:
            raise ConfigError(f"unknown env kind {self.env.kind!r}")
        if self.eval_trajectories < 1 or self.epochs < 1:
            raise ConfigError("eval_trajectories and epochs must be >= 1")
        if self.eval_mode not in ("greedy", "sample"):
            raise ConfigError("eval_mode must be greedy or sample")
        if self.env.kind == "files":
            for name in ("matrix_path", "catalog_path", "logs_path"):
                p = getattr(self.env, name)
                if not p or not Path(p).exists():
                    raise ConfigError(f"env.{name} does not exist: {p!r}")


def _coerce(default, value, where: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return tuple(value) if isinstance(value, list) else value


def _build(base, data, where: str):
    """Overlay a mapping onto a dataclass instance; nested sections merge recursively."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name for f in dataclasses.fields(base)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kw = {}
    for k, v in data.items():
        cur = getattr(base, k)
        if dataclasses.is_dataclass(cur):
            kw[k] = _build(cur, v, f"{where}.{k}")
        else:
            kw[k] = _coerce(cur, v, f"{where}.{k}")
    try:
        return dataclasses.replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig(), data, "config")


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def replace_cfg(cfg: ExperimentConfig, **sections) -> ExperimentConfig:
    """Copy with nested overrides, e.g. ``replace_cfg(c, env={"window": 3}, seed=2)``."""
    out = {}
    for k, v in sections.items():
        cur = getattr(cfg, k)
        out[k] = dataclasses.replace(cur, **v) if isinstance(v, dict) else v
    return dataclasses.replace(cfg, **out)


# ---------------------------------------------------------------- data

@dataclass
class ExperimentData:
    env: envmod.Environment
    logs: list
    planted_alpha: np.ndarray | None = None


def build_data(cfg: ExperimentConfig) -> ExperimentData:
    e = cfg.env
    if e.kind == "files":
        catalog = envmod.load_catalog(e.catalog_path)
        ratings = envmod.load_matrix(e.matrix_path, n_items=catalog.n_items)
        logs = envmod.load_logs(e.logs_path)
        planted = None
    else:
        mode = "categorical" if e.kind == "synthetic-categorical" else "continuous"
        spec = envmod.SynthSpec(mode=mode, n_users=e.n_users, n_items=e.n_items, n_tags=e.n_tags,
                                seed=cfg.seed)
        ratings, catalog, users = envmod.synth_env(spec)
        logs, planted = envmod.generate_logs(ratings, catalog, envmod.LogSpec(
            records_per_user=e.log_records_per_user, tau=e.log_tau, mean_gap=e.log_mean_gap,
            seed=cfg.seed))
    mode = catalog.mode
    exit_cfg = envmod.ExitConfig(window=e.window, mode=mode, n_q=e.n_q, d_q=e.d_q, max_round=e.max_round)
    user_feats = users if e.kind != "files" else None
    environment = envmod.Environment(ratings, catalog, exit_cfg, user_feats)
    return ExperimentData(environment, logs, planted)


# ---------------------------------------------------------------- evaluation

@dataclass
class TrajectoryRecord:
    index: int
    user: int
    length: int
    cum_sat: float
    exit_reason: str
    items: tuple


@dataclass
class EvalMetrics:
    epoch: int
    mean_cum_sat: float
    mean_len: float
    mean_single_round: float
    trajectories: list

    def row(self) -> list:
        return [self.epoch, repr(self.mean_cum_sat), repr(self.mean_len), repr(self.mean_single_round)]


def _run_lockstep(policy, environment, users, rngs) -> list[TrajectoryRecord]:
    states = [environment.reset(int(u)) for u in users]
    reasons = ["none"] * len(users)
    items_log = [[] for _ in users]
    session = policy.start(np.asarray(users), rngs)
    while not all(s.done for s in states):
        picks = session.select()
        rewards = np.zeros(len(users))
        for b, s in enumerate(states):
            if s.done:
                continue
            states[b], res = environment.step(s, int(picks[b]))
            rewards[b] = res.reward
            reasons[b] = res.exit_reason
            items_log[b].append(int(picks[b]))
        session.observe(picks, rewards)
    return [TrajectoryRecord(0, int(u), s.t, s.cum_reward, reasons[b], tuple(items_log[b]))
            for b, (u, s) in enumerate(zip(users, states))]


def evaluate(policy, environment: envmod.Environment, n_traj: int, seed: int, epoch: int = 0) -> EvalMetrics:
    """Run ``n_traj`` episodes with uniformly sampled users and aggregate."""
    if n_traj < 1:
        raise ValueError("n_traj must be >= 1")
    users = stream(seed, STAGE_EVAL, epoch).integers(environment.n_users, size=n_traj)
    rngs = [stream(seed, STAGE_EVAL, epoch, k + 1) for k in range(n_traj)]
    if getattr(policy, "sequential", False):
        recs = []
        for k in range(n_traj):
            recs += _run_lockstep(policy, environment, users[k:k + 1], rngs[k:k + 1])
    else:
        recs = _run_lockstep(policy, environment, users, rngs)
    for k, r in enumerate(recs):
        r.index = k
    cum = np.array([r.cum_sat for r in recs])
    length = np.array([r.length for r in recs], dtype=float)
    single = cum / length
    return EvalMetrics(epoch, float(cum.mean()), float(length.mean()), float(single.mean()), recs)


# ---------------------------------------------------------------- stages

def user_model_config(cfg: ExperimentConfig) -> TrainConfig:
    tc = dataclasses.replace(cfg.user_model, seed=cfg.seed)
    if cfg.policy != "cirs":
        # the ablation and the static baselines model pure interest
        tc = dataclasses.replace(tc, tau=0.0, tau_star=0.0)
    return tc


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except Exception as exc:  # noqa: BLE001
        raise StageError(name, exc) from exc


@dataclass
class TrainedPolicy:
    policy: object  # evaluation adapter with start(users, rngs)
    model: object  # CausalUserModel
    agent: object = None  # RL agent, None for baselines


def train_policy(cfg: ExperimentConfig, data: ExperimentData,
                 on_epoch: Callable[[int, object], None] | None = None) -> TrainedPolicy:
    """Pre-learn the user model and plan; ``on_epoch(epoch, policy)`` fires once per epoch.

    Baselines have nothing to plan, so they only emit the epoch callbacks.
    """
    environment = data.env
    model, _ = _stage("pre-learn", train_user_model, data.logs, user_model_config(cfg),
                      environment.n_users, environment.n_items, catalog=environment.catalog)
    if cfg.policy in ("cirs", "cirs-no-ci"):
        ppo = dataclasses.replace(cfg.ppo, horizon=environment.exit.max_round)
        tracker_cfg = dataclasses.replace(cfg.tracker, max_len=max(cfg.tracker.max_len, ppo.horizon + 1))
        feats = environment.catalog.features if environment.catalog.mode == "continuous" else None
        agent = build_agent(environment.user_features.shape[1], environment.n_items, ppo, tracker_cfg,
                            feats, cfg.seed)
        runner = RLPolicy(agent, environment.user_features, model.rating_scale, cfg.eval_mode)
        hook = None if on_epoch is None else (lambda epoch, _stats: on_epoch(epoch, runner))
        _stage("plan", plan, agent, model, environment.user_features, ppo, cfg.epochs, cfg.seed, hook)
        return TrainedPolicy(runner, model, agent)
    if cfg.policy == "ucb":
        pol = UCBPolicy(environment.n_items, cfg.ucb_c)
    else:
        strategy = {"random": "random", "eps-greedy": "eps-greedy",
                    "softmax-static": "softmax-sample"}[cfg.policy]
        pol = StaticPolicy(model.interest, strategy, cfg.epsilon, cfg.softmax_temperature)
    if on_epoch is not None:
        for epoch in range(cfg.epochs):
            on_epoch(epoch, pol)
    return TrainedPolicy(pol, model)


def run_experiment(cfg: ExperimentConfig, data: ExperimentData | None = None,
                   write: bool = True) -> list[EvalMetrics]:
    """Pre-learn, plan and evaluate; writes metrics.csv and artifacts to ``cfg.out``."""
    cfg.validate()
    t0 = time.perf_counter()
    data = data or _stage("data", build_data, cfg)
    points: list[EvalMetrics] = []

    def on_epoch(epoch, pol):
        points.append(_stage("evaluate", evaluate, pol, data.env, cfg.eval_trajectories, cfg.seed, epoch))

    trained = train_policy(cfg, data, on_epoch)
    log.info("%s seed=%d finished in %.1fs: final cum=%.3f len=%.2f", cfg.policy, cfg.seed,
             time.perf_counter() - t0, points[-1].mean_cum_sat, points[-1].mean_len)
    if write:
        _write_outputs(cfg, points, trained.model, trained.agent)
    return points


def _write_outputs(cfg, points, model, agent) -> None:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    with open(out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for p in points:
            w.writerow(p.row())
    with open(out / "trajectories.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "traj", "user", "length", "cum_sat", "exit_reason", "items"])
        for p in points:
            for r in p.trajectories:
                w.writerow([p.epoch, r.index, r.user, r.length, repr(r.cum_sat), r.exit_reason,
                            " ".join(map(str, r.items))])
    model.save(out / "user_model.npz")
    if agent is not None:
        agent.save(out / "policy.npz", {"policy": cfg.policy, "seed": cfg.seed})


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


# ---------------------------------------------------------------- sweep

def sweep(cfg: ExperimentConfig, taus: Sequence[float], tau_stars: Sequence[float],
          write: bool = True) -> list[tuple[float, float, float]]:
    """One CIRS run per (tau, tau_star) cell; failed cells are recorded as NaN."""
    if not taus or not tau_stars:
        raise ConfigError("sweep grids must be non-empty")
    base = replace_cfg(cfg, policy="cirs")
    data = build_data(base)
    cells = []
    for tau in taus:
        for ts in tau_stars:
            cell = replace_cfg(base, user_model={"tau": float(tau), "tau_star": float(ts)},
                               out=str(Path(cfg.out) / f"tau={tau}_taustar={ts}"))
            try:
                pts = run_experiment(cell, data=data, write=write)
                final = pts[-1].mean_cum_sat
            except StageError as exc:
                log.error("sweep cell tau=%s tau*=%s failed: %s", tau, ts, exc)
                final = float("nan")
            cells.append((float(tau), float(ts), final))
    if write:
        Path(cfg.out).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out) / "sweep.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SWEEP_HEADER)
            for tau, ts, final in cells:
                w.writerow([repr(tau), repr(ts), repr(final)])
    return cells

"""PPO actor-critic trained against counterfactual rewards from the user model."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import nncore as nn
from .statetracker import StateTracker, TrackerConfig

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2 * np.pi))


class PolicyError(RuntimeError):
    pass


@dataclass
class PPOConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    update_epochs: int = 4
    minibatch: int = 8  # episodes per minibatch
    rollouts: int = 32  # episodes per planning epoch
    horizon: int = 30
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    lr_actor: float = 3e-3
    lr_critic: float = 3e-3
    lr_tracker: float = 1e-3
    hidden: int = 64
    continuous: bool = False  # diagonal-Gaussian actor over item feature space
    init_log_std: float = -1.5

    def __post_init__(self):
        if not 0 < self.clip < 1:
            raise ValueError("clip must be in (0, 1)")
        if not (0 < self.gamma <= 1 and 0 < self.lam <= 1):
            raise ValueError("gamma and lam must be in (0, 1]")
        if min(self.update_epochs, self.minibatch, self.rollouts, self.horizon) < 1:
            raise ValueError("epochs, minibatch, rollouts and horizon must be >= 1")


# ---------------------------------------------------------------- pure pieces

def gae(rewards, values, gamma: float, lam: float) -> np.ndarray:
    """Backward-recursive GAE. ``values`` carries one extra bootstrap entry per row."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    if v.shape[-1] != r.shape[-1] + 1 or v.shape[:-1] != r.shape[:-1]:
        raise ValueError(f"values must have one more step than rewards: {v.shape} vs {r.shape}")
    adv = np.zeros_like(r)
    running = np.zeros(r.shape[:-1])
    for t in range(r.shape[-1] - 1, -1, -1):
        delta = r[..., t] + gamma * v[..., t + 1] - v[..., t]
        running = delta + gamma * lam * running
        adv[..., t] = running
    return adv


def clipped_surrogate(ratio, adv, clip: float) -> np.ndarray:
    ratio, adv = np.asarray(ratio, float), np.asarray(adv, float)
    return np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(np.exp(logp))
    return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), logp.size - 1))


def act(logits: np.ndarray, mode: str, rng: np.random.Generator | None = None) -> tuple[int, float]:
    """Pick an item from one row of logits; returns (item, exact log-probability)."""
    logits = np.asarray(logits, dtype=float).ravel()
    if not np.all(np.isfinite(logits)):
        raise PolicyError("non-finite logits")
    logp = log_softmax_np(logits)
    if mode == "greedy":
        a = int(np.argmax(logits))
    elif mode == "sample":
        a = sample_categorical(logp, rng)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return a, float(logp[a])


# ---------------------------------------------------------------- agent

class Agent:
    """Actor and critic heads on top of a shared state tracker."""

    def __init__(self, tracker: StateTracker, n_items: int, cfg: PPOConfig,
                 item_features: np.ndarray | None = None, rng: np.random.Generator | None = None):
        self.tracker = tracker
        self.cfg = cfg
        self.n_items = n_items
        self.item_features = item_features
        if cfg.continuous and item_features is None:
            raise ValueError("continuous actor needs item feature vectors")
        rng = rng if rng is not None else np.random.default_rng(0)
        d, h = tracker.cfg.d_state, cfg.hidden
        out = item_features.shape[1] if cfg.continuous else n_items
        p = self.params = nn.Params()
        p.add("actor_w1", rng.normal(0, np.sqrt(2.0 / d), (d, h)))
        p.add("actor_b1", np.zeros((1, h)))
        p.add("actor_w2", rng.normal(0, 0.01, (h, out)))
        p.add("actor_b2", np.zeros((1, out)))
        if cfg.continuous:
            p.add("log_std", np.full((1, out), cfg.init_log_std))
        p.add("critic_w1", rng.normal(0, np.sqrt(2.0 / d), (d, h)))
        p.add("critic_b1", np.zeros((1, h)))
        p.add("critic_w2", rng.normal(0, 0.01, (h, 1)))
        p.add("critic_b2", np.zeros((1, 1)))

    # numpy heads, used while collecting rollouts
    def heads_np(self, s: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = {k: t.data for k, t in self.params.items()}
        ha = np.maximum(s @ p["actor_w1"] + p["actor_b1"], 0.0)
        out = ha @ p["actor_w2"] + p["actor_b2"]
        if self.cfg.continuous:
            out = 1.0 / (1.0 + np.exp(-out))
        hc = np.maximum(s @ p["critic_w1"] + p["critic_b1"], 0.0)
        v = (hc @ p["critic_w2"] + p["critic_b2"])[:, 0]
        return out, v

    # graph heads, used in the update
    def actor(self, s: nn.Tensor) -> nn.Tensor:
        p = self.params
        out = nn.relu(s @ p["actor_w1"] + p["actor_b1"]) @ p["actor_w2"] + p["actor_b2"]
        return nn.sigmoid(out) if self.cfg.continuous else out

    def critic(self, s: nn.Tensor) -> nn.Tensor:
        p = self.params
        return nn.relu(s @ p["critic_w1"] + p["critic_b1"]) @ p["critic_w2"] + p["critic_b2"]

    def nearest_item(self, vecs: np.ndarray) -> np.ndarray:
        f = self.item_features
        d2 = (vecs * vecs).sum(1)[:, None] + (f * f).sum(1)[None, :] - 2 * vecs @ f.T
        return np.argmin(d2, axis=1)

    def choose(self, s: np.ndarray, mode: str, rngs: Sequence[np.random.Generator]):
        """Batched action selection. Returns (items, log-probs, values, raw actions)."""
        out, v = self.heads_np(s)
        B = s.shape[0]
        if not np.all(np.isfinite(out)):
            raise PolicyError("non-finite actor output")
        if self.cfg.continuous:
            std = np.exp(self.params["log_std"].data[0])
            if mode == "greedy":
                raw = out.copy()
            else:
                raw = np.stack([out[b] + std * rngs[b].standard_normal(out.shape[1]) for b in range(B)])
            z = (raw - out) / std
            logp = (-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI).sum(axis=1)
            return self.nearest_item(raw), logp, v, raw
        logp_all = log_softmax_np(out)
        if mode == "greedy":
            items = np.argmax(out, axis=1)
        else:
            items = np.array([sample_categorical(logp_all[b], rngs[b]) for b in range(B)])
        return items, logp_all[np.arange(B), items], v, None

    def save(self, path, meta: dict | None = None) -> None:
        tensors = {f"agent/{k}": v for k, v in self.params.arrays().items()}
        tensors.update({f"tracker/{k}": v for k, v in self.tracker.params.arrays().items()})
        nn.save_checkpoint(path, tensors, meta)
        Path(path).with_suffix(".json").write_text(json.dumps(
            {"ppo": asdict(self.cfg), "tracker": asdict(self.tracker.cfg), **(meta or {})}, indent=2))

    def load(self, path) -> None:
        tensors, _ = nn.load_checkpoint(path)
        self.params.load_arrays({k[6:]: v for k, v in tensors.items() if k.startswith("agent/")})
        self.tracker.params.load_arrays({k[8:]: v for k, v in tensors.items() if k.startswith("tracker/")})


# ---------------------------------------------------------------- rollouts

@dataclass
class RolloutBatch:
    users: np.ndarray  # (B,)
    user_feats: np.ndarray  # (B, d_u)
    items: np.ndarray  # (B, T)
    rewards: np.ndarray  # (B, T)
    logp_old: np.ndarray  # (B, T)
    values: np.ndarray  # (B, T)
    raw_actions: np.ndarray | None = None  # (B, T, d_a) for the Gaussian actor
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def finish(self, gamma: float, lam: float) -> None:
        boot = np.concatenate([self.values, np.zeros((self.values.shape[0], 1))], axis=1)
        self.advantages = gae(self.rewards, boot, gamma, lam)
        self.returns = self.advantages + self.values


def collect_rollouts(agent: Agent, user_model, user_feats_table: np.ndarray,
                     rngs: Sequence[np.random.Generator], horizon: int) -> RolloutBatch:
    """Roll out one fixed-horizon episode per RNG stream against the user model."""
    B = len(rngs)
    users = np.array([r.integers(user_model.n_users) for r in rngs])
    feats = user_feats_table[users]
    cache = agent.tracker.start(feats)
    s = cache.state
    items = np.zeros((B, horizon), dtype=np.int64)
    rewards = np.zeros((B, horizon))
    logp = np.zeros((B, horizon))
    values = np.zeros((B, horizon))
    raws = [] if agent.cfg.continuous else None
    for t in range(horizon):
        a, lp, v, raw = agent.choose(s, "sample", rngs)
        r = user_model.batch_rewards(users, items[:, :t], a)
        items[:, t], rewards[:, t], logp[:, t], values[:, t] = a, r, lp, v
        if raws is not None:
            raws.append(raw)
        s = cache.push(a, r)
    raw_actions = np.stack(raws, axis=1) if raws is not None else None
    return RolloutBatch(users, feats, items, rewards, logp, values, raw_actions)


# ---------------------------------------------------------------- update

def _policy_terms(agent: Agent, mb: RolloutBatch):
    B, T = mb.items.shape
    out = agent.tracker.encode(mb.user_feats, mb.items, mb.rewards)
    s = nn.rows(out, agent.tracker.state_rows(B, T))
    head = agent.actor(s)
    if agent.cfg.continuous:
        log_std = agent.params["log_std"]
        raw = nn.Tensor(mb.raw_actions.reshape(B * T, -1))
        z = (raw - head) / nn.exp(log_std)
        d = head.shape[1]
        logp = nn.scale(nn.sum(nn.square(z), axis=1), -0.5) - nn.sum(log_std) - 0.5 * LOG_2PI * d
        entropy = nn.sum(log_std) + 0.5 * d * (1.0 + LOG_2PI)
    else:
        lsm = nn.log_softmax(head)
        logp = nn.pick(lsm, mb.items.reshape(-1))
        entropy = nn.scale(nn.mean(nn.sum(nn.exp(lsm) * lsm, axis=1)), -1.0)
    v = agent.critic(s)
    return logp, entropy, v


def ppo_loss(agent: Agent, mb: RolloutBatch, adv: np.ndarray, clip: float,
             value_coef: float, entropy_coef: float):
    logp, entropy, v = _policy_terms(agent, mb)
    A = nn.Tensor(adv.reshape(-1, 1))
    ratio = nn.exp(logp - nn.Tensor(mb.logp_old.reshape(-1, 1)))
    surr = nn.minimum(ratio * A, nn.clip(ratio, 1 - clip, 1 + clip) * A)
    objective = nn.mean(surr)
    vloss = nn.mean(nn.square(v - nn.Tensor(mb.returns.reshape(-1, 1))))
    loss = nn.scale(objective, -1.0) + nn.scale(vloss, value_coef) - nn.scale(entropy, entropy_coef)
    r = ratio.data.ravel()
    diag = {"objective": objective.item(), "value_loss": vloss.item(), "entropy": entropy.item(),
            "clip_frac": float(np.mean(np.abs(r - 1.0) > clip))}
    return loss, diag


def _subset(batch: RolloutBatch, idx: np.ndarray) -> RolloutBatch:
    return RolloutBatch(batch.users[idx], batch.user_feats[idx], batch.items[idx], batch.rewards[idx],
                        batch.logp_old[idx], batch.values[idx],
                        None if batch.raw_actions is None else batch.raw_actions[idx],
                        batch.advantages[idx], batch.returns[idx])


class PPOTrainer:
    def __init__(self, agent: Agent, cfg: PPOConfig):
        self.agent, self.cfg = agent, cfg
        heads = agent.params
        self.opt_actor = nn.Adam(nn.Params({k: v for k, v in heads.items() if not k.startswith("critic")}),
                                 lr=cfg.lr_actor)
        self.opt_critic = nn.Adam(nn.Params({k: v for k, v in heads.items() if k.startswith("critic")}),
                                  lr=cfg.lr_critic)
        self.opt_tracker = nn.Adam(agent.tracker.params, lr=cfg.lr_tracker)
        self.n_updates = 0

    def update(self, batch: RolloutBatch, rng: np.random.Generator) -> dict:
        """PPO epochs over minibatches of episodes; tracker stepped once afterwards."""
        cfg, agent = self.cfg, self.agent
        if batch.advantages is None:
            batch.finish(cfg.gamma, cfg.lam)
        adv = normalize(batch.advantages)
        tracker_grads = {k: np.zeros_like(t.data) for k, t in agent.tracker.params.items()}
        diags, n_mb = [], 0
        B = batch.items.shape[0]
        for _ in range(cfg.update_epochs):
            order = rng.permutation(B)
            for s in range(0, B, cfg.minibatch):
                idx = order[s:s + cfg.minibatch]
                loss, diag = ppo_loss(agent, _subset(batch, idx), adv[idx], cfg.clip,
                                      cfg.value_coef, cfg.entropy_coef)
                if not np.isfinite(loss.item()):
                    raise PolicyError(f"non-finite PPO loss: {diag}")
                agent.params.zero_grad()
                agent.tracker.params.zero_grad()
                nn.backward(loss)
                self.opt_actor.step()
                self.opt_critic.step()
                for k, g in agent.tracker.params.grads().items():
                    tracker_grads[k] += g
                diags.append(diag)
                n_mb += 1
                self.n_updates += 1
        self.opt_tracker.step({k: g / n_mb for k, g in tracker_grads.items()})
        return {k: float(np.mean([d[k] for d in diags])) for k in diags[0]}


def ppo_update(batch: RolloutBatch, trainer: PPOTrainer, rng: np.random.Generator) -> dict:
    return trainer.update(batch, rng)


# ---------------------------------------------------------------- planning

def repetition_rate(items: np.ndarray) -> float:
    """Fraction of steps whose item already appeared earlier in the same episode."""
    rep = 0
    for row in items:
        seen = set()
        for i in row:
            rep += i in seen
            seen.add(int(i))
    return rep / items.size


@dataclass
class PlanStats:
    epoch: int
    mean_return: float
    mean_reward: float
    repetition: float
    objective: float
    value_loss: float
    entropy: float
    clip_frac: float


def stream(*key) -> np.random.Generator:
    """Independent RNG for a tuple of non-negative ints (master seed, stage, ...)."""
    return np.random.default_rng([int(k) for k in key])


STAGE_PLAN, STAGE_UPDATE, STAGE_EVAL, STAGE_INIT = 2, 3, 4, 5


def plan(agent: Agent, user_model, user_feats_table: np.ndarray, cfg: PPOConfig, epochs: int,
         seed: int, on_epoch: Callable[[int, PlanStats], None] | None = None) -> list[PlanStats]:
    """Train the agent on counterfactual rewards for ``epochs`` rollout/update rounds."""
    trainer = PPOTrainer(agent, cfg)
    history = []
    for epoch in range(epochs):
        rngs = [stream(seed, STAGE_PLAN, epoch, b) for b in range(cfg.rollouts)]
        batch = collect_rollouts(agent, user_model, user_feats_table, rngs, cfg.horizon)
        batch.finish(cfg.gamma, cfg.lam)
        diag = trainer.update(batch, stream(seed, STAGE_UPDATE, epoch))
        st = PlanStats(epoch, float(batch.rewards.sum(axis=1).mean()), float(batch.rewards.mean()),
                       repetition_rate(batch.items), **diag)
        history.append(st)
        log.debug("plan epoch %d: %s", epoch, st)
        if on_epoch is not None:
            on_epoch(epoch, st)
    return history


def build_agent(user_feat_dim: int, n_items: int, ppo: PPOConfig, tracker_cfg: TrackerConfig,
                item_features: np.ndarray | None, seed: int) -> Agent:
    rng = stream(seed, STAGE_INIT)
    tracker = StateTracker(tracker_cfg, user_feat_dim, n_items,
                           action_features=item_features, rng=rng)
    return Agent(tracker, n_items, ppo, item_features=item_features, rng=rng)


@dataclass
class RLPolicy:
    """Evaluation adapter: runs the trained agent against environment feedback."""

    agent: Agent
    user_feats: np.ndarray
    reward_scale: float = 1.0
    mode: str = "greedy"
    sequential: bool = field(default=False, init=False)

    def start(self, users: np.ndarray, rngs):
        return _RLSession(self, users, rngs)


class _RLSession:
    def __init__(self, pol: RLPolicy, users, rngs):
        self.pol, self.rngs = pol, rngs
        self.cache = pol.agent.tracker.start(pol.user_feats[users])

    def select(self) -> np.ndarray:
        items, _, _, _ = self.pol.agent.choose(self.cache.state, self.pol.mode, self.rngs)
        return items

    def observe(self, items, rewards) -> None:
        self.cache.push(items, np.asarray(rewards) / self.pol.reward_scale)

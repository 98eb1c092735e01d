"""Reward-gated, causally masked two-layer attention encoder producing policy states.

Sequence for one episode: ``[FFN(e_u), g_1*a_1, ..., g_t*a_t]`` plus sinusoidal
positions; the state after ``t`` actions is the output at position ``t``.

Two evaluation paths share one parameter set:
  * ``encode`` builds an autodiff graph over whole episodes (training);
  * ``TrackerCache`` appends one position at a time with cached keys and
    values (rollouts and evaluation). Causality makes the two agree exactly
    up to float rounding.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nncore as nn

LN_EPS = 1e-5


@dataclass(frozen=True)
class TrackerConfig:
    d_state: int = 32
    d_ff: int = 64
    n_layers: int = 2
    max_len: int = 101  # user token + max horizon
    user_hidden: int = 32


def sinusoid_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    k = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (k // 2)) / d)
    return np.where(k % 2 == 0, np.sin(angle), np.cos(angle))


class StateTracker:
    """Holds tracker parameters.

    ``action_features=None`` means learned item embeddings (width ``d_state``);
    otherwise each item is a raw feature vector lifted to ``d_state`` by a
    linear projection.
    """

    def __init__(self, cfg: TrackerConfig, user_dim: int, n_items: int,
                 action_features: np.ndarray | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.n_items = n_items
        self.action_features = action_features
        rng = rng if rng is not None else np.random.default_rng(0)
        d = cfg.d_state
        d_a = d if action_features is None else action_features.shape[1]
        self.d_action = d_a
        p = self.params = nn.Params()

        def glorot(shape):
            return rng.normal(0.0, np.sqrt(2.0 / (shape[0] + shape[1])), size=shape)

        p.add("user_w1", glorot((user_dim, cfg.user_hidden)))
        p.add("user_b1", np.zeros((1, cfg.user_hidden)))
        p.add("user_w2", glorot((cfg.user_hidden, d)))
        p.add("user_b2", np.zeros((1, d)))
        if action_features is None:
            p.add("item_emb", rng.normal(0.0, 0.5, size=(n_items, d)))
        else:
            p.add("action_proj", glorot((d_a, d)))
        p.add("gate_w", glorot((1 + d_a, d)))
        p.add("gate_b", np.zeros((1, d)))
        for l in range(cfg.n_layers):
            for name in ("wq", "wk", "wv", "wo"):
                p.add(f"l{l}_{name}", glorot((d, d)))
            p.add(f"l{l}_ln1_g", np.ones((1, d)))
            p.add(f"l{l}_ln1_b", np.zeros((1, d)))
            p.add(f"l{l}_ff_w1", glorot((d, cfg.d_ff)))
            p.add(f"l{l}_ff_b1", np.zeros((1, cfg.d_ff)))
            p.add(f"l{l}_ff_w2", glorot((cfg.d_ff, d)))
            p.add(f"l{l}_ff_b2", np.zeros((1, d)))
            p.add(f"l{l}_ln2_g", np.ones((1, d)))
            p.add(f"l{l}_ln2_b", np.zeros((1, d)))
        self.positions = sinusoid_table(cfg.max_len, d)

    # ------------------------------------------------------------ graph path

    def action_vectors(self, items) -> nn.Tensor:
        if self.action_features is None:
            return nn.rows(self.params["item_emb"], items)
        return nn.Tensor(self.action_features[np.asarray(items).reshape(-1)])

    def project(self, e_a: nn.Tensor) -> nn.Tensor:
        if self.action_features is None:
            return e_a
        return e_a @ self.params["action_proj"]

    def gate(self, rewards, e_a: nn.Tensor) -> nn.Tensor:
        """Gated action input; ``rewards`` is a column of feedback values."""
        r = rewards if isinstance(rewards, nn.Tensor) else nn.Tensor(np.reshape(rewards, (-1, 1)))
        if r.shape[0] != e_a.shape[0] or e_a.shape[1] != self.d_action:
            raise nn.ShapeError(f"gate: rewards {r.shape} vs actions {e_a.shape}, expected width {self.d_action}")
        g = nn.sigmoid(nn.concat([r, e_a]) @ self.params["gate_w"] + self.params["gate_b"])
        return g * self.project(e_a)

    def user_token(self, user_feats) -> nn.Tensor:
        p = self.params
        h = nn.relu(nn.Tensor(user_feats) @ p["user_w1"] + p["user_b1"])
        return h @ p["user_w2"] + p["user_b2"]

    def encode(self, user_feats: np.ndarray, items: np.ndarray, rewards: np.ndarray) -> nn.Tensor:
        """Outputs at every position for B equal-length episodes.

        ``user_feats`` (B, d_u), ``items`` and ``rewards`` (B, T). Row
        ``b*(T+1) + t`` holds the state after ``t`` actions of episode ``b``.
        """
        user_feats = np.atleast_2d(user_feats)
        items = np.asarray(items).reshape(user_feats.shape[0], -1)
        rewards = np.asarray(rewards, dtype=float).reshape(items.shape)
        B, T = items.shape
        L = T + 1
        if L > self.cfg.max_len:
            raise ValueError(f"prefix length {T} exceeds max horizon {self.cfg.max_len - 1}")
        tok_u = self.user_token(user_feats)  # (B, d)
        if T:
            gated = self.gate(rewards.reshape(-1, 1), self.action_vectors(items.reshape(-1)))
            # interleave: for each episode, user token then its T actions
            order = np.empty(B * L, dtype=np.int64)
            src = nn.concat([tok_u, gated], axis=0)
            for b in range(B):
                order[b * L] = b
                order[b * L + 1:(b + 1) * L] = B + b * T + np.arange(T)
            x = nn.rows(src, order)
        else:
            x = tok_u
        x = x + nn.Tensor(np.tile(self.positions[:L], (B, 1)))
        ep = np.repeat(np.arange(B), L)
        pos = np.tile(np.arange(L), B)
        mask = (ep[:, None] == ep[None, :]) & (pos[None, :] <= pos[:, None])
        for l in range(self.cfg.n_layers):
            x = self._layer(x, l, mask)
        return x

    def _layer(self, x: nn.Tensor, l: int, mask: np.ndarray) -> nn.Tensor:
        p = self.params
        d = self.cfg.d_state
        q = x @ p[f"l{l}_wq"]
        k = x @ p[f"l{l}_wk"]
        v = x @ p[f"l{l}_wv"]
        att = nn.softmax(nn.scale(q @ nn.transpose(k), 1.0 / np.sqrt(d)), mask=mask)
        h = nn.layer_norm(x + (att @ v) @ p[f"l{l}_wo"], p[f"l{l}_ln1_g"], p[f"l{l}_ln1_b"], LN_EPS)
        ff = nn.relu(h @ p[f"l{l}_ff_w1"] + p[f"l{l}_ff_b1"]) @ p[f"l{l}_ff_w2"] + p[f"l{l}_ff_b2"]
        return nn.layer_norm(h + ff, p[f"l{l}_ln2_g"], p[f"l{l}_ln2_b"], LN_EPS)

    def encode_state(self, user_feat: np.ndarray, items, rewards) -> np.ndarray:
        """State vector after the given prefix of one episode."""
        items = np.asarray(items, dtype=np.int64).reshape(1, -1)
        out = self.encode(np.atleast_2d(user_feat), items, np.asarray(rewards, float).reshape(1, -1))
        return out.data[-1].copy()

    def state_rows(self, B: int, T: int) -> np.ndarray:
        """Row indices of the states before each of T actions in ``encode`` output."""
        L = T + 1
        return (np.arange(B)[:, None] * L + np.arange(T)[None, :]).reshape(-1)

    # ------------------------------------------------------------ numpy path

    def start(self, user_feats: np.ndarray) -> "TrackerCache":
        return TrackerCache(self, np.atleast_2d(user_feats))


def _ln(x, g, b):
    c = x - x.mean(axis=1, keepdims=True)
    var = (c * c).mean(axis=1, keepdims=True)
    return c * np.exp(-0.5 * np.log(var + LN_EPS)) * g + b


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class TrackerCache:
    """Incremental encoder state for B episodes advancing in lockstep."""

    def __init__(self, tracker: StateTracker, user_feats: np.ndarray):
        self.tr = tracker
        p = {k: t.data for k, t in tracker.params.items()}
        self.p = p
        B = user_feats.shape[0]
        self.B = B
        self.t = 0
        self.keys = [[] for _ in range(tracker.cfg.n_layers)]
        self.values = [[] for _ in range(tracker.cfg.n_layers)]
        h = np.maximum(user_feats @ p["user_w1"] + p["user_b1"], 0.0)
        self.state = self._advance(h @ p["user_w2"] + p["user_b2"])

    def _advance(self, x: np.ndarray) -> np.ndarray:
        tr, p = self.tr, self.p
        if self.t >= tr.cfg.max_len:
            raise ValueError("prefix exceeds max horizon")
        d = tr.cfg.d_state
        x = x + tr.positions[self.t]
        for l in range(tr.cfg.n_layers):
            q = x @ p[f"l{l}_wq"]
            self.keys[l].append(x @ p[f"l{l}_wk"])
            self.values[l].append(x @ p[f"l{l}_wv"])
            K = np.stack(self.keys[l], axis=1)  # (B, t+1, d)
            V = np.stack(self.values[l], axis=1)
            s = np.einsum("bd,btd->bt", q, K) / np.sqrt(d)
            s = s - s.max(axis=1, keepdims=True)
            w = np.exp(s)
            w /= w.sum(axis=1, keepdims=True)
            a = np.einsum("bt,btd->bd", w, V)
            h = _ln(x + a @ p[f"l{l}_wo"], p[f"l{l}_ln1_g"], p[f"l{l}_ln1_b"])
            ff = np.maximum(h @ p[f"l{l}_ff_w1"] + p[f"l{l}_ff_b1"], 0.0) @ p[f"l{l}_ff_w2"] + p[f"l{l}_ff_b2"]
            x = _ln(h + ff, p[f"l{l}_ln2_g"], p[f"l{l}_ln2_b"])
        self.t += 1
        return x

    def push(self, items: np.ndarray, rewards: np.ndarray) -> np.ndarray:
        """Append one (action, reward) per episode; returns the new states (B, d)."""
        p, tr = self.p, self.tr
        items = np.asarray(items, dtype=np.int64)
        if tr.action_features is None:
            e_a = p["item_emb"][items]
            proj = e_a
        else:
            e_a = tr.action_features[items]
            proj = e_a @ p["action_proj"]
        r = np.asarray(rewards, dtype=float).reshape(-1, 1)
        g = _sig(np.concatenate([r, e_a], axis=1) @ p["gate_w"] + p["gate_b"])
        self.state = self._advance(g * proj)
        return self.state

"""Causal user model: intrinsic interest (small DeepFM) times an overexposure shrinkage.

Satisfaction is ``y / (1 + e)`` where ``e`` accumulates time- and
similarity-weighted contributions of earlier recommendations, scaled by a
per-user sensitivity and a per-item unendurableness (both softplus-positive).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import nncore as nn
from .env import InteractionRecord, ItemCatalog

log = logging.getLogger(__name__)

SOFTPLUS_ONE = float(np.log(np.e - 1.0))  # softplus(SOFTPLUS_ONE) == 1


class TrainingError(RuntimeError):
    pass


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class ExposureParams:
    alpha_raw: np.ndarray  # (n_users,)
    beta_raw: np.ndarray  # (n_items,)
    tau: float = 0.0  # pre-learning temperature, log time units (seconds)
    tau_star: float = 0.0  # planning temperature, in steps
    gamma_star: float = 10.0

    def __post_init__(self):
        if self.tau < 0 or self.tau_star < 0:
            raise ValueError("tau and tau_star must be >= 0")
        if not self.gamma_star > 0:
            raise ValueError("gamma_star must be > 0")

    @classmethod
    def neutral(cls, n_users: int, n_items: int, **kw) -> "ExposureParams":
        return cls(np.full(n_users, SOFTPLUS_ONE), np.full(n_items, SOFTPLUS_ONE), **kw)

    @property
    def alpha(self) -> np.ndarray:
        return softplus(self.alpha_raw)

    @property
    def beta(self) -> np.ndarray:
        return softplus(self.beta_raw)


def _decay_sum(gaps: np.ndarray, dists: np.ndarray, tau: float) -> float:
    if tau == 0 or gaps.size == 0:
        return 0.0
    return float(np.exp(-(gaps / tau) * dists).sum())


def _history_arrays(history, u, t, catalog, dist, i):
    times, items = [], []
    for rec in history:
        if rec.user != u:
            continue
        if rec.t >= t:
            raise ValueError(f"history record at t={rec.t} is not before t={t}")
        times.append(rec.t)
        items.append(rec.item)
    items = np.asarray(items, dtype=np.int64)
    if dist is not None:
        d = dist[i, items]
    else:
        from .env import item_distance
        d = np.array([item_distance(i, j, catalog) for j in items])
    return t - np.asarray(times, dtype=float), d


def exposure_effect(history: Sequence[InteractionRecord], u: int, i: int, t: float,
                    ep: ExposureParams, catalog: ItemCatalog | None = None,
                    dist: np.ndarray | None = None) -> float:
    """Overexposure of item ``i`` for user ``u`` at log time ``t``."""
    gaps, d = _history_arrays(history, u, t, catalog, dist, i)
    return float(ep.alpha[u] * ep.beta[i]) * _decay_sum(gaps, d, ep.tau)


def counterfactual_exposure(planning_traj: Sequence[tuple[int, int]], u: int, i: int, t_step: int,
                            ep: ExposureParams, catalog: ItemCatalog | None = None,
                            dist: np.ndarray | None = None) -> float:
    """Intervened exposure over a planning trajectory of ``(item, step)`` pairs."""
    hist = [InteractionRecord(u, int(it), float(s), 0.0) for it, s in planning_traj]
    gaps, d = _history_arrays(hist, u, float(t_step), catalog, dist, i)
    return ep.gamma_star * float(ep.alpha[u] * ep.beta[i]) * _decay_sum(gaps, d, ep.tau_star)


def satisfaction(y_hat, e):
    if np.any(np.asarray(e) < 0):
        raise ValueError("exposure effect must be non-negative")
    return y_hat / (1.0 + e)


# ---------------------------------------------------------------- interest model

class InterestModel:
    """Bias + first-order + FM pairwise + 2-layer sigmoid MLP on [e_u, e_i]."""

    def __init__(self, n_users: int, n_items: int, dim: int = 8, hidden: int = 32,
                 rng: np.random.Generator | None = None, zero: bool = False):
        self.n_users, self.n_items, self.dim, self.hidden = n_users, n_items, dim, hidden
        rng = rng if rng is not None else np.random.default_rng(0)
        p = self.params = nn.Params()

        def init(shape, std):
            return np.zeros(shape) if zero else rng.normal(0.0, std, size=shape)

        p.add("bias", np.zeros((1, 1)))
        p.add("w_user", np.zeros((n_users, 1)))
        p.add("w_item", np.zeros((n_items, 1)))
        p.add("emb_user", init((n_users, dim), 0.1))
        p.add("emb_item", init((n_items, dim), 0.1))
        p.add("mlp_w1", init((2 * dim, hidden), 1.0 / np.sqrt(2 * dim)))
        p.add("mlp_b1", np.zeros((1, hidden)))
        p.add("mlp_w2", init((hidden, 1), 0.1 / np.sqrt(hidden)))
        p.add("mlp_b2", np.zeros((1, 1)))

    def check_ids(self, users, items) -> None:
        users, items = np.asarray(users), np.asarray(items)
        if users.size and (users.min() < 0 or users.max() >= self.n_users):
            raise KeyError(f"user id out of range [0, {self.n_users})")
        if items.size and (items.min() < 0 or items.max() >= self.n_items):
            raise KeyError(f"item id out of range [0, {self.n_items})")

    def forward(self, users, items) -> nn.Tensor:
        """Column tensor of interest scores for paired id arrays."""
        self.check_ids(users, items)
        p = self.params
        eu = nn.rows(p["emb_user"], users)
        ei = nn.rows(p["emb_item"], items)
        fm = nn.sum(eu * ei, axis=1)
        h = nn.sigmoid(nn.concat([eu, ei]) @ p["mlp_w1"] + p["mlp_b1"])
        deep = h @ p["mlp_w2"] + p["mlp_b2"]
        return p["bias"] + nn.rows(p["w_user"], users) + nn.rows(p["w_item"], items) + fm + deep

    def predict_interest(self, u: int, i: int) -> float:
        return self.forward([u], [i]).item()

    def table(self) -> np.ndarray:
        uu, ii = np.meshgrid(np.arange(self.n_users), np.arange(self.n_items), indexing="ij")
        return self.forward(uu.ravel(), ii.ravel()).data.reshape(self.n_users, self.n_items)


def predict_interest(u: int, i: int, model: InterestModel) -> float:
    return model.predict_interest(u, i)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    loss: str = "mse"  # "mse" | "bpr"
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-2
    dim: int = 8
    hidden: int = 32
    tau: float = 2.0
    tau_star: float = 0.05
    gamma_star: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("mse", "bpr"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")


def exposure_sums(logs: Sequence[InteractionRecord], dist: np.ndarray, tau: float,
                  chunk: int = 64) -> np.ndarray:
    """(n_records, n_items): decay sum of every candidate item at each record's time.

    History is the same user's strictly earlier records in the log.
    """
    n_items = dist.shape[0]
    out = np.zeros((len(logs), n_items))
    if tau == 0:
        return out
    by_user: dict[int, list[int]] = {}
    for k, r in enumerate(logs):
        by_user.setdefault(r.user, []).append(k)
    for idx in by_user.values():
        idx = np.asarray(idx)
        t = np.array([logs[k].t for k in idx])
        it = np.array([logs[k].item for k in idx])
        dcols = dist[:, it].T  # (n_hist, n_items)
        for s in range(0, len(idx), chunk):
            tk = t[s:s + chunk]
            gaps = tk[:, None] - t[None, :]  # (c, n_hist)
            valid = gaps > 0
            w = np.where(valid, gaps, 0.0) / tau
            # exp(-w * d) summed over history, masked
            terms = np.exp(-w[:, :, None] * dcols[None, :, :]) * valid[:, :, None]
            out[idx[s:s + chunk]] = terms.sum(axis=1)
    return out


@dataclass
class CausalUserModel:
    interest: np.ndarray  # (n_users, n_items) estimated intrinsic interest
    exposure: ExposureParams
    dist: np.ndarray  # (n_items, n_items)
    rating_scale: float = 1.0
    loss_curve: list = field(default_factory=list)

    @property
    def n_users(self) -> int:
        return self.interest.shape[0]

    @property
    def n_items(self) -> int:
        return self.interest.shape[1]

    def counterfactual_exposure(self, planning_traj, u, i, t_step) -> float:
        return counterfactual_exposure(planning_traj, u, i, t_step, self.exposure, dist=self.dist)

    def counterfactual_reward(self, planning_traj, u: int, i: int, t_step: int) -> float:
        e = self.counterfactual_exposure(planning_traj, u, i, t_step)
        return float(satisfaction(self.interest[u, i], e))

    def batch_rewards(self, users: np.ndarray, past_items: np.ndarray, items: np.ndarray) -> np.ndarray:
        """Counterfactual rewards for B synchronized rollouts.

        ``past_items`` is (B, t) with the item recommended at steps 0..t-1;
        the current step is t.
        """
        users = np.asarray(users)
        items = np.asarray(items)
        y = self.interest[users, items]
        ep = self.exposure
        t = past_items.shape[1]
        if t == 0 or ep.tau_star == 0:
            return y.copy()
        gaps = (t - np.arange(t))[None, :]
        d = self.dist[items[:, None], past_items]
        s = np.exp(-(gaps / ep.tau_star) * d).sum(axis=1)
        e = ep.gamma_star * ep.alpha[users] * ep.beta[items] * s
        return y / (1.0 + e)

    def with_tau_star(self, tau_star: float) -> "CausalUserModel":
        ep = ExposureParams(self.exposure.alpha_raw, self.exposure.beta_raw,
                            self.exposure.tau, tau_star, self.exposure.gamma_star)
        return CausalUserModel(self.interest, ep, self.dist, self.rating_scale, list(self.loss_curve))

    def save(self, path) -> None:
        path = Path(path)
        nn.save_checkpoint(path, {"interest": self.interest, "alpha_raw": self.exposure.alpha_raw,
                                  "beta_raw": self.exposure.beta_raw, "dist": self.dist})
        sidecar = {"tau": self.exposure.tau, "tau_star": self.exposure.tau_star,
                   "gamma_star": self.exposure.gamma_star, "rating_scale": self.rating_scale,
                   "loss_curve": self.loss_curve}
        path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "CausalUserModel":
        path = Path(path)
        t, _ = nn.load_checkpoint(path)
        side = json.loads(path.with_suffix(".json").read_text())
        ep = ExposureParams(t["alpha_raw"], t["beta_raw"], side["tau"], side["tau_star"], side["gamma_star"])
        return cls(t["interest"], ep, t["dist"], side["rating_scale"], side["loss_curve"])


def training_loss(model: InterestModel, users, items, sums, targets=None,
                  neg_items=None, neg_sums=None, loss: str = "mse") -> nn.Tensor:
    """Mean MSE or BPR loss of predicted satisfaction; ``sums`` are decay sums."""
    p = model.params
    alpha = nn.softplus(nn.rows(p["alpha_raw"], users))

    def sat(its, s):
        e = alpha * nn.softplus(nn.rows(p["beta_raw"], its)) * nn.Tensor(np.reshape(s, (-1, 1)))
        return model.forward(users, its) / (e + 1.0)

    pos = sat(items, sums)
    if loss == "mse":
        return nn.mean(nn.square(pos - nn.Tensor(np.reshape(targets, (-1, 1)))))
    neg = sat(neg_items, neg_sums)
    return -nn.mean(nn.log_sigmoid(pos - neg))


def attach_exposure(model: InterestModel, ep: ExposureParams) -> None:
    model.params.add("alpha_raw", ep.alpha_raw.reshape(-1, 1).copy())
    model.params.add("beta_raw", ep.beta_raw.reshape(-1, 1).copy())


def train_user_model(logs: Sequence[InteractionRecord], cfg: TrainConfig, n_users: int,
                     n_items: int, catalog: ItemCatalog | None = None,
                     dist: np.ndarray | None = None) -> tuple[CausalUserModel, InterestModel]:
    """Fit interest and exposure parameters jointly with Adam."""
    if not logs:
        raise TrainingError("cannot train on empty logs")
    if dist is None:
        if catalog is None:
            raise ValueError("need a catalog or a distance matrix")
        dist = catalog.distance_matrix()
    rng = np.random.default_rng([cfg.seed, 0x05E7])
    users = np.array([r.user for r in logs])
    items = np.array([r.item for r in logs])
    ratings = np.array([r.rating for r in logs])
    scale = float(ratings.max()) if ratings.max() > 0 else 1.0
    targets = ratings / scale

    model = InterestModel(n_users, n_items, cfg.dim, cfg.hidden, rng=rng)
    model.check_ids(users, items)
    if cfg.loss == "mse":
        model.params["bias"].data[:] = targets.mean()
    ep = ExposureParams.neutral(n_users, n_items, tau=cfg.tau, tau_star=cfg.tau_star,
                                gamma_star=cfg.gamma_star)
    attach_exposure(model, ep)

    sums_all = exposure_sums(logs, dist, cfg.tau)
    pos_sums = sums_all[np.arange(len(logs)), items]
    seen = np.zeros((n_users, n_items), dtype=bool)
    seen[users, items] = True

    opt = nn.Adam(model.params, lr=cfg.lr)
    curve = []
    n = len(logs)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        if cfg.loss == "bpr":
            neg = _sample_negatives(users, items, seen, rng)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            if cfg.loss == "mse":
                loss = training_loss(model, users[b], items[b], pos_sums[b], targets=targets[b])
            else:
                loss = training_loss(model, users[b], items[b], pos_sums[b], neg_items=neg[b],
                                     neg_sums=sums_all[b, neg[b]], loss="bpr")
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch offset {s}: {value}")
            model.params.zero_grad()
            nn.backward(loss)
            opt.step()
            total += value * len(b)
        curve.append(total / n)
        log.debug("user model epoch %d loss %.6f", epoch, curve[-1])

    ep.alpha_raw = model.params["alpha_raw"].data.ravel().copy()
    ep.beta_raw = model.params["beta_raw"].data.ravel().copy()
    cum = CausalUserModel(model.table(), ep, dist, scale, curve)
    return cum, model


def _sample_negatives(users, items, seen, rng) -> np.ndarray:
    neg = np.empty_like(items)
    n_items = seen.shape[1]
    for k, (u, i) in enumerate(zip(users, items)):
        pool = np.flatnonzero(~seen[u])
        if pool.size == 0:
            pool = np.delete(np.arange(n_items), i)
        neg[k] = pool[rng.integers(pool.size)]
    return neg


def bandit_model(means: Sequence[float]) -> CausalUserModel:
    """Single-user, exposure-free model whose interest is a fixed arm table."""
    means = np.asarray(means, dtype=float)[None, :]
    n = means.shape[1]
    return CausalUserModel(means, ExposureParams.neutral(1, n), np.ones((n, n)))


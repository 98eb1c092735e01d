"""Non-RL comparison policies: random, epsilon-greedy, softmax sampling, UCB1."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softmax_probs(scores, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(scores, dtype=float) / temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def select_static(scores, strategy: str, rng: np.random.Generator, epsilon: float = 0.1,
                  temperature: float = 1.0) -> int:
    """One recommendation from per-item scores of a static interest model."""
    scores = np.asarray(scores, dtype=float)
    if scores.size == 0:
        raise ValueError("empty catalog")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    n = scores.size
    if strategy == "random":
        return int(rng.integers(n))
    if strategy == "eps-greedy":
        # always draw, so the stream position does not depend on the branch taken
        explore, pick = rng.random(), int(rng.integers(n))
        return pick if explore < epsilon else int(np.argmax(scores))
    if strategy == "softmax-sample":
        cdf = np.cumsum(softmax_probs(scores, temperature))
        return int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), n - 1))
    raise ValueError(f"unknown strategy {strategy!r}")


@dataclass
class BanditStats:
    n_items: int
    c: float = 1.0
    counts: np.ndarray = field(default=None)
    means: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros(self.n_items, dtype=np.int64)
        if self.means is None:
            self.means = np.zeros(self.n_items)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, item: int, reward: float) -> None:
        self.counts[item] += 1
        self.means[item] += (reward - self.means[item]) / self.counts[item]


def select_ucb(stats: BanditStats, rng: np.random.Generator | None = None) -> int:
    """UCB1: unpulled items first (lowest id), then mean + c*sqrt(2 ln T / n)."""
    unpulled = np.flatnonzero(stats.counts == 0)
    if unpulled.size:
        return int(unpulled[0])
    bonus = stats.c * np.sqrt(2.0 * np.log(stats.total) / stats.counts)
    return int(np.argmax(stats.means + bonus))


# ---------------------------------------------------------------- evaluation adapters

@dataclass
class StaticPolicy:
    """Per-user score table + selection strategy; stateless across episodes."""

    scores: np.ndarray  # (n_users, n_items)
    strategy: str
    epsilon: float = 0.1
    temperature: float = 1.0
    sequential: bool = field(default=False, init=False)

    def start(self, users, rngs):
        return _StaticSession(self, np.asarray(users), rngs)


class _StaticSession:
    def __init__(self, pol: StaticPolicy, users, rngs):
        self.pol, self.users, self.rngs = pol, users, rngs

    def select(self) -> np.ndarray:
        p = self.pol
        return np.array([select_static(p.scores[u], p.strategy, r, p.epsilon, p.temperature)
                         for u, r in zip(self.users, self.rngs)])

    def observe(self, items, rewards) -> None:
        pass


@dataclass
class UCBPolicy:
    """UCB1 whose statistics persist across every evaluated trajectory."""

    n_items: int
    c: float = 1.0
    sequential: bool = field(default=True, init=False)

    def __post_init__(self):
        self.stats = BanditStats(self.n_items, self.c)

    def start(self, users, rngs):
        return _UCBSession(self)


class _UCBSession:
    def __init__(self, pol: UCBPolicy):
        self.pol = pol

    def select(self) -> np.ndarray:
        return np.array([select_ucb(self.pol.stats)])

    def observe(self, items, rewards) -> None:
        self.pol.stats.update(int(items[0]), float(rewards[0]))

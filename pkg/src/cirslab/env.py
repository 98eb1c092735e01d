"""Interactive recommendation environments with a "bored, then quit" exit rule.

An ``Environment`` is a fully observed user x item interest matrix plus an
item catalog. Episodes end when a recommendation is too similar to the last
``N`` recommendations (bubble exit, reward 0) or at the horizon.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

MAX_TAGS = 4
VT_USER_DIM = 88
VT_ACTION_DIM = 27
VT_MAX_RATING = 10


class ParseError(ValueError):
    def __init__(self, path, line: int, column: int, msg: str):
        super().__init__(f"{path}:{line}:{column}: {msg}")
        self.path, self.line, self.column = path, line, column


class IncompleteMatrixError(ValueError):
    pass


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class ItemCatalog:
    """Either categorical (multi-hot tags) or continuous (feature vectors)."""

    mode: str  # "categorical" | "continuous"
    features: np.ndarray  # (n_items, vocab) multi-hot, or (n_items, d_a)

    def __post_init__(self):
        if self.mode not in ("categorical", "continuous"):
            raise ValueError(f"unknown catalog mode {self.mode!r}")
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("catalog features must be a non-empty 2-D array")
        if self.mode == "categorical":
            counts = self.features.sum(axis=1)
            if counts.min() < 1 or counts.max() > MAX_TAGS:
                raise ValueError(f"every item needs 1..{MAX_TAGS} tags")

    @classmethod
    def from_tags(cls, tags: Sequence[Sequence[int]], vocab: int) -> "ItemCatalog":
        hot = np.zeros((len(tags), vocab))
        for i, ts in enumerate(tags):
            hot[i, list(ts)] = 1.0
        return cls("categorical", hot)

    @property
    def n_items(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def tags(self, item: int) -> set[int]:
        return set(np.flatnonzero(self.features[item]).tolist())

    def _check(self, item: int) -> None:
        if not 0 <= item < self.n_items:
            raise KeyError(f"unknown item id {item}")

    def distance_matrix(self) -> np.ndarray:
        f = self.features
        if self.mode == "categorical":
            # |a xor b| for multi-hot rows = |a| + |b| - 2|a & b|
            cnt = f.sum(axis=1)
            return (cnt[:, None] + cnt[None, :] - 2 * f @ f.T) / f.shape[1]
        sq = (f * f).sum(axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * f @ f.T, 0.0)
        np.fill_diagonal(d2, 0.0)
        return np.sqrt(d2)

    def share_matrix(self) -> np.ndarray:
        """Boolean (n, n): items share at least one tag (categorical only)."""
        return (self.features @ self.features.T) > 0


def item_distance(i: int, j: int, catalog: ItemCatalog) -> float:
    catalog._check(i)
    catalog._check(j)
    a, b = catalog.features[i], catalog.features[j]
    if catalog.mode == "categorical":
        return float(np.count_nonzero(a != b)) / catalog.dim
    return float(np.linalg.norm(a - b))


@dataclass(frozen=True)
class ExitConfig:
    window: int = 1  # N
    mode: str = "categorical"
    n_q: int = 1
    d_q: float = 3.0
    max_round: int = 30  # H

    def __post_init__(self):
        if self.window < 1 or self.max_round < 1:
            raise ValueError("window and max_round must be >= 1")
        if self.mode == "categorical" and self.n_q < 1:
            raise ValueError("n_q must be >= 1")
        if self.mode == "continuous" and not self.d_q > 0:
            raise ValueError("d_q must be > 0")


def check_exit(window: Sequence[int], candidate: int, cfg: ExitConfig, catalog: ItemCatalog) -> bool:
    """True when recommending ``candidate`` after ``window`` makes the user quit."""
    if not window:
        return False
    f = catalog.features
    recent = np.asarray(window, dtype=np.int64)
    if cfg.mode == "continuous":
        d = np.linalg.norm(f[recent] - f[candidate], axis=1)
        return bool(d.min() < cfg.d_q)
    shared = (f[recent] @ f[candidate]) > 0
    return int(shared.sum()) >= cfg.n_q


@dataclass(frozen=True)
class EnvState:
    user: int
    t: int = 0
    window: tuple[int, ...] = ()
    done: bool = False
    cum_reward: float = 0.0


@dataclass(frozen=True)
class StepResult:
    reward: float
    done: bool
    exit_reason: str  # "none" | "bubble" | "horizon"


@dataclass(frozen=True)
class Environment:
    ratings: np.ndarray  # (n_users, n_items), fully observed
    catalog: ItemCatalog
    exit: ExitConfig
    user_features: np.ndarray = field(default=None)  # (n_users, d_u)

    def __post_init__(self):
        r = self.ratings
        if r.ndim != 2 or r.shape[1] != self.catalog.n_items:
            raise ValueError(f"rating matrix shape {r.shape} does not match {self.catalog.n_items} items")
        if not np.all(np.isfinite(r)) or r.min() < 0:
            raise ValueError("ratings must be finite and non-negative")
        if self.catalog.mode != self.exit.mode:
            raise ValueError(f"exit mode {self.exit.mode!r} does not match catalog mode {self.catalog.mode!r}")
        if self.user_features is None:
            object.__setattr__(self, "user_features", np.eye(r.shape[0]))

    @property
    def n_users(self) -> int:
        return self.ratings.shape[0]

    @property
    def n_items(self) -> int:
        return self.ratings.shape[1]

    def with_exit(self, **changes) -> "Environment":
        return replace(self, exit=replace(self.exit, **changes))

    def reset(self, user: int, seed: int | None = None) -> EnvState:
        # seed accepted for interface symmetry; resets are deterministic
        if not 0 <= user < self.n_users:
            raise KeyError(f"unknown user id {user}")
        return EnvState(user=user)

    def step(self, state: EnvState, item: int) -> tuple[EnvState, StepResult]:
        if state.done:
            raise EpisodeDoneError("step() called on a finished episode")
        self.catalog._check(item)
        if check_exit(state.window, item, self.exit, self.catalog):
            nxt = replace(state, t=state.t + 1, done=True)
            return nxt, StepResult(0.0, True, "bubble")
        reward = float(self.ratings[state.user, item])
        window = deque(state.window, maxlen=self.exit.window)
        window.append(item)
        t = state.t + 1
        done = t >= self.exit.max_round
        nxt = EnvState(state.user, t, tuple(window), done, state.cum_reward + reward)
        return nxt, StepResult(reward, done, "horizon" if done else "none")


# ---------------------------------------------------------------- file formats

def _read_rows(path, header: list[str] | None, prefix: str | None = None):
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            head = next(reader)
        except StopIteration:
            raise ParseError(path, 1, 1, "empty file") from None
        head = [h.strip() for h in head]
        if header is not None and head != header:
            raise ParseError(path, 1, 1, f"expected header {','.join(header)!r}, got {','.join(head)!r}")
        if prefix is not None and (not head or head[0] != prefix):
            raise ParseError(path, 1, 1, f"expected first column {prefix!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(head):
                raise ParseError(path, lineno, min(len(row), len(head)) + 1,
                                 f"expected {len(head)} fields, got {len(row)}")
            yield lineno, head, row


def _parse(path, lineno, col, text, kind):
    try:
        return kind(text.strip())
    except ValueError:
        raise ParseError(path, lineno, col, f"cannot parse {text!r} as {kind.__name__}") from None


@dataclass(frozen=True)
class InteractionRecord:
    user: int
    item: int
    t: float
    rating: float


RATINGS_HEADER = ["user_id", "item_id", "timestamp", "rating"]


def load_logs(path) -> list[InteractionRecord]:
    """Sparse interaction log in the ratings-file format."""
    out = []
    for lineno, _, row in _read_rows(path, RATINGS_HEADER):
        u = _parse(path, lineno, 1, row[0], int)
        i = _parse(path, lineno, 2, row[1], int)
        t = _parse(path, lineno, 3, row[2], float)
        r = _parse(path, lineno, 4, row[3], float)
        if u < 0 or i < 0:
            raise ParseError(path, lineno, 1 if u < 0 else 2, "ids must be non-negative")
        if not np.isfinite(r) or r < 0:
            raise ParseError(path, lineno, 4, f"rating must be a non-negative number, got {row[3]!r}")
        out.append(InteractionRecord(u, i, t, r))
    return out


def load_matrix(path, n_users: int | None = None, n_items: int | None = None) -> np.ndarray:
    """Dense matrix from a ratings file; every (user, item) cell must be present."""
    recs = load_logs(path)
    if not recs:
        raise ParseError(path, 2, 1, "no ratings")
    n_users = n_users or 1 + max(r.user for r in recs)
    n_items = n_items or 1 + max(r.item for r in recs)
    m = np.full((n_users, n_items), np.nan)
    for r in recs:
        m[r.user, r.item] = r.rating
    missing = np.argwhere(np.isnan(m))
    if missing.size:
        u, i = missing[0]
        raise IncompleteMatrixError(
            f"{path}: matrix not fully observed, {len(missing)} missing cells; first is user={u}, item={i}")
    return m


def load_catalog(path, n_tags: int | None = None) -> ItemCatalog:
    """Read a tag or vector catalog. The tag vocabulary defaults to max tag + 1."""
    rows_ = list(_read_rows(path, None, prefix="item_id"))
    if not rows_:
        raise ParseError(path, 2, 1, "empty catalog")
    head = rows_[0][1]
    ids = [_parse(path, ln, 1, row[0], int) for ln, _, row in rows_]
    if sorted(ids) != list(range(len(ids))):
        raise ParseError(path, rows_[0][0], 1, "item ids must be exactly 0..n-1")
    order = np.argsort(ids)
    if head == ["item_id", "tags"]:
        tags = []
        vocab = 0
        for ln, _, row in rows_:
            parts = [p for p in row[1].split("|") if p.strip()]
            if not 1 <= len(parts) <= MAX_TAGS:
                raise ParseError(path, ln, 2, f"item needs 1..{MAX_TAGS} tags, got {len(parts)}")
            ts = [_parse(path, ln, 2, p, int) for p in parts]
            if min(ts) < 0 or (n_tags is not None and max(ts) >= n_tags):
                raise ParseError(path, ln, 2, "tag id out of range")
            vocab = max(vocab, max(ts) + 1)
            tags.append(ts)
        return ItemCatalog.from_tags([tags[k] for k in order], n_tags or vocab)
    expected = ["item_id"] + [f"v{k}" for k in range(len(head) - 1)]
    if head != expected or len(head) < 2:
        raise ParseError(path, 1, 1, "catalog header must be 'item_id,tags' or 'item_id,v0,...'")
    vecs = np.array([[_parse(path, ln, c + 2, v, float) for c, v in enumerate(row[1:])]
                     for ln, _, row in rows_])
    return ItemCatalog("continuous", vecs[order])


def write_ratings(path, records: Sequence[InteractionRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RATINGS_HEADER)
        for r in records:
            w.writerow([r.user, r.item, repr(float(r.t)), repr(float(r.rating))])


def write_matrix(path, matrix: np.ndarray) -> None:
    write_ratings(path, [InteractionRecord(u, i, 0.0, float(matrix[u, i]))
                         for u in range(matrix.shape[0]) for i in range(matrix.shape[1])])


def write_catalog(path, catalog: ItemCatalog) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if catalog.mode == "categorical":
            w.writerow(["item_id", "tags"])
            for i in range(catalog.n_items):
                w.writerow([i, "|".join(str(t) for t in sorted(catalog.tags(i)))])
        else:
            w.writerow(["item_id"] + [f"v{k}" for k in range(catalog.dim)])
            for i, v in enumerate(catalog.features):
                w.writerow([i] + [repr(float(x)) for x in v])


# ---------------------------------------------------------------- synthetic

@dataclass(frozen=True)
class SynthSpec:
    mode: str = "categorical"
    n_users: int = 20
    n_items: int = 100
    n_tags: int = 10
    action_dim: int = VT_ACTION_DIM
    user_dim: int = VT_USER_DIM
    max_rating: float = 3.0  # categorical watch-ratio ceiling
    tag_count_probs: tuple[float, ...] = (0.75, 0.18, 0.05, 0.02)
    seed: int = 0


def synth_env(spec: SynthSpec) -> tuple[np.ndarray, ItemCatalog, np.ndarray]:
    """Seeded stand-in for KuaiEnv (categorical) or VirtualTaobao (continuous).

    Returns the interest matrix, the catalog, and user feature vectors.
    """
    if spec.n_users < 1 or spec.n_items < 1:
        raise ValueError("user and item counts must be >= 1")
    rng = np.random.default_rng([spec.seed, 0xE5])
    if spec.mode == "categorical":
        k = rng.choice(np.arange(1, MAX_TAGS + 1), size=spec.n_items, p=spec.tag_count_probs)
        k = np.minimum(k, spec.n_tags)
        tags = [rng.choice(spec.n_tags, size=c, replace=False) for c in k]
        catalog = ItemCatalog.from_tags(tags, spec.n_tags)
        tag_aff = rng.normal(0.0, 1.0, size=(spec.n_users, spec.n_tags))
        pu = rng.normal(0.0, 0.6, size=(spec.n_users, 4))
        qi = rng.normal(0.0, 0.6, size=(spec.n_items, 4))
        quality = rng.normal(0.0, 0.5, size=spec.n_items)
        hot = catalog.features
        logit = (tag_aff @ hot.T) / hot.sum(axis=1) + pu @ qi.T + quality - 0.5
        ratings = spec.max_rating / (1.0 + np.exp(-1.5 * logit))
        users = np.eye(spec.n_users)
        return ratings, catalog, users
    if spec.mode == "continuous":
        users = (rng.random((spec.n_users, spec.user_dim)) < 0.3).astype(float)
        items = rng.random((spec.n_items, spec.action_dim))
        proj = rng.normal(0.0, 1.0 / np.sqrt(spec.user_dim * 0.3), size=(spec.user_dim, spec.action_dim))
        taste = users @ proj
        score = taste @ (items - 0.5).T
        score = score / max(score.std(), 1e-12)
        ratings = np.rint(VT_MAX_RATING / (1.0 + np.exp(-1.2 * score))).clip(0, VT_MAX_RATING)
        return ratings, ItemCatalog("continuous", items), users
    raise ValueError(f"unknown synthetic mode {spec.mode!r}")


@dataclass(frozen=True)
class LogSpec:
    """Ground-truth exposure process for synthetic training logs."""

    records_per_user: int = 60
    mean_gap: float = 20.0  # seconds between consecutive logged views
    tau: float = 2.0
    alpha_range: tuple[float, float] = (0.2, 3.0)
    beta: float = 1.0
    noise: float = 0.05
    logging_temperature: float = 0.5
    seed: int = 0


def generate_logs(ratings: np.ndarray, catalog: ItemCatalog, spec: LogSpec):
    """Simulate logged sessions where overexposure shrinks observed ratings.

    Observed rating = interest / (1 + alpha_u * beta * sum_l exp(-gap_l / tau * dist)),
    plus multiplicative noise. Returns (records, planted per-user alpha).
    """
    rng = np.random.default_rng([spec.seed, 0x1065])
    n_users, n_items = ratings.shape
    lo, hi = spec.alpha_range
    alpha = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n_users))
    dist = catalog.distance_matrix()
    scale = ratings.max() if ratings.max() > 0 else 1.0
    records = []
    for u in range(n_users):
        logits = ratings[u] / scale / spec.logging_temperature
        p = np.exp(logits - logits.max())
        p /= p.sum()
        items = rng.choice(n_items, size=spec.records_per_user, p=p)
        times = np.cumsum(rng.exponential(spec.mean_gap, size=spec.records_per_user) + 1.0)
        for k in range(spec.records_per_user):
            i = items[k]
            if k and spec.tau > 0:
                gaps = times[k] - times[:k]
                e = alpha[u] * spec.beta * np.exp(-gaps / spec.tau * dist[i, items[:k]]).sum()
            else:
                e = 0.0
            r = ratings[u, i] / (1.0 + e) * np.exp(rng.normal(0.0, spec.noise))
            records.append(InteractionRecord(u, int(i), float(times[k]), float(r)))
    return records, alpha

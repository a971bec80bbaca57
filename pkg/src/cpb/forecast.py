"""EWMA scoring of attacker /24s and blacklist/whitelist construction."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError
from .ingest import OrgDataset, WindowSpec


def ewma_weights(length: int, alpha: float) -> np.ndarray:
    """Weight of each of ``length`` past days, oldest first: alpha*(1-alpha)**age."""
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must lie strictly inside (0, 1), got {alpha}")
    age = np.arange(length - 1, -1, -1, dtype=np.float64)
    return alpha * (1.0 - alpha) ** age


def ewma_score(signal: Sequence[float], alpha: float) -> float:
    """Predicted next value of ``signal`` (oldest observation first)."""
    r = np.asarray(signal, dtype=np.float64)
    if r.ndim != 1 or len(r) == 0:
        raise ConfigError("signal must be a non-empty 1-d sequence")
    return float(np.dot(ewma_weights(len(r), alpha), r))


@dataclass
class SharedPool:
    """D'_i: events an organization received from collaborators.

    Parallel arrays, one row per (prefix, day, source) with its multiplicity.
    """

    org: str
    prefix: np.ndarray
    day: np.ndarray
    source: np.ndarray
    count: np.ndarray

    def __post_init__(self):
        self.prefix = np.asarray(self.prefix, dtype=np.uint32)
        self.day = np.asarray(self.day, dtype=np.int32)
        self.source = np.asarray(self.source, dtype=str) if len(self.source) else np.empty(0, dtype="<U1")
        self.count = np.asarray(self.count, dtype=np.int64)

    @classmethod
    def empty(cls, org: str) -> "SharedPool":
        return cls(org, [], [], [], [])

    def __len__(self) -> int:
        return len(self.prefix)

    def size(self) -> int:
        return int(self.count.sum())

    def canonical(self) -> "SharedPool":
        """Merge duplicate rows and sort by (prefix, day, source)."""
        if len(self) == 0:
            return SharedPool.empty(self.org)
        srcs, src_idx = np.unique(self.source, return_inverse=True)
        key = np.stack([self.prefix.astype(np.int64), self.day.astype(np.int64), src_idx.astype(np.int64)])
        uniq, inv = np.unique(key, axis=1, return_inverse=True)
        inv = np.asarray(inv).reshape(-1)
        counts = np.bincount(inv, weights=self.count, minlength=uniq.shape[1]).astype(np.int64)
        return SharedPool(self.org, uniq[0], uniq[1], srcs[uniq[2]], counts)

    def records(self) -> list[tuple[int, int, str, int]]:
        c = self.canonical()
        return list(zip(c.prefix.tolist(), c.day.tolist(), c.source.tolist(), c.count.tolist()))

    def to_bytes(self) -> bytes:
        """Deterministic serialization used for cross-mode comparisons."""
        return "\n".join(f"{p},{d},{s},{n}" for p, d, s, n in self.records()).encode()

    @staticmethod
    def concat(org: str, pools: Sequence["SharedPool"]) -> "SharedPool":
        pools = [p for p in pools if len(p)]
        if not pools:
            return SharedPool.empty(org)
        return SharedPool(
            org,
            np.concatenate([p.prefix for p in pools]),
            np.concatenate([p.day for p in pools]),
            np.concatenate([p.source for p in pools]),
            np.concatenate([p.count for p in pools]),
        )


@dataclass
class PredictionList:
    """Scores over the candidate universe, split at ``tau``.

    ``universe`` is sorted ascending and aligned with ``scores``.
    """

    org: str
    window: WindowSpec | None
    tau: float
    universe: np.ndarray
    scores: np.ndarray

    @property
    def blacklist(self) -> np.ndarray:
        return self.universe[self.scores >= self.tau]

    @property
    def whitelist(self) -> np.ndarray:
        return self.universe[self.scores < self.tau]

    def score_map(self) -> dict[int, float]:
        return dict(zip(self.universe.tolist(), self.scores.tolist()))


def predict(
    org_train: OrgDataset,
    shared: SharedPool | None,
    train_days: Sequence[int] | WindowSpec,
    alpha: float = 0.9,
    tau: float = 0.5,
    mode: str = "presence",
) -> PredictionList:
    """EWMA-score every prefix seen locally or in the shared pool.

    In presence mode a day counts once whether the prefix was seen locally,
    in shared data, or both; in count mode event counts are summed.
    """
    window = train_days if isinstance(train_days, WindowSpec) else None
    days = np.asarray(window.train_days if window else train_days, dtype=np.int64)
    weights = ewma_weights(len(days), alpha)

    prefix, day, count = org_train.prefix, org_train.day, org_train.count
    if shared is not None and len(shared):
        prefix = np.concatenate([prefix, shared.prefix])
        day = np.concatenate([day, shared.day])
        count = np.concatenate([count, shared.count])
    inside = np.isin(day, days)
    if not inside.all():
        raise ConfigError(f"{org_train.org}: data outside the training window")
    universe, row = np.unique(prefix, return_inverse=True)
    col = np.searchsorted(days, day)
    signal = np.zeros((len(universe), len(days)))
    if mode == "presence":
        signal[row, col] = 1.0
    elif mode == "count":
        np.add.at(signal, (row, col), count)
    else:
        raise ConfigError(f"unknown signal mode {mode!r}")
    return PredictionList(org_train.org, window, tau, universe.astype(np.uint32), signal @ weights)

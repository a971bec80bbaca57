"""Clustering organizations from an O2O matrix: k-means, k-NN, agglomerative.

All three are deterministic for fixed inputs (and seed, for k-means); ties
resolve toward the lowest organization index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError
from .similarity import SimilarityMatrix

METHODS = ("kmeans", "knn", "agglomerative")


@dataclass
class ClusterAssignment:
    """Either a partition (k-means, agglomerative) or per-org neighborhoods (k-NN).

    In partition mode ``members`` maps cluster id to its non-outlier members;
    ``labels`` keeps every organization's cluster before outlier removal.
    """

    mode: str
    orgs: tuple[str, ...]
    members: dict[int, frozenset[str]] = field(default_factory=dict)
    labels: dict[str, int] = field(default_factory=dict)
    neighbors: dict[str, frozenset[str]] = field(default_factory=dict)
    outliers: frozenset[str] = frozenset()

    def __post_init__(self):
        if self.mode not in ("partition", "neighborhood"):
            raise ValueError(f"unknown assignment mode {self.mode!r}")
        if self.mode == "partition":
            self._cluster_of = {o: c for c, ms in self.members.items() for o in ms}

    def peers(self, org: str) -> frozenset[str]:
        """Organizations whose data ``org`` may receive."""
        if self.mode == "neighborhood":
            return self.neighbors.get(org, frozenset())
        c = self._cluster_of.get(org)
        if c is None:
            return frozenset()
        return self.members[c] - {org}

    def cluster_of(self, org: str) -> int | None:
        if self.mode == "neighborhood":
            return None if not self.neighbors.get(org) else self.orgs.index(org)
        return self._cluster_of.get(org)

    def is_collaborator(self, org: str) -> bool:
        """Assigned to a cluster (partition) or holding a non-empty neighborhood."""
        if self.mode == "neighborhood":
            return bool(self.neighbors.get(org))
        return org in self._cluster_of

    @property
    def collaborators(self) -> list[str]:
        return [o for o in self.orgs if self.is_collaborator(o)]

    @property
    def degenerate(self) -> bool:
        """True when nobody has a peer, so every strategy equals local."""
        return not any(self.peers(o) for o in self.orgs)

    def avg_size(self) -> float:
        if self.mode == "neighborhood":
            sizes = [len(v) + 1 for v in self.neighbors.values() if v]
        else:
            sizes = [len(v) for v in self.members.values() if v]
        return float(np.mean(sizes)) if sizes else 0.0

    def canonical(self) -> tuple:
        """Hashable, order-independent summary for equality checks."""
        if self.mode == "neighborhood":
            return ("neighborhood", tuple((o, tuple(sorted(self.neighbors.get(o, ())))) for o in self.orgs))
        return (
            "partition",
            tuple((o, self.labels.get(o, -1), o in self.outliers) for o in self.orgs),
        )

    def rows(self) -> list[dict]:
        """Debug dump: one row per organization."""
        out = []
        for o in self.orgs:
            if self.mode == "neighborhood":
                cluster = ";".join(sorted(self.neighbors.get(o, ())))
            else:
                cluster = self.labels.get(o, "")
            out.append({"org": o, "cluster": cluster, "outlier": int(o in self.outliers)})
        return out


@dataclass(frozen=True)
class ClusteringSpec:
    method: str = "kmeans"
    k: int = 5
    threshold_pct: float = 40.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown clustering {self.method!r}; choose from {METHODS}")
        if not 0 <= self.threshold_pct <= 100:
            raise ConfigError("threshold_pct must be in [0, 100]")


def cluster(m: SimilarityMatrix, spec: ClusteringSpec) -> ClusterAssignment:
    if spec.method == "kmeans":
        return cluster_kmeans(m, spec.k, spec.threshold_pct, seed=spec.seed)
    if spec.method == "knn":
        return cluster_knn(m, spec.k, spec.threshold_pct)
    return cluster_agglomerative(m, spec.k)


def _partition(orgs, labels, outlier_mask) -> ClusterAssignment:
    # relabel clusters by their lowest member index so ids do not depend on seeding order
    first = {}
    for i, lab in enumerate(labels):
        first.setdefault(int(lab), i)
    relabel = {lab: rank for rank, (lab, _) in enumerate(sorted(first.items(), key=lambda kv: kv[1]))}
    lab_of = {orgs[i]: relabel[int(lab)] for i, lab in enumerate(labels)}
    members: dict[int, set] = {c: set() for c in relabel.values()}
    outliers = set()
    for i, o in enumerate(orgs):
        if outlier_mask[i]:
            outliers.add(o)
        else:
            members[lab_of[o]].add(o)
    return ClusterAssignment(
        "partition",
        tuple(orgs),
        members={c: frozenset(v) for c, v in members.items()},
        labels=lab_of,
        outliers=frozenset(outliers),
    )


def _kpp_seed(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = ((X - X[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        d2c = d2.copy()
        d2c[chosen] = 0.0
        total = d2c.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2c / total))
        else:
            # every remaining point duplicates a center: take the lowest unused index
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[chosen].copy()


def _lloyd(X: np.ndarray, centers: np.ndarray, max_iter: int):
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        new = centers.copy()
        for c in range(len(centers)):
            sel = labels == c
            if sel.any():
                new[c] = X[sel].mean(axis=0)
        if np.array_equal(new, centers):
            break
        centers = new
    d2 = ((X[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    return labels, centers, d2[np.arange(len(X)), labels]


def cluster_kmeans(
    m: SimilarityMatrix,
    k: int,
    threshold_pct: float = 40.0,
    seed: int = 0,
    n_init: int = 10,
    max_iter: int = 300,
) -> ClusterAssignment:
    """Euclidean k-means on O2O rows, then drop members far from their centroid.

    Organizations whose centroid distance exceeds the ``threshold_pct``
    percentile of all such distances become outliers.
    """
    if not 1 <= k <= m.n:
        raise ConfigError(f"k-means needs 1 <= k <= n ({m.n}), got {k}")
    X = m.cells.astype(np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        labels, _, d2 = _lloyd(X, _kpp_seed(X, k, rng), max_iter)
        inertia = float(d2.sum())
        if best is None or inertia < best[0]:
            best = (inertia, labels, d2)
    _, labels, d2 = best
    dist = np.sqrt(d2)
    cut = np.percentile(dist, threshold_pct)
    return _partition(m.orgs, labels, dist > cut)


def cluster_knn(m: SimilarityMatrix, k: int, threshold_pct: float = 40.0) -> ClusterAssignment:
    """Each organization's ``k`` most similar peers, minus links beyond the distance percentile.

    Link distance is the normalized O2O distance; the percentile is taken over
    all n*k selected links.
    """
    n = m.n
    if not 1 <= k < n:
        raise ConfigError(f"k-NN needs 1 <= k < n ({n}), got {k}")
    sim = m.cells.astype(np.float64)
    dist = m.normalized_distance()
    idx = np.arange(n)
    chosen = []
    for i in range(n):
        row = sim[i].copy()
        row[i] = -np.inf
        order = np.lexsort((idx, -row))
        chosen.append(order[:k])
    link_d = np.concatenate([dist[i, chosen[i]] for i in range(n)])
    cut = np.percentile(link_d, threshold_pct)
    neighbors = {}
    for i in range(n):
        keep = [j for j in chosen[i] if dist[i, j] <= cut]
        neighbors[m.orgs[i]] = frozenset(m.orgs[j] for j in keep)
    return ClusterAssignment("neighborhood", m.orgs, neighbors=neighbors)


def cluster_agglomerative(m: SimilarityMatrix, k: int) -> ClusterAssignment:
    """Average-linkage merging on normalized O2O distance until ``k`` clusters remain."""
    n = m.n
    if not 1 <= k <= n:
        raise ConfigError(f"agglomerative needs 1 <= k <= n ({n}), got {k}")
    D = m.normalized_distance().astype(np.float64)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    labels = np.arange(n)
    active = n
    while active > k:
        # row-major argmin: lowest representative pair wins ties
        a, b = divmod(int(np.argmin(D)), n)
        a, b = min(a, b), max(a, b)
        merged = (size[a] * D[a] + size[b] * D[b]) / (size[a] + size[b])
        D[a, :] = merged
        D[:, a] = merged
        D[a, a] = np.inf
        D[b, :] = np.inf
        D[:, b] = np.inf
        size[a] += size[b]
        labels[labels == b] = a
        active -= 1
    return _partition(m.orgs, labels, np.zeros(n, dtype=bool))

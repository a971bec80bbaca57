"""Attacker-to-attacker correlation inside a cluster (IP2IP recommendation).

Each heavy-hitter prefix is described by which cluster member it hit on which
training day. Prefixes with similar victim-day footprints (cosine) are
treated as correlated, and an organization is recommended the correlated
prefixes it has not observed itself.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..ingest import OrgDataset


def heavy_hitters(datasets: Sequence[OrgDataset], top: int = 1000) -> np.ndarray:
    """The ``top`` prefixes by total event count; ties go to the lower prefix."""
    if not datasets:
        return np.empty(0, dtype=np.uint32)
    prefix = np.concatenate([d.prefix for d in datasets])
    count = np.concatenate([d.count for d in datasets])
    uniq, inv = np.unique(prefix, return_inverse=True)
    totals = np.bincount(inv, weights=count, minlength=len(uniq))
    order = np.lexsort((uniq, -totals))
    return uniq[order[:top]]


def incidence(datasets: Sequence[OrgDataset], hitters: np.ndarray, days: Sequence[int]) -> np.ndarray:
    """Binary matrix: hitter x (member, day)."""
    days = np.asarray(sorted(days))
    sorted_h = np.sort(hitters)
    pos_in_hitters = np.argsort(hitters)
    mat = np.zeros((len(hitters), len(datasets) * len(days)))
    for m, d in enumerate(datasets):
        sel = np.isin(d.prefix, hitters) & np.isin(d.day, days)
        rows = pos_in_hitters[np.searchsorted(sorted_h, d.prefix[sel])]
        cols = m * len(days) + np.searchsorted(days, d.day[sel])
        mat[rows, cols] = 1.0
    return mat


def cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    return unit @ unit.T


def correlate_attackers(
    datasets: Sequence[OrgDataset],
    days: Sequence[int] | None = None,
    top: int = 1000,
    k_rec: int = 50,
) -> dict[str, np.ndarray]:
    """Recommended (unseen, correlated) prefixes for every cluster member.

    A prefix is recommended to an organization when it is among the ``k_rec``
    most cosine-similar heavy hitters (similarity > 0) of some heavy hitter the
    organization observed, and the organization never observed it.
    """
    datasets = list(datasets)
    out = {d.org: np.empty(0, dtype=np.uint32) for d in datasets}
    if len(datasets) < 2:
        return out
    if days is None:
        days = np.unique(np.concatenate([d.day for d in datasets]))
    hitters = np.sort(heavy_hitters(datasets, top))
    if len(hitters) == 0:
        return out
    sim = cosine_matrix(incidence(datasets, hitters, days))
    np.fill_diagonal(sim, -np.inf)
    # stable sort on -sim keeps lower prefixes first among equal similarities
    order = np.argsort(-sim, axis=1, kind="stable")[:, :k_rec]
    top_sim = np.take_along_axis(sim, order, axis=1)
    for d in datasets:
        seen = np.isin(hitters, d.prefix)
        if not seen.any():
            continue
        cand = order[seen][top_sim[seen] > 0]
        rec = np.unique(hitters[cand])
        out[d.org] = rec[~np.isin(rec, d.prefix)]
    return out

"""Data-sharing strategies that build each organization's shared pool D'_i."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from ..errors import ConfigError
from ..forecast import SharedPool
from ..ingest import OrgDataset
from .clustering import ClusterAssignment
from .ip2ip import correlate_attackers
from .similarity import SimilarityMatrix

STRATEGIES = ("local", "global", "intersection", "ip2ip", "ip2ip+intersection", "pair-global", "pair-local")


@dataclass(frozen=True)
class Strategy:
    """A sharing strategy; pair strategies carry a parameter (``pair-global:3``)."""

    name: str
    param: float | None = None

    @classmethod
    def parse(cls, text: "str | Strategy") -> "Strategy":
        if isinstance(text, Strategy):
            return text
        name, _, arg = str(text).strip().partition(":")
        if name not in STRATEGIES:
            raise ConfigError(f"unknown sharing strategy {text!r}; choose from {STRATEGIES}")
        if name.startswith("pair-"):
            if not arg:
                raise ConfigError(f"{name} needs a parameter, e.g. {name}:5")
            try:
                value = float(arg)
            except ValueError as exc:
                raise ConfigError(f"bad parameter in {text!r}") from exc
            if name == "pair-global" and not 0 < value <= 100:
                raise ConfigError("pair-global percentage must be in (0, 100]")
            if name == "pair-local" and (value < 1 or value != int(value)):
                raise ConfigError("pair-local needs a positive integer partner count")
            return cls(name, value)
        if arg:
            raise ConfigError(f"{name} takes no parameter")
        return cls(name)

    def __str__(self) -> str:
        if self.param is None:
            return self.name
        p = int(self.param) if self.param == int(self.param) else self.param
        return f"{self.name}:{p}"

    @property
    def uses_clusters(self) -> bool:
        return not self.name.startswith("pair-")


def _rows(src: OrgDataset, receiver: str, mask=None, count=None) -> SharedPool:
    if mask is None:
        mask = slice(None)
    prefix = src.prefix[mask]
    return SharedPool(
        receiver,
        prefix,
        src.day[mask],
        np.full(len(prefix), src.org),
        src.count[mask] if count is None else count,
    )


def intersection_events(
    receiver: OrgDataset,
    source: OrgDataset,
    granularity: str = "prefix",
    mode: str = "presence",
) -> SharedPool:
    """Events of ``source`` about attacks ``receiver`` also saw.

    ``prefix``: every source event whose prefix the receiver observed on any
    training day. ``element``: only matching (prefix, day) elements, with
    multiplicity min of both sides; this is what the PRP protocol delivers.
    """
    if granularity == "prefix":
        return _rows(source, receiver.org, np.isin(source.prefix, receiver.prefix))
    if granularity == "element":
        _, ir, is_ = np.intersect1d(receiver.keys(), source.keys(), assume_unique=True, return_indices=True)
        mult = np.minimum(receiver.multiplicity(mode)[ir], source.multiplicity(mode)[is_])
        return _rows(source, receiver.org, is_, count=mult)
    raise ConfigError(f"unknown intersection granularity {granularity!r}")


def _recommendations(assignment: ClusterAssignment, datasets, top, k_rec) -> dict[str, np.ndarray]:
    recs: dict[str, np.ndarray] = {}
    if assignment.mode == "partition":
        for members in assignment.members.values():
            if len(members) < 2:
                continue
            group = [datasets[o] for o in sorted(members)]
            recs.update(correlate_attackers(group, top=top, k_rec=k_rec))
    else:
        for org, nbrs in assignment.neighbors.items():
            if not nbrs:
                continue
            group = [datasets[org]] + [datasets[o] for o in sorted(nbrs)]
            recs[org] = correlate_attackers(group, top=top, k_rec=k_rec)[org]
    return recs


def pair_partners(m: SimilarityMatrix, strategy: Strategy, mutual: bool = False) -> dict[str, set[str]]:
    """Partner sets for the pairwise strategies (clusters are ignored)."""
    n = m.n
    partners: dict[str, set[str]] = {o: set() for o in m.orgs}
    if strategy.name == "pair-global":
        iu, ju = np.triu_indices(n, k=1)
        sims = m.cells[iu, ju]
        order = np.lexsort((ju, iu, -sims))
        n_pairs = int(strategy.param / 100.0 * len(iu) + 0.5)
        for idx in order[:n_pairs]:
            a, b = m.orgs[iu[idx]], m.orgs[ju[idx]]
            partners[a].add(b)
            partners[b].add(a)
        return partners
    x = int(strategy.param)
    if x >= n:
        raise ConfigError(f"pair-local:{x} needs more than {x} organizations")
    idx = np.arange(n)
    for i in range(n):
        row = m.cells[i].astype(np.float64)
        row[i] = -np.inf
        picks = np.lexsort((idx, -row))[:x]
        partners[m.orgs[i]] = {m.orgs[j] for j in picks}
    if mutual:
        partners = {o: {p for p in ps if o in partners[p]} for o, ps in partners.items()}
    return partners


def share(
    strategy: "str | Strategy",
    assignment: ClusterAssignment | None,
    datasets: Mapping[str, OrgDataset],
    similarity: SimilarityMatrix | None = None,
    *,
    granularity: str = "prefix",
    mode: str = "presence",
    top: int = 1000,
    k_rec: int = 50,
    mutual: bool = False,
) -> dict[str, SharedPool]:
    """Shared pool for every organization in ``datasets`` under ``strategy``."""
    strategy = Strategy.parse(strategy)
    orgs = list(datasets)
    if strategy.name == "local":
        return {o: SharedPool.empty(o) for o in orgs}

    if strategy.uses_clusters:
        if assignment is None:
            raise ConfigError(f"{strategy} needs a cluster assignment")
        partners = {o: set(assignment.peers(o)) for o in orgs}
    else:
        if similarity is None:
            raise ConfigError(f"{strategy} needs the similarity matrix")
        partners = pair_partners(similarity, strategy, mutual)

    name = strategy.name
    recs = _recommendations(assignment, datasets, top, k_rec) if name.startswith("ip2ip") else {}

    pools = {}
    for o in orgs:
        mine = datasets[o]
        parts = []
        for p in sorted(partners[o]):
            src = datasets[p]
            if name == "global":
                parts.append(_rows(src, o))
            if name in ("intersection", "ip2ip+intersection", "pair-global", "pair-local"):
                parts.append(intersection_events(mine, src, granularity, mode))
            if name in ("ip2ip", "ip2ip+intersection"):
                rec = recs.get(o)
                if rec is not None and len(rec):
                    parts.append(_rows(src, o, np.isin(src.prefix, rec)))
        pools[o] = SharedPool.concat(o, parts)
    return pools

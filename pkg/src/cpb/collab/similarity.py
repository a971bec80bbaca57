"""Organization-to-organization (O2O) similarity: multiset intersection sizes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..ingest import OrgDataset


@dataclass
class SimilarityMatrix:
    orgs: tuple[str, ...]
    cells: np.ndarray

    def __post_init__(self):
        self.orgs = tuple(self.orgs)
        self.cells = np.asarray(self.cells, dtype=np.int64)
        if self.cells.shape != (len(self.orgs), len(self.orgs)):
            raise ValueError("cells must be n x n for n orgs")

    @property
    def n(self) -> int:
        return len(self.orgs)

    def index(self, org: str) -> int:
        return self.orgs.index(org)

    def __getitem__(self, pair: tuple[str, str]) -> int:
        i, j = pair
        return int(self.cells[self.index(i), self.index(j)])

    def normalized_distance(self) -> np.ndarray:
        """1 - cell/min(|D_i|, |D_j|); 1 where either side is empty, 0 on the diagonal."""
        diag = np.diag(self.cells).astype(np.float64)
        denom = np.minimum.outer(diag, diag)
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(denom > 0, 1.0 - self.cells / denom, 1.0)
        np.fill_diagonal(d, 0.0)
        return np.clip(d, 0.0, 1.0)


def multiset_intersection(keys_a, mult_a, keys_b, mult_b) -> int:
    """Sum over shared keys of min(multiplicity). Keys must be unique per side."""
    _, ia, ib = np.intersect1d(keys_a, keys_b, assume_unique=True, return_indices=True)
    return int(np.minimum(np.asarray(mult_a)[ia], np.asarray(mult_b)[ib]).sum())


def o2o_plain(datasets: Mapping[str, OrgDataset] | Sequence[OrgDataset], mode: str = "presence") -> SimilarityMatrix:
    """Plaintext O2O over (prefix, day) elements.

    In presence mode each element has multiplicity one; in count mode its
    multiplicity is the number of events that day.
    """
    ds = list(datasets.values()) if isinstance(datasets, Mapping) else list(datasets)
    keys = [d.keys() for d in ds]
    mult = [d.multiplicity(mode) for d in ds]
    n = len(ds)
    cells = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        cells[i, i] = int(mult[i].sum())
        for j in range(i + 1, n):
            cells[i, j] = cells[j, i] = multiset_intersection(keys[i], mult[i], keys[j], mult[j])
    return SimilarityMatrix(tuple(d.org for d in ds), cells)

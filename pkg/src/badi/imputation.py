"""Geographically nested k-nearest-neighbour imputation of missing variables.

Donors for a missing cell come from the same census tract when at least one
tract neighbour observes the variable, otherwise from the same county.
Neighbours are ranked by Euclidean distance over the variables that both the
target and the donor observe, after each column is standardized with the mean
and population SD of its observed values. The imputed value is the plain mean
of the donor values. Every distance is taken on the pre-imputation snapshot,
so imputed cells never feed other imputations.
"""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import IO, Sequence

import numpy as np

from .census_data import VARIABLE_NAMES, BlockGroupRecord, records_matrix
from .errors import ImputationError

POOL_KEYS = {
    "tract": lambda g: g.tract_key,
    "county": lambda g: g.county_key,
    "state": lambda g: g.state_fips,
}


@dataclass(frozen=True)
class ImputationConfig:
    k: int = 5
    distance: str = "coobserved_euclidean"
    pool_order: tuple[str, ...] = ("tract", "county")

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if not self.pool_order:
            raise ValueError("pool_order must not be empty")
        for pool in self.pool_order:
            if pool not in POOL_KEYS:
                raise ValueError(f"unknown pool {pool!r}")
        if self.distance != "coobserved_euclidean":
            raise ValueError(f"unknown distance {self.distance!r}")


@dataclass(frozen=True)
class ImputedCell:
    geoid: str
    variable_index: int
    pool: str
    neighbors: tuple[str, ...]
    value: float


@dataclass
class ImputationAudit:
    cells: list[ImputedCell]

    def __len__(self):
        return len(self.cells)

    def write(self, dest: IO[str]) -> None:
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(["geoid", "variable_index", "pool", "neighbor_geoids", "value"])
        for c in self.cells:
            writer.writerow([c.geoid, c.variable_index, c.pool, ";".join(c.neighbors), repr(c.value)])


def standardize_observed(X: np.ndarray) -> np.ndarray:
    """Z-score each column on its observed entries; NaNs are kept."""
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(X, axis=0) if len(X) else np.zeros(X.shape[1])
        sd = np.nanstd(X, axis=0) if len(X) else np.ones(X.shape[1])
    mean = np.where(np.isfinite(mean), mean, 0.0)
    sd = np.where(np.isfinite(sd) & (sd > 0), sd, 1.0)
    return (X - mean) / sd


def knn_impute(
    records: Sequence[BlockGroupRecord], cfg: ImputationConfig | None = None
) -> tuple[list[BlockGroupRecord], ImputationAudit]:
    """Fill every missing cell; returns new records (input order) and an audit trail."""
    cfg = cfg or ImputationConfig()
    n = len(records)
    if n == 0:
        return [], ImputationAudit([])

    # Work in canonical GEOID order so results do not depend on input order.
    order = sorted(range(n), key=lambda i: records[i].geo.key)
    recs = [records[i] for i in order]
    geoids = [r.geo.key for r in recs]
    if len(set(geoids)) != n:
        raise ImputationError("duplicate GEOIDs in imputation input")

    X = records_matrix(recs)
    observed = ~np.isnan(X)
    S = np.where(observed, standardize_observed(X), 0.0)

    pools: dict[str, dict[str, np.ndarray]] = {}
    for name in cfg.pool_order:
        groups: dict[str, list[int]] = defaultdict(list)
        keyfn = POOL_KEYS[name]
        for i, r in enumerate(recs):
            groups[keyfn(r.geo)].append(i)
        pools[name] = {key: np.array(idx) for key, idx in groups.items()}

    filled = X.copy()
    cells: list[ImputedCell] = []
    for i in np.flatnonzero(~observed.all(axis=1)):
        if not observed[i].any():
            raise ImputationError(f"{geoids[i]}: no observed variables, distance undefined")
        distances: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        for j in np.flatnonzero(~observed[i]):
            cell = None
            for name in cfg.pool_order:
                members = pools[name][POOL_KEYS[name](recs[i].geo)]
                members = members[members != i]
                if name not in distances:
                    distances[name] = (members, _coobserved_distance(S, observed, i, members))
                members, dist = distances[name]
                usable = observed[members, j]
                if not usable.any():
                    continue
                cand, cand_dist = members[usable], dist[usable]
                # Ties in distance go to the lower GEOID; rows are already in GEOID order.
                ranked = cand[np.lexsort((cand, cand_dist))][: cfg.k]
                value = math.fsum(X[ranked, j]) / len(ranked)
                cell = ImputedCell(geoids[i], int(j), name, tuple(geoids[m] for m in ranked), value)
                break
            if cell is None:
                raise ImputationError(
                    f"{geoids[i]}: variable {j} ({VARIABLE_NAMES[j]}) is not observed "
                    f"anywhere in its {cfg.pool_order[-1]}"
                )
            filled[i, j] = cell.value
            cells.append(cell)

    out_sorted = [r.with_variables(filled[idx]) for idx, r in enumerate(recs)]
    out = [None] * n
    for pos, original in enumerate(order):
        out[original] = out_sorted[pos]
    return out, ImputationAudit(cells)


def _coobserved_distance(S, observed, i, members):
    if len(members) == 0:
        return np.empty(0)
    co = observed[members] & observed[i]
    diff = np.where(co, S[members] - S[i], 0.0)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    return np.where(co.any(axis=1), dist, np.inf)

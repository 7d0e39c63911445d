"""Index construction: Z-scoring, principal factor weights, scoring, rescaling and ranking.

Two variants are produced. ``bADI`` standardizes the 17 variables before
applying factor score coefficients derived from their correlation matrix.
``ADI`` applies an externally supplied coefficient vector directly to the
unstandardized variables, which lets the dollar-valued columns dominate.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np
from scipy.stats import rankdata

from .census_data import (
    N_VARIABLES,
    POVERTY_INDEX,
    VARIABLE_NAMES,
    BlockGroupRecord,
    records_matrix,
)
from .errors import FactorError, SingularMatrixError, ZeroVarianceError

VARIANTS = ("bADI", "ADI")
DEFAULT_CONDITION_CAP = 1e12
SCHEMA_VERSION = 1


@dataclass
class StandardizedMatrix:
    geoids: list[str]
    Z: np.ndarray
    column_means: np.ndarray
    column_sds: np.ndarray

    @property
    def n(self) -> int:
        return self.Z.shape[0]


@dataclass
class CoefficientSet:
    """First-factor loadings and score coefficients.

    ``loadings`` and ``score_coefficients`` are stored as the eigensolver
    produced them; multiply by ``orientation_sign`` to get the orientation in
    which higher scores mean more disadvantage.
    """

    loadings: np.ndarray
    score_coefficients: np.ndarray
    orientation_sign: int
    source: str
    eigenvalue: float
    communalities: np.ndarray | None = None
    iterations: int = 1
    residual: float = 0.0

    @property
    def oriented_loadings(self) -> np.ndarray:
        return self.orientation_sign * self.loadings

    @property
    def oriented_weights(self) -> np.ndarray:
        return self.orientation_sign * self.score_coefficients

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "variables": list(VARIABLE_NAMES),
            "loadings": self.loadings.tolist(),
            "W": self.score_coefficients.tolist(),
            "communalities": None if self.communalities is None else self.communalities.tolist(),
            "eigenvalue": self.eigenvalue,
            "orientation": self.orientation_sign,
            "source": self.source,
            "iterations": self.iterations,
            "residual": self.residual,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CoefficientSet":
        comm = obj.get("communalities")
        return cls(
            loadings=np.asarray(obj["loadings"], dtype=float),
            score_coefficients=np.asarray(obj["W"], dtype=float),
            orientation_sign=int(obj["orientation"]),
            source=obj.get("source", "computed"),
            eigenvalue=float(obj["eigenvalue"]),
            communalities=None if comm is None else np.asarray(comm, dtype=float),
            iterations=int(obj.get("iterations", 1)),
            residual=float(obj.get("residual", 0.0)),
        )


@dataclass
class IndexScores:
    variant: str
    geoids: list[str]
    raw: np.ndarray
    rescaled: np.ndarray
    national_percentile: np.ndarray
    state_decile: np.ndarray
    national_quintile: np.ndarray
    coefficients: CoefficientSet | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.geoids)

    def quintile_map(self) -> dict[str, int]:
        return dict(zip(self.geoids, self.national_quintile.tolist()))

    def to_frame(self):
        import pandas as pd

        return pd.DataFrame({
            "geoid": self.geoids,
            "variant": self.variant,
            "raw": self.raw,
            "rescaled": self.rescaled,
            "percentile": self.national_percentile,
            "state_decile": self.state_decile,
            "quintile": self.national_quintile,
        })

    def write(self, dest: IO[str]) -> None:
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(["geoid", "variant", "raw", "rescaled", "percentile", "state_decile", "quintile"])
        for row in zip(self.geoids, self.raw, self.rescaled, self.national_percentile,
                       self.state_decile, self.national_quintile):
            g, raw, resc, pct, dec, q = row
            writer.writerow([g, self.variant, repr(float(raw)), repr(float(resc)), int(pct), int(dec), int(q)])

    @classmethod
    def read(cls, source: IO[str]) -> "IndexScores":
        rows = list(csv.DictReader(source))
        if not rows:
            raise ValueError("empty index score file")
        return cls(
            variant=rows[0]["variant"],
            geoids=[r["geoid"] for r in rows],
            raw=np.array([float(r["raw"]) for r in rows]),
            rescaled=np.array([float(r["rescaled"]) for r in rows]),
            national_percentile=np.array([int(r["percentile"]) for r in rows]),
            state_decile=np.array([int(r["state_decile"]) for r in rows]),
            national_quintile=np.array([int(r["quintile"]) for r in rows]),
        )


def standardize(records: Sequence[BlockGroupRecord]) -> StandardizedMatrix:
    """Z-score every variable with its mean and population (divisor n) SD."""
    X = records_matrix(records)
    if X.shape[0] < 2:
        raise ValueError("standardize needs at least two records")
    if np.isnan(X).any():
        raise ValueError("standardize requires imputed records (missing cells found)")
    return standardize_matrix(X, [r.geo.key for r in records])


def standardize_matrix(X: np.ndarray, geoids: list[str]) -> StandardizedMatrix:
    mean = X.mean(axis=0)
    centered = X - mean
    sd = np.sqrt((centered**2).mean(axis=0))
    flat = np.flatnonzero(~(sd > 1e-12 * np.maximum(1.0, np.abs(mean))))
    if flat.size:
        names = ", ".join(VARIABLE_NAMES[j] for j in flat)
        raise ZeroVarianceError(f"zero variance in {names}; cannot Z-score")
    Z = centered / sd
    # Re-center once more so tiny floating residue does not survive in the means.
    Z -= Z.mean(axis=0)
    return StandardizedMatrix(geoids, Z, mean, sd)


def correlation_matrix(Z: np.ndarray) -> np.ndarray:
    Z = Z - Z.mean(axis=0)
    R = Z.T @ Z / Z.shape[0]
    d = np.sqrt(np.diag(R))
    R = R / np.outer(d, d)
    R = (R + R.T) / 2
    np.fill_diagonal(R, 1.0)
    return R


def principal_factor(
    Z: StandardizedMatrix | np.ndarray,
    iterations: int = 1,
    condition_cap: float = DEFAULT_CONDITION_CAP,
    orient_index: int = POVERTY_INDEX,
) -> CoefficientSet:
    """One-factor principal factor extraction with score coefficients W = R^-1 L.

    Communalities start at the squared multiple correlations
    ``1 - 1/diag(R^-1)``. Each iteration places them on the diagonal of R,
    takes the leading eigenpair (lambda, v) of that reduced matrix and sets
    the loadings to ``sqrt(lambda) v``; further iterations refresh the
    communalities with the squared loadings.
    """
    Zm = Z.Z if isinstance(Z, StandardizedMatrix) else np.asarray(Z, dtype=float)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    R = correlation_matrix(Zm)
    cond = np.linalg.cond(R)
    if not np.isfinite(cond) or cond > condition_cap:
        raise SingularMatrixError(f"correlation matrix is not invertible (condition number {cond:.3g})")
    R_inv = np.linalg.inv(R)
    communalities = 1.0 - 1.0 / np.diag(R_inv)

    for _ in range(iterations):
        reduced = R.copy()
        np.fill_diagonal(reduced, communalities)
        eigvals, eigvecs = np.linalg.eigh(reduced)
        lam, v = eigvals[-1], eigvecs[:, -1]
        # Eigenvalues of the reduced matrix are O(1); anything this small is rounding noise.
        if not lam > 1e-10:
            raise FactorError(f"leading eigenvalue {lam:.3g} is not positive; no dominant factor")
        loadings = np.sqrt(lam) * v
        start_communalities = communalities
        communalities = loadings**2

    W = np.linalg.solve(R, loadings)
    residual = float(np.abs(R @ W - loadings).max())
    if residual > 1e-8:
        raise SingularMatrixError(f"score coefficient solve residual {residual:.3g} exceeds 1e-8")
    sign = 1 if loadings[orient_index] >= 0 else -1
    return CoefficientSet(
        loadings=loadings,
        score_coefficients=W,
        orientation_sign=sign,
        source="computed",
        eigenvalue=float(lam),
        communalities=start_communalities,
        iterations=iterations,
        residual=residual,
    )


def score(Z: StandardizedMatrix | np.ndarray, coef: CoefficientSet) -> np.ndarray:
    """Raw index score: Z @ W, in the disadvantage orientation."""
    Zm = Z.Z if isinstance(Z, StandardizedMatrix) else np.asarray(Z, dtype=float)
    W = coef.score_coefficients
    if Zm.ndim != 2 or Zm.shape[1] != W.shape[0]:
        raise ValueError(f"dimension mismatch: Z has shape {Zm.shape}, W has {W.shape[0]} entries")
    return (Zm @ W) * coef.orientation_sign


def rescale(raw: np.ndarray, mean: float = 100.0, sd: float = 20.0) -> np.ndarray:
    """Affine map of ``raw`` onto the given mean and population SD."""
    raw = np.asarray(raw, dtype=float)
    centered = raw - raw.mean()
    s = np.sqrt((centered**2).mean())
    if not s > 1e-12 * max(1.0, float(np.abs(raw).max())):
        raise ZeroVarianceError("score vector has zero variance; cannot rescale")
    return mean + sd * (centered / s)


def _bucket(ranks: np.ndarray, n: int, buckets: int) -> np.ndarray:
    # ceil(buckets * rank / n) in exact integer arithmetic; ranks may be half-integers.
    twice = np.rint(2 * ranks).astype(np.int64)
    return -((-buckets * twice) // (2 * n))


def rank(
    scores: np.ndarray, states: Sequence[str], ties: str = "max"
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """National percentiles (1..100), within-state deciles (1..10) and quintiles (1..5).

    A geography's percentile is ``ceil(100 * r / n)`` where ``r`` is its rank
    in increasing score order. With the default ``ties="max"`` tied scores
    share the highest rank of their group, so ``r / n`` is the fraction of
    geographies scoring at or below it; ``ties="average"`` uses midranks.
    """
    scores = np.asarray(scores, dtype=float)
    states = np.asarray(states)
    n = len(scores)
    if n < 100:
        warnings.warn(f"ranking only {n} geographies; percentiles are coarse", stacklevel=2)
    percentile = _bucket(rankdata(scores, method=ties), n, 100)
    decile = np.zeros(n, dtype=np.int64)
    for state in np.unique(states):
        idx = np.flatnonzero(states == state)
        decile[idx] = _bucket(rankdata(scores[idx], method=ties), len(idx), 10)
    quintile = -((-percentile) // 20)
    return percentile, decile, quintile


def _state_of(geoids: Sequence[str]) -> list[str]:
    return [g[:2] for g in geoids]


def build_badi(
    records: Sequence[BlockGroupRecord], iterations: int = 1, ties: str = "max",
    coefficients: CoefficientSet | None = None,
) -> tuple[IndexScores, StandardizedMatrix, CoefficientSet]:
    """Standardize, factor, score, rescale and rank imputed records."""
    zmat = standardize(records)
    coef = coefficients if coefficients is not None else principal_factor(zmat, iterations=iterations)
    return scores_from(zmat, coef, "bADI", ties=ties), zmat, coef


def scores_from(zmat: StandardizedMatrix, coef: CoefficientSet, variant: str, ties: str = "max") -> IndexScores:
    raw = score(zmat, coef)
    resc = rescale(raw)
    pct, dec, quint = rank(resc, _state_of(zmat.geoids), ties=ties)
    return IndexScores(variant, list(zmat.geoids), raw, resc, pct, dec, quint, coef)


def load_external_coefficients(source: IO[str]) -> np.ndarray:
    """Read a 17-vector of ADI weights.

    Accepted layouts: a JSON list in canonical variable order, a JSON object
    keyed by variable name, or a JSON object with a ``"coefficients"`` entry
    holding either of those.
    """
    obj = json.load(source)
    if isinstance(obj, dict) and "coefficients" in obj:
        obj = obj["coefficients"]
    if isinstance(obj, dict):
        missing = [name for name in VARIABLE_NAMES if name not in obj]
        if missing:
            raise ValueError(f"coefficient file lacks {missing}")
        vec = [obj[name] for name in VARIABLE_NAMES]
    else:
        vec = list(obj)
    if len(vec) != N_VARIABLES:
        raise ValueError(f"expected {N_VARIABLES} coefficients, got {len(vec)}")
    return np.asarray(vec, dtype=float)


def replicate_adi(
    records: Sequence[BlockGroupRecord], external_coefficients, ties: str = "max"
) -> IndexScores:
    """ADI with fixed weights applied to the unstandardized variables."""
    if external_coefficients is None:
        raise ValueError("ADI replication needs an external coefficient vector")
    c = np.asarray(external_coefficients, dtype=float)
    if c.shape != (N_VARIABLES,):
        raise ValueError(f"expected {N_VARIABLES} coefficients, got shape {c.shape}")
    X = records_matrix(records)
    if np.isnan(X).any():
        raise ValueError("ADI replication requires imputed records (missing cells found)")
    raw = X @ c
    resc = rescale(raw)
    geoids = [r.geo.key for r in records]
    pct, dec, quint = rank(resc, _state_of(geoids), ties=ties)
    return IndexScores("ADI", geoids, raw, resc, pct, dec, quint, None)


"""Covariate-adjusted log-link GLMs contrasting deprivation quintiles 1 and 5 with quintile 3.

Total cost is modelled with a gamma family and ER visits with a Poisson
family (optionally with a Pearson-dispersion quasi-likelihood scale), both
with a log link and fitted by iteratively reweighted least squares.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import IO, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import linalg
from scipy.stats import norm

from .errors import SingularMatrixError

logger = logging.getLogger(__name__)

PROGRAMS = ("FFS", "MA")
QUINTILE_COLUMNS = {1: "q1", 2: "q2", 4: "q4", 5: "q5"}
COVARIATES = ("age", "male", "chronic_condition_count", "hcc_condition_count", "hcc_score")
OUTCOME_FAMILY = {"total_cost": "gamma_log", "er_visits": "poisson_log"}
BENEFICIARY_FIELDS = (
    "id", "geoid", "program", "state", "age", "sex", "race", "chronic_condition_count",
    "hcc_condition_count", "hcc_score", "total_cost", "er_visits",
)
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class Beneficiary:
    id: str
    geoid: str
    program: str
    state: str
    age: float
    sex: str
    race: str
    chronic_condition_count: int
    hcc_condition_count: int
    hcc_score: float
    total_cost: float
    er_visits: int

    def __post_init__(self):
        if self.program not in PROGRAMS:
            raise ValueError(f"{self.id}: program must be one of {PROGRAMS}")
        if self.sex not in ("M", "F"):
            raise ValueError(f"{self.id}: sex must be M or F")
        if not 0 <= self.age <= 120:
            raise ValueError(f"{self.id}: age {self.age} outside [0, 120]")
        if self.total_cost < 0 or self.er_visits < 0:
            raise ValueError(f"{self.id}: negative cost or ER visit count")
        if not self.hcc_score > 0:
            raise ValueError(f"{self.id}: hcc_score must be positive")
        if self.chronic_condition_count < 0 or self.hcc_condition_count < 0:
            raise ValueError(f"{self.id}: negative condition count")


def beneficiaries_frame(items: Sequence[Beneficiary]) -> pd.DataFrame:
    return pd.DataFrame([asdict(b) for b in items], columns=list(BENEFICIARY_FIELDS))


def read_beneficiaries(path) -> pd.DataFrame:
    """Load a beneficiary table, validating every row against :class:`Beneficiary`."""
    df = pd.read_csv(path, dtype={"id": str, "geoid": str, "state": str})
    missing = [c for c in BENEFICIARY_FIELDS if c not in df.columns]
    if missing:
        raise ValueError(f"beneficiary file {path} lacks columns {missing}")
    if df.empty:
        raise ValueError(f"beneficiary file {path} is empty")
    for row in df.itertuples(index=False):
        Beneficiary(**row._asdict())
    return df.loc[:, list(BENEFICIARY_FIELDS)]


def write_beneficiaries(df: pd.DataFrame, dest: IO[str]) -> None:
    df.loc[:, list(BENEFICIARY_FIELDS)].to_csv(dest, index=False, lineterminator="\n", float_format="%.17g")


# ---------------------------------------------------------------------------
# Design matrix
# ---------------------------------------------------------------------------


@dataclass
class Design:
    X: np.ndarray
    columns: list[str]
    data: pd.DataFrame
    quintile: np.ndarray
    n_unmatched: int = 0
    dropped_columns: list[str] = field(default_factory=list)
    race_reference: str | None = None

    def response(self, outcome: str) -> np.ndarray:
        return self.data[outcome].to_numpy(dtype=float)

    def with_quintile(self, q: int) -> np.ndarray:
        """Copy of X with every row's quintile indicators set as if in quintile ``q``."""
        X = self.X.copy()
        for level, name in QUINTILE_COLUMNS.items():
            if name in self.columns:
                X[:, self.columns.index(name)] = 1.0 if level == q else 0.0
        return X

    def subset(self, mask: np.ndarray) -> "Design":
        return Design(self.X[mask], list(self.columns), self.data.loc[mask].reset_index(drop=True),
                      self.quintile[mask], self.n_unmatched, list(self.dropped_columns), self.race_reference)


def build_design(beneficiaries: pd.DataFrame, quintiles: Mapping[str, int]) -> Design:
    """Intercept, quintile indicators (Q3 reference), age, male, race one-hot, condition counts, HCC score."""
    df = beneficiaries if isinstance(beneficiaries, pd.DataFrame) else beneficiaries_frame(beneficiaries)
    q = df["geoid"].map(quintiles)
    unmatched = int(q.isna().sum())
    if unmatched:
        logger.info("dropping %d beneficiaries with no index quintile", unmatched)
    data = df.loc[q.notna()].reset_index(drop=True)
    quint = q.dropna().astype(int).to_numpy()

    cols: dict[str, np.ndarray] = {"intercept": np.ones(len(data))}
    for level, name in QUINTILE_COLUMNS.items():
        cols[name] = (quint == level).astype(float)
    cols["age"] = data["age"].to_numpy(dtype=float)
    cols["male"] = (data["sex"] == "M").to_numpy(dtype=float)

    race = data["race"].astype(str)
    counts = race.value_counts()
    reference = None
    if len(counts):
        top = counts.max()
        reference = sorted(counts.index[counts == top])[0]
    for level in sorted(counts.index):
        if level != reference:
            cols[f"race_{level}"] = (race == level).to_numpy(dtype=float)
    for name in ("chronic_condition_count", "hcc_condition_count", "hcc_score"):
        cols[name] = data[name].to_numpy(dtype=float)

    dropped = [name for name, v in cols.items() if not np.any(v)]
    if dropped:
        warnings.warn(f"dropping all-zero design columns {dropped}", stacklevel=2)
    names = [name for name in cols if name not in dropped]
    X = np.column_stack([cols[name] for name in names]) if len(data) else np.empty((0, len(names)))
    return Design(X, names, data, quint, unmatched, dropped, reference)


# ---------------------------------------------------------------------------
# IRLS
# ---------------------------------------------------------------------------


@dataclass
class GlmFit:
    family: str
    columns: list[str]
    beta: np.ndarray
    se: np.ndarray
    cov: np.ndarray
    dispersion: float
    deviance: float
    iterations: int
    converged: bool
    deviance_trace: list[float]
    n: int
    quasi: bool = False

    @property
    def z(self) -> np.ndarray:
        return self.beta / self.se

    @property
    def pvalues(self) -> np.ndarray:
        return 2.0 * norm.sf(np.abs(self.z))

    def coef(self, name: str) -> float:
        return float(self.beta[self.columns.index(name)])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.exp(X @ self.beta)


def _deviance(family: str, y: np.ndarray, mu: np.ndarray) -> float:
    if family == "gamma_log":
        return float(2.0 * np.sum(-np.log(y / mu) + (y - mu) / mu))
    ylogy = np.where(y > 0, y * np.log(np.where(y > 0, y, 1.0) / mu), 0.0)
    return float(2.0 * np.sum(ylogy - (y - mu)))


def _working_weights(family: str, mu: np.ndarray) -> np.ndarray:
    # (dmu/deta)^2 / V(mu) under the log link.
    return np.ones_like(mu) if family == "gamma_log" else mu


def _check_rank(X: np.ndarray, columns: Sequence[str]) -> None:
    _, R, piv = linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag[0] * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    bad = piv[diag <= tol]
    if bad.size:
        names = [columns[i] for i in sorted(bad)]
        raise SingularMatrixError(f"design is rank deficient; collinear columns: {names}")


def fit_glm(
    X: np.ndarray,
    y: np.ndarray,
    family: str = "gamma_log",
    columns: Sequence[str] | None = None,
    tol: float = 1e-8,
    max_iter: int = 100,
    max_halving: int = 10,
    quasi: bool = False,
    beta_tol: float = 1e-10,
) -> GlmFit:
    """Fit a log-link GLM by IRLS with step-halving.

    Converged means the relative deviance change ``|D_old - D|/(|D| + 0.1)``
    fell below ``tol`` and the largest coefficient step below ``beta_tol``.
    The gamma dispersion (and the Poisson one when ``quasi``) is the Pearson
    chi-square over ``n - p``.
    """
    if family not in ("gamma_log", "poisson_log"):
        raise ValueError(f"unknown family {family!r}")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    columns = list(columns) if columns is not None else [f"x{i}" for i in range(p)]
    if n <= p:
        raise ValueError(f"need more observations than parameters (n={n}, p={p})")
    if family == "gamma_log" and not np.all(y > 0):
        raise ValueError("gamma family needs strictly positive responses")
    if family == "poisson_log" and (np.any(y < 0) or np.any(y != np.round(y))):
        raise ValueError("poisson family needs non-negative integer counts")
    _check_rank(X, columns)

    mu = y.copy() if family == "gamma_log" else y + 0.1
    eta = np.log(mu)

    def wls(eta, mu):
        w = _working_weights(family, mu)
        z = eta + (y - mu) / mu
        sw = np.sqrt(w)
        beta, *_ = np.linalg.lstsq(X * sw[:, None], z * sw, rcond=None)
        return beta

    def eval_dev(beta):
        eta = X @ beta
        mu = np.exp(eta)
        return eta, mu, _deviance(family, y, mu)

    beta = wls(eta, mu)
    eta, mu, dev = eval_dev(beta)
    trace = [dev]
    converged = False
    iterations = 1
    while iterations < max_iter:
        iterations += 1
        proposal = wls(eta, mu)
        new_eta, new_mu, new_dev = eval_dev(proposal)
        halvings = 0
        while not (np.isfinite(new_dev) and new_dev <= dev) and halvings < max_halving:
            proposal = (beta + proposal) / 2.0
            new_eta, new_mu, new_dev = eval_dev(proposal)
            halvings += 1
        if not (np.isfinite(new_dev) and new_dev <= dev):
            # At the optimum the proposal can only differ by rounding noise.
            if np.isfinite(new_dev) and abs(new_dev - dev) / (abs(dev) + 0.1) < tol:
                converged = True
            else:
                logger.warning("IRLS step-halving failed at iteration %d", iterations)
            break
        step = np.max(np.abs(proposal - beta) / (1.0 + np.abs(beta)))
        change = abs(dev - new_dev) / (abs(new_dev) + 0.1)
        beta, eta, mu, dev = proposal, new_eta, new_mu, new_dev
        trace.append(dev)
        if change < tol and step < beta_tol:
            converged = True
            break

    w = _working_weights(family, mu)
    info = X.T @ (X * w[:, None])
    try:
        chol = linalg.cho_factor(info)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(f"X'WX is singular for columns {columns}") from exc
    cov_unscaled = linalg.cho_solve(chol, np.eye(p))
    pearson_chi2 = float(np.sum((y - mu) ** 2 / (mu**2 if family == "gamma_log" else mu)))
    if family == "gamma_log" or quasi:
        dispersion = pearson_chi2 / (n - p)
    else:
        dispersion = 1.0
    cov = dispersion * cov_unscaled
    se = np.sqrt(np.diag(cov))
    return GlmFit(family, columns, beta, se, cov, dispersion, dev, iterations, converged, trace, n, quasi)


# ---------------------------------------------------------------------------
# Contrasts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuintileContrast:
    quintile: int
    beta: float
    se: float
    ratio: float
    percent_change: float
    ci_low: float
    ci_high: float
    marginal_effect: float
    adjusted_mean_diff: float
    p_value: float
    significant: bool


def contrast(fit: GlmFit, design: Design, alpha: float = 0.05) -> dict[int, QuintileContrast]:
    """Q1 and Q5 versus Q3: ratio, percent change, marginal effect and Wald p-value."""
    out = {}
    ref = design.with_quintile(3)
    mu_ref = fit.predict(ref)
    for q in (1, 5):
        name = QUINTILE_COLUMNS[q]
        if name not in fit.columns:
            continue
        k = fit.columns.index(name)
        beta = float(fit.beta[k])
        se = float(fit.se[k])
        zcrit = norm.ppf(1 - alpha / 2)
        Xq = design.with_quintile(q)
        p_value = float(2.0 * norm.sf(abs(beta / se)))
        out[q] = QuintileContrast(
            quintile=q,
            beta=beta,
            se=se,
            ratio=math.exp(beta),
            percent_change=math.exp(beta) - 1.0,
            ci_low=math.exp(beta - zcrit * se) - 1.0,
            ci_high=math.exp(beta + zcrit * se) - 1.0,
            marginal_effect=float(np.mean(fit.predict(Xq) - mu_ref)),
            adjusted_mean_diff=float(np.exp(Xq.mean(axis=0) @ fit.beta) - np.exp(ref.mean(axis=0) @ fit.beta)),
            p_value=p_value,
            significant=p_value < alpha,
        )
    return out


@dataclass
class GridRow:
    program: str
    state: str
    variant: str
    outcome: str
    family: str
    effect_unit: str
    n: int
    q1_effect: float
    q1_pct: float
    q1_ame: float
    q1_adj_diff: float
    q1_p: float
    q1_significant: bool
    q1_se: float
    q5_effect: float
    q5_pct: float
    q5_ame: float
    q5_adj_diff: float
    q5_p: float
    q5_significant: bool
    q5_se: float
    converged: bool
    iterations: int
    excluded_nonpositive: int
    unmatched: int


@dataclass(frozen=True)
class SkippedCell:
    program: str
    state: str
    variant: str
    outcome: str
    n: int
    reason: str


@dataclass
class ContrastGrid:
    rows: list[GridRow]
    skipped: list[SkippedCell]
    fits: dict = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.rows],
                            columns=[f for f in GridRow.__dataclass_fields__])

    def write_csv(self, dest: IO[str]) -> None:
        writer = csv.writer(dest, lineterminator="\n")
        fields = list(GridRow.__dataclass_fields__)
        writer.writerow(fields)
        for r in self.rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in astuple_ordered(r, fields)])

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rows": [asdict(r) for r in self.rows],
            "skipped": [asdict(s) for s in self.skipped],
        }


def astuple_ordered(obj, fields):
    return [getattr(obj, f) for f in fields]


def _nan_contrast(c: QuintileContrast | None, unit: str):
    if c is None:
        nan = float("nan")
        return nan, nan, nan, nan, nan, False, nan
    effect = c.marginal_effect if unit == "dollars" else c.percent_change
    return effect, c.percent_change, c.marginal_effect, c.adjusted_mean_diff, c.p_value, c.significant, c.se


def fit_cell(design: Design, outcome: str, quasi: bool = False):
    """Fit one outcome on a design; returns (fit, contrasts, used design, excluded count)."""
    family = OUTCOME_FAMILY[outcome]
    y = design.response(outcome)
    excluded = 0
    if family == "gamma_log":
        keep = y > 0
        excluded = int((~keep).sum())
        if excluded:
            design = design.subset(keep)
            y = y[keep]
    fit = fit_glm(design.X, y, family, design.columns, quasi=quasi)
    return fit, contrast(fit, design), design, excluded


def stratified_run(
    beneficiaries: pd.DataFrame,
    indices: Mapping[str, Mapping[str, int]],
    outcomes: Sequence[str] = ("total_cost", "er_visits"),
    quasi: bool = False,
    min_per_parameter: int = 10,
) -> ContrastGrid:
    """Fit every (program, state, variant, outcome) cell and collect Q1/Q5 contrasts.

    ``indices`` maps a variant name to its GEOID -> national quintile map.
    Cells with fewer than ``min_per_parameter`` observations per design
    column, or whose fit fails, are listed as skipped.
    """
    rows, skipped, fits = [], [], {}
    strata = beneficiaries.groupby(["program", "state"], sort=True)
    for (program, state), sub in strata:
        for variant in sorted(indices):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                design = build_design(sub.reset_index(drop=True), indices[variant])
            for outcome in outcomes:
                key = (program, state, variant, outcome)
                p = design.X.shape[1]
                n = design.X.shape[0]
                if n < min_per_parameter * p:
                    skipped.append(SkippedCell(*key, n, f"n={n} < {min_per_parameter}*p={min_per_parameter * p}"))
                    continue
                try:
                    fit, cons, used, excluded = fit_cell(design, outcome, quasi)
                except (SingularMatrixError, ValueError) as exc:
                    skipped.append(SkippedCell(*key, n, str(exc)))
                    continue
                fits[key] = fit
                unit = "dollars" if outcome == "total_cost" else "percent"
                q1 = _nan_contrast(cons.get(1), unit)
                q5 = _nan_contrast(cons.get(5), unit)
                rows.append(GridRow(program, state, variant, outcome, fit.family, unit, fit.n,
                                    *q1, *q5, fit.converged, fit.iterations, excluded, design.n_unmatched))
    return ContrastGrid(rows, skipped, fits)

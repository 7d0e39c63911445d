"""Correlation benchmarks of index variants against housing values and area health outcomes."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .errors import CorrelationError
from .index_core import IndexScores

logger = logging.getLogger(__name__)

MIN_N = 3
SCHEMA_VERSION = 1
LEVEL_LENGTH = {"county": 5, "tract": 11, "block_group": 12}

# PLACES measure ids with the labels used in the outcome tables, plus the two
# non-PLACES benchmarks.
PLACES_MEASURES = {
    "DISABILITY": "Any disability",
    "COGNITION": "Cognitive disability",
    "HEARING": "Hearing disability",
    "INDEPLIVE": "Independent living disability",
    "MOBILITY": "Mobility disability",
    "SELFCARE": "Self-care disability",
    "VISION": "Vision disability",
    "TEETHLOST": "All teeth lost",
    "ARTHRITIS": "Arthritis",
    "COPD": "COPD",
    "CANCER": "Cancer (non-skin)",
    "KIDNEY": "Chronic kidney disease",
    "CHD": "Coronary heart disease",
    "CASTHMA": "Current asthma",
    "DEPRESSION": "Depression",
    "DIABETES": "Diabetes",
    "BPHIGH": "High blood pressure",
    "HIGHCHOL": "High cholesterol",
    "OBESITY": "Obesity",
    "STROKE": "Stroke",
    "BINGE": "Binge drinking",
    "CSMOKING": "Current smoking",
    "LPA": "Physical inactivity",
    "SLEEP": "Sleep < 7 hours",
    "GHLTH": "Fair or poor general health",
    "MHLTH": "Frequent mental distress",
    "PHLTH": "Frequent physical distress",
    "CHECKUP": "Annual checkup",
    "CERVICAL": "Cervical cancer screening",
    "CHOLSCREEN": "Cholesterol screening",
    "COLON_SCREEN": "Colorectal cancer screening",
    "COREM": "Core preventive services, men",
    "COREW": "Core preventive services, women",
    "DENTAL": "Dental visit",
    "ACCESS2": "Lack of health insurance",
    "MAMMOUSE": "Mammography",
    "BPMED": "Taking BP medication",
}
MEASURE_CATALOG = {**PLACES_MEASURES, "LIFE_EXPECTANCY": "Life expectancy at birth",
                   "MEDIAN_HOME_VALUE": "Median home value"}


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass
class OutcomeTable:
    """Long-format outcome values: one row per (geoid, measure)."""

    level: str
    frame: pd.DataFrame

    def __post_init__(self):
        if self.level not in LEVEL_LENGTH:
            raise ValueError(f"unknown level {self.level!r}")
        df = self.frame.loc[:, ["geoid", "measure", "value"]].copy()
        df["geoid"] = df["geoid"].astype(str).str.strip()
        df["measure"] = df["measure"].astype(str)
        df["value"] = pd.to_numeric(df["value"], errors="coerce")
        width = LEVEL_LENGTH[self.level]
        bad = df.loc[(df["geoid"].str.len() != width) | ~df["geoid"].str.isdigit(), "geoid"]
        if len(bad):
            raise ValueError(f"{self.level} GEOIDs must be {width} digits; got e.g. {bad.iloc[0]!r}")
        dup = df.duplicated(["geoid", "measure"])
        if dup.any():
            first = df.loc[dup].iloc[0]
            raise ValueError(f"duplicate value for ({first['geoid']}, {first['measure']})")
        self.frame = df.dropna(subset=["value"]).reset_index(drop=True)

    @classmethod
    def read(cls, source: IO[str] | str, level: str, delimiter: str = ",") -> "OutcomeTable":
        df = pd.read_csv(source, sep=delimiter, dtype={"geoid": str})
        return cls(level, df)

    @property
    def measures(self) -> list[str]:
        return sorted(self.frame["measure"].unique())

    def series(self, measure: str) -> pd.Series:
        sub = self.frame.loc[self.frame["measure"] == measure]
        return pd.Series(sub["value"].to_numpy(), index=sub["geoid"].to_numpy(), name=measure)


@dataclass(frozen=True)
class MetroCrosswalk:
    """County FIPS (5 digits) -> metro area id, plus metro names."""

    county_to_metro: Mapping[str, str]
    names: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def read(cls, source: IO[str]) -> "MetroCrosswalk":
        mapping, names = {}, {}
        for row in csv.DictReader(source):
            county = row["county_fips"].strip().zfill(5)
            metro = row["metro_id"].strip()
            if county in mapping and mapping[county] != metro:
                raise ValueError(f"county {county} maps to more than one metro area")
            mapping[county] = metro
            if row.get("metro_name"):
                names[metro] = row["metro_name"]
        return cls(mapping, names)

    def metro_of(self, geoid: str) -> str | None:
        return self.county_to_metro.get(geoid[:5])


@dataclass(frozen=True)
class CorrelationRow:
    group: str
    measure: str
    variant: str
    statistic: str
    value: float
    n: int


@dataclass(frozen=True)
class SuppressedRow:
    group: str
    measure: str
    variant: str
    statistic: str
    n: int
    reason: str


@dataclass
class CorrelationReport:
    rows: list[CorrelationRow] = field(default_factory=list)
    suppressed: list[SuppressedRow] = field(default_factory=list)

    def __post_init__(self):
        self.rows.sort(key=lambda r: (r.group, r.measure, r.variant, r.statistic))
        self.suppressed.sort(key=lambda r: (r.group, r.measure, r.variant, r.statistic))

    def extend(self, other: "CorrelationReport") -> "CorrelationReport":
        return CorrelationReport(self.rows + other.rows, self.suppressed + other.suppressed)

    def to_frame(self) -> pd.DataFrame:
        cols = ["group", "measure", "variant", "statistic", "value", "n"]
        return pd.DataFrame([asdict(r) for r in self.rows], columns=cols)

    def values(self, variant: str, statistic: str = "pearson", measure: str | None = None) -> pd.Series:
        """Correlation values of one variant keyed by group."""
        rows = [r for r in self.rows if r.variant == variant and r.statistic == statistic
                and (measure is None or r.measure == measure)]
        return pd.Series([r.value for r in rows], index=[r.group for r in rows], dtype=float)

    def write_csv(self, dest: IO[str]) -> None:
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(["group", "measure", "variant", "statistic", "value", "n", "status", "reason"])
        for r in self.rows:
            writer.writerow([r.group, r.measure, r.variant, r.statistic, repr(r.value), r.n, "ok", ""])
        for s in self.suppressed:
            writer.writerow([s.group, s.measure, s.variant, s.statistic, "", s.n, "suppressed", s.reason])

    def to_json(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "rows": [asdict(r) for r in self.rows],
            "suppressed": [asdict(s) for s in self.suppressed],
        }


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


def pearson(x, y) -> float:
    """Product-moment correlation; raises CorrelationError when undefined."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise CorrelationError(f"vectors must be 1-D and equal length, got {x.shape} and {y.shape}")
    if len(x) < MIN_N:
        raise CorrelationError(f"need at least {MIN_N} points, got {len(x)}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = dx @ dx
    syy = dy @ dy
    if not (sxx > 0 and syy > 0):
        raise CorrelationError("zero variance; correlation undefined")
    r = (dx @ dy) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def decile_buckets(x) -> np.ndarray:
    """Decile labels 1..10 as ceil(10 * midrank / n)."""
    x = np.asarray(x, dtype=float)
    n = len(x)
    twice = np.rint(2 * rankdata(x, method="average")).astype(np.int64)
    return -((-10 * twice) // (2 * n))


def spearman_decile(x, y) -> float:
    """Spearman correlation between the decile buckets of x and of y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise CorrelationError(f"vectors must be 1-D and equal length, got {x.shape} and {y.shape}")
    if len(x) < 10:
        raise CorrelationError(f"decile Spearman needs at least 10 points, got {len(x)}")
    rx = rankdata(decile_buckets(x), method="average")
    ry = rankdata(decile_buckets(y), method="average")
    return pearson(rx, ry)


STATISTICS = {"pearson": pearson, "spearman_decile": spearman_decile}


def quantile_summary(values: Iterable[float]) -> dict[str, float]:
    v = np.asarray(list(values), dtype=float)
    if v.size == 0:
        raise ValueError("no values to summarize")
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0])
    return dict(zip(["min", "q1", "q2", "q3", "max"], map(float, q)))


# ---------------------------------------------------------------------------
# Aggregation and grouped correlations
# ---------------------------------------------------------------------------


def _as_series(values) -> pd.Series:
    if isinstance(values, IndexScores):
        return pd.Series(values.rescaled, index=values.geoids, name=values.variant)
    if isinstance(values, pd.Series):
        return values
    if isinstance(values, Mapping):
        return pd.Series(values, dtype=float)
    raise TypeError(f"cannot use {type(values).__name__} as keyed values")


def index_values(scores: IndexScores, field_name: str = "rescaled") -> pd.Series:
    source = {"rescaled": scores.rescaled, "percentile": scores.national_percentile, "raw": scores.raw}
    return pd.Series(np.asarray(source[field_name], dtype=float), index=scores.geoids, name=scores.variant)


def aggregate(values, level: str = "county", weights: pd.Series | None = None) -> pd.Series:
    """Mean of block-group values within each county (or tract).

    Unweighted by default; pass ``weights`` (e.g. population) for the
    weighted variant.
    """
    s = _as_series(values).astype(float).dropna()
    keys = s.index.astype(str).str[: LEVEL_LENGTH[level]]
    if weights is None:
        out = s.groupby(keys).mean()
    else:
        w = weights.reindex(s.index).astype(float)
        if w.isna().any():
            raise ValueError("weights missing for some block groups")
        out = (s * w).groupby(keys).sum() / w.groupby(keys).sum()
    out.index.name = level
    return out.sort_index()


def county_aggregate(values, weights: pd.Series | None = None) -> pd.Series:
    return aggregate(values, "county", weights)


def _correlate(stat: str, x, y, group, measure, variant, rows, suppressed) -> None:
    n = len(x)
    if n < MIN_N:
        suppressed.append(SuppressedRow(group, measure, variant, stat, n, f"n < {MIN_N}"))
        return
    try:
        value = STATISTICS[stat](x, y)
    except CorrelationError as exc:
        suppressed.append(SuppressedRow(group, measure, variant, stat, n, str(exc)))
        return
    rows.append(CorrelationRow(group, measure, variant, stat, value, n))


def _joined(index: pd.Series, other: pd.Series) -> pd.DataFrame:
    df = pd.concat({"index": index.astype(float), "other": other.astype(float)}, axis=1, join="inner")
    return df.dropna().sort_index()


def housing_correlation_by_county(
    scores, housing: pd.Series, variant: str | None = None
) -> CorrelationReport:
    """Per county, Pearson between block-group index values and median home value."""
    idx = _as_series(scores)
    variant = variant or getattr(scores, "variant", idx.name) or "index"
    df = _joined(idx, housing)
    rows, suppressed = [], []
    for county, sub in df.groupby(df.index.str[:5], sort=True):
        _correlate("pearson", sub["index"].to_numpy(), sub["other"].to_numpy(),
                   county, "MEDIAN_HOME_VALUE", variant, rows, suppressed)
    return CorrelationReport(rows, suppressed)


def housing_quantiles(report: CorrelationReport, variant: str, absolute: bool = True) -> dict[str, float]:
    """Min/Q1/Q2/Q3/max over counties of the housing correlations of ``variant``."""
    v = report.values(variant, "pearson", "MEDIAN_HOME_VALUE").to_numpy()
    return quantile_summary(np.abs(v) if absolute else v)


def housing_correlation_by_metro(
    scores, housing: pd.Series, crosswalk: MetroCrosswalk,
    metros: Sequence[str] | None = None, variant: str | None = None,
) -> CorrelationReport:
    """Pearson over all block groups pooled within each metro area."""
    idx = _as_series(scores)
    variant = variant or getattr(scores, "variant", idx.name) or "index"
    known = set(crosswalk.county_to_metro.values())
    if metros is not None:
        absent = sorted(set(metros) - known)
        if absent:
            raise ValueError(f"crosswalk does not cover metros {absent}")
    df = _joined(idx, housing)
    metro = pd.Series([crosswalk.metro_of(g) for g in df.index], index=df.index)
    df = df.loc[metro.notna()]
    metro = metro.loc[metro.notna()]
    rows, suppressed = [], []
    wanted = sorted(known if metros is None else set(metros))
    groups = dict(tuple(df.groupby(metro, sort=True)))
    for m in wanted:
        sub = groups.get(m, df.iloc[0:0])
        _correlate("pearson", sub["index"].to_numpy(), sub["other"].to_numpy(),
                   m, "MEDIAN_HOME_VALUE", variant, rows, suppressed)
    return CorrelationReport(rows, suppressed)


def outcome_correlations(
    index_tables: Mapping[str, pd.Series],
    outcomes: OutcomeTable,
    statistic: str | Sequence[str] = "pearson",
    crosswalk: MetroCrosswalk | None = None,
    measures: Sequence[str] | None = None,
) -> CorrelationReport:
    """Correlate area-level index values with every outcome measure.

    ``index_tables`` maps a variant name to values keyed by the outcome
    table's GEOIDs (county or tract). Joins are inner; the joined count is
    reported as ``n``. With a crosswalk, correlations are computed within
    each metro area instead of nationally.
    """
    stats = [statistic] if isinstance(statistic, str) else list(statistic)
    for s in stats:
        if s not in STATISTICS:
            raise ValueError(f"unknown statistic {s!r}")
    measures = list(measures) if measures is not None else outcomes.measures
    rows, suppressed = [], []
    for variant in sorted(index_tables):
        idx = index_tables[variant]
        for measure in measures:
            df = _joined(idx, outcomes.series(measure))
            if crosswalk is None:
                groups = [("national", df)]
            else:
                metro = pd.Series([crosswalk.metro_of(g) for g in df.index], index=df.index)
                groups = [(m, sub) for m, sub in df.loc[metro.notna()].groupby(metro.dropna(), sort=True)]
            for group, sub in groups:
                for s in stats:
                    _correlate(s, sub["index"].to_numpy(), sub["other"].to_numpy(),
                               group, measure, variant, rows, suppressed)
    return CorrelationReport(rows, suppressed)


def common_geoids_or_raise(index: pd.Series, other: Iterable[str], what: str) -> int:
    common = set(index.index) & set(other)
    if not common:
        sample_a = sorted(index.index)[:3]
        sample_b = sorted(other)[:3]
        raise ValueError(f"no common GEOIDs between index and {what}: e.g. {sample_a} vs {sample_b}")
    return len(common)


def housing_figure_data(report: CorrelationReport, absolute: bool) -> pd.DataFrame:
    """Per-county (ADI r, bADI r) pairs for scatter plots."""
    frame = report.to_frame()
    frame = frame.loc[frame["measure"] == "MEDIAN_HOME_VALUE"]
    wide = frame.pivot(index="group", columns="variant", values="value")
    if absolute:
        wide = wide.abs()
    wide.index.name = "county"
    return wide.dropna().sort_index()


def dump_json(obj, dest: IO[str]) -> None:
    json.dump(obj, dest, indent=2, sort_keys=True)
    dest.write("\n")

"""Block-group data model, table parsing, derived variables and reliability filters."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Iterable, Mapping, Sequence

import numpy as np

from .errors import RowError, SchemaError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variable:
    name: str
    label: str
    kind: str  # "dollar", "percent" or "log_ratio"
    acs_group: str


# Canonical order of the 17 constructing variables. Every module indexes into
# this tuple; nothing accepts a reordered vector.
VARIABLES: tuple[Variable, ...] = (
    Variable("median_family_income", "Median family income ($)", "dollar", "B19113"),
    Variable("income_disparity", "Income disparity", "log_ratio", "B19001"),
    Variable("pct_families_below_poverty", "Families below poverty level (%)", "percent", "B17010"),
    Variable("pct_below_150_poverty", "Population below 150% of poverty level (%)", "percent", "C17002"),
    Variable("pct_single_parent", "Single parent households with dependents under 18 (%)", "percent", "B09002"),
    Variable("pct_no_vehicle", "Households without a motor vehicle (%)", "percent", "B25044"),
    Variable("pct_no_telephone", "Households without a telephone (%)", "percent", "B25043"),
    Variable("pct_incomplete_plumbing", "Occupied housing units without complete plumbing (%)", "percent", "B25016"),
    Variable("pct_owner_occupied", "Owner occupied housing units (%)", "percent", "B25003"),
    Variable("pct_crowded", "Households with more than 1 person per room (%)", "percent", "B25014"),
    Variable("median_mortgage", "Median monthly mortgage ($)", "dollar", "B25088"),
    Variable("median_gross_rent", "Median gross rent ($)", "dollar", "B25064"),
    Variable("median_home_value", "Median home value ($)", "dollar", "B25077"),
    Variable("pct_white_collar", "Employed persons 16+ in white collar jobs (%)", "percent", "C24010"),
    Variable("pct_unemployed", "Civilian labor force 16+ unemployed (%)", "percent", "B23025"),
    Variable("pct_no_high_school", "Population 25+ with no high school (%)", "percent", "B15003"),
    Variable("pct_at_least_high_school", "Population 25+ with at least high school (%)", "percent", "B15003"),
)
VARIABLE_NAMES: tuple[str, ...] = tuple(v.name for v in VARIABLES)
N_VARIABLES = len(VARIABLES)
VARIABLE_INDEX = {name: i for i, name in enumerate(VARIABLE_NAMES)}
POVERTY_INDEX = VARIABLE_INDEX["pct_families_below_poverty"]
HOME_VALUE_INDEX = VARIABLE_INDEX["median_home_value"]

# ACS annotation values that stand for "no estimate".
DEFAULT_SENTINELS = frozenset(
    {"", "NA", "N/A", "NaN", "nan", "null", "-", "*", "**", "***",
     "-666666666", "-999999999", "-888888888", "-555555555", "-333333333", "-222222222"}
)

MIN_POPULATION = 100
MIN_HOUSING_UNITS = 30
MAX_GROUP_QUARTERS = 1 / 3


@dataclass(frozen=True, order=True)
class GeoId:
    """12-digit block-group GEOID: state(2) county(3) tract(6) block group(1)."""

    key: str

    def __post_init__(self):
        if not isinstance(self.key, str) or len(self.key) != 12 or not self.key.isdigit():
            raise ValueError(f"malformed block-group GEOID {self.key!r}")

    @classmethod
    def parse(cls, text) -> "GeoId":
        s = str(text).strip()
        # Census API style "1500000US360050001001".
        if "US" in s:
            s = s.split("US", 1)[1]
        return cls(s)

    @property
    def state_fips(self) -> str:
        return self.key[:2]

    @property
    def county_fips(self) -> str:
        return self.key[2:5]

    @property
    def tract(self) -> str:
        return self.key[5:11]

    @property
    def block_group(self) -> str:
        return self.key[11]

    @property
    def county_key(self) -> str:
        return self.key[:5]

    @property
    def tract_key(self) -> str:
        return self.key[:11]

    def __str__(self):
        return self.key


def _check_variables(values: Sequence[float]) -> None:
    if len(values) != N_VARIABLES:
        raise ValueError(f"expected {N_VARIABLES} variables, got {len(values)}")
    for var, x in zip(VARIABLES, values):
        if math.isnan(x):
            continue
        if not math.isfinite(x):
            raise ValueError(f"{var.name} is not finite: {x}")
        if var.kind == "percent" and not 0.0 <= x <= 100.0:
            raise ValueError(f"{var.name} must lie in [0, 100], got {x}")
        if var.kind == "dollar" and not x > 0.0:
            raise ValueError(f"{var.name} must be positive, got {x}")


@dataclass(frozen=True)
class BlockGroupRecord:
    """One census block group. Missing variables are stored as NaN."""

    geo: GeoId
    population: int
    housing_units: int
    group_quarters_pct: float
    variables: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(float(x) for x in self.variables))
        if self.population < 0 or self.housing_units < 0:
            raise ValueError(f"{self.geo}: negative population or housing count")
        if not 0.0 <= self.group_quarters_pct <= 1.0:
            raise ValueError(f"{self.geo}: group_quarters_pct must lie in [0, 1]")
        _check_variables(self.variables)

    @property
    def missing(self) -> tuple[bool, ...]:
        return tuple(math.isnan(x) for x in self.variables)

    @property
    def n_missing(self) -> int:
        return sum(self.missing)

    def with_variables(self, values: Sequence[float]) -> "BlockGroupRecord":
        return BlockGroupRecord(self.geo, self.population, self.housing_units,
                                self.group_quarters_pct, tuple(values))

    def to_json(self) -> dict:
        return {
            "geoid": self.geo.key,
            "population": self.population,
            "housing_units": self.housing_units,
            "group_quarters_pct": self.group_quarters_pct,
            "variables": [None if math.isnan(x) else x for x in self.variables],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "BlockGroupRecord":
        return cls(
            GeoId.parse(obj["geoid"]),
            int(obj["population"]),
            int(obj["housing_units"]),
            float(obj["group_quarters_pct"]),
            tuple(math.nan if x is None else float(x) for x in obj["variables"]),
        )


def records_matrix(records: Sequence[BlockGroupRecord]) -> np.ndarray:
    """n x 17 float matrix of record variables (NaN where missing)."""
    if not records:
        return np.empty((0, N_VARIABLES))
    return np.array([r.variables for r in records], dtype=float)


# ---------------------------------------------------------------------------
# Schema and parsing
# ---------------------------------------------------------------------------


@dataclass
class CensusSchema:
    """Maps table columns onto the record fields.

    Each entry of ``variables`` is either a column name holding the value, a
    ``{"numerator": [...], "denominator": [...]}`` mapping reduced to a
    percentage, or (income disparity only) ``{"under_10k": [...],
    "at_least_50k": [...]}`` household bracket counts.
    """

    geoid: str = "geoid"
    population: str = "population"
    housing_units: str = "housing_units"
    group_quarters: str = "group_quarters"
    variables: dict = field(default_factory=lambda: {name: name for name in VARIABLE_NAMES})

    @classmethod
    def from_mapping(cls, obj: Mapping) -> "CensusSchema":
        base = cls()
        variables = dict(base.variables)
        variables.update(obj.get("variables", {}))
        unknown = set(variables) - set(VARIABLE_NAMES)
        if unknown:
            raise SchemaError(f"unknown variables in schema: {sorted(unknown)}")
        return cls(
            geoid=obj.get("geoid", base.geoid),
            population=obj.get("population", base.population),
            housing_units=obj.get("housing_units", base.housing_units),
            group_quarters=obj.get("group_quarters", base.group_quarters),
            variables=variables,
        )

    def required_columns(self) -> dict[str, list[str]]:
        """Field name -> table columns it reads."""
        out = {
            "geoid": [self.geoid],
            "population": [self.population],
            "housing_units": [self.housing_units],
            "group_quarters": [self.group_quarters],
        }
        for name in VARIABLE_NAMES:
            spec = self.variables[name]
            if isinstance(spec, str):
                out[name] = [spec]
            else:
                cols = []
                for part in spec.values():
                    cols.extend([part] if isinstance(part, str) else part)
                out[name] = cols
        return out


def _as_list(x) -> list[str]:
    return [x] if isinstance(x, str) else list(x)


def compute_income_disparity(income_bracket_counts: Mapping[int, float]) -> float:
    """Log of 100 x (households under $10k) / (households at $50k or more).

    ``income_bracket_counts`` maps each bracket's lower bound in dollars to its
    household count (B19001 layout: 0, 10000, 15000, ..., 200000). Returns NaN
    when the ratio is zero or undefined.
    """
    under = sum(c for lo, c in income_bracket_counts.items() if lo < 10_000)
    high = sum(c for lo, c in income_bracket_counts.items() if lo >= 50_000)
    return _disparity(under, high)


def _disparity(under: float, high: float) -> float:
    if not high > 0 or not under > 0:
        return math.nan
    return math.log(100.0 * under / high)


def _cell(row: dict, col: str, sentinels) -> float:
    raw = row.get(col)
    if raw is None:
        return math.nan
    raw = raw.strip()
    if raw in sentinels:
        return math.nan
    return float(raw)


def _variable_value(name: str, spec, row: dict, sentinels) -> float:
    if isinstance(spec, str):
        return _cell(row, spec, sentinels)
    if "numerator" in spec:
        num = [_cell(row, c, sentinels) for c in _as_list(spec["numerator"])]
        den = [_cell(row, c, sentinels) for c in _as_list(spec["denominator"])]
        if any(math.isnan(x) for x in num + den) or not sum(den) > 0:
            return math.nan
        return min(100.0, 100.0 * sum(num) / sum(den))
    if "under_10k" in spec:
        under = [_cell(row, c, sentinels) for c in _as_list(spec["under_10k"])]
        high = [_cell(row, c, sentinels) for c in _as_list(spec["at_least_50k"])]
        if any(math.isnan(x) for x in under + high):
            return math.nan
        return _disparity(sum(under), sum(high))
    raise SchemaError(f"cannot interpret schema entry for {name}: {spec!r}")


def parse_block_groups(
    source: IO[str],
    schema: CensusSchema | None = None,
    delimiter: str = ",",
    sentinels: Iterable[str] = DEFAULT_SENTINELS,
    skip_bad_rows: bool = False,
) -> list[BlockGroupRecord]:
    """Parse a delimited table with a header row into block-group records.

    Rows are numbered from 2 (the header is row 1). A malformed row raises
    :class:`RowError` unless ``skip_bad_rows`` is set, in which case it is
    logged and dropped.
    """
    schema = schema or CensusSchema()
    sentinels = frozenset(sentinels)
    reader = csv.DictReader(source, delimiter=delimiter)
    header = set(reader.fieldnames or [])
    for field_name, cols in schema.required_columns().items():
        for col in cols:
            if col not in header:
                raise SchemaError(f"missing mandatory column {col!r} (for {field_name})")

    records = []
    for rownum, row in enumerate(reader, start=2):
        try:
            records.append(_parse_row(row, schema, sentinels))
        except ValueError as exc:
            err = RowError(rownum, str(exc))
            if not skip_bad_rows:
                raise err from exc
            logger.warning("skipping %s", err)
    return records


def _parse_row(row: dict, schema: CensusSchema, sentinels) -> BlockGroupRecord:
    geo = GeoId.parse(row[schema.geoid])
    pop = _cell(row, schema.population, sentinels)
    hu = _cell(row, schema.housing_units, sentinels)
    gq = _cell(row, schema.group_quarters, sentinels)
    if math.isnan(pop) or math.isnan(hu):
        raise ValueError(f"{geo}: population and housing units are required")
    gq = 0.0 if math.isnan(gq) else gq
    gq_pct = gq / pop if pop > 0 else 0.0
    values = tuple(
        _variable_value(name, schema.variables[name], row, sentinels) for name in VARIABLE_NAMES
    )
    return BlockGroupRecord(geo, int(pop), int(hu), min(1.0, gq_pct), values)


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_block_groups(records: Iterable[BlockGroupRecord], dest: IO[str], delimiter: str = ",") -> None:
    """Write records as a table readable with the default :class:`CensusSchema`."""
    writer = csv.writer(dest, delimiter=delimiter, lineterminator="\n")
    writer.writerow(["geoid", "population", "housing_units", "group_quarters", *VARIABLE_NAMES])
    for r in records:
        gq = int(round(r.group_quarters_pct * r.population))
        writer.writerow([r.geo.key, r.population, r.housing_units, gq, *map(_fmt, r.variables)])


def write_jsonl(records: Iterable[BlockGroupRecord], dest: IO[str]) -> None:
    for r in records:
        dest.write(json.dumps(r.to_json(), separators=(",", ":")))
        dest.write("\n")


def read_jsonl(source: IO[str]) -> list[BlockGroupRecord]:
    return [BlockGroupRecord.from_json(json.loads(line)) for line in source if line.strip()]


def dumps_jsonl(records: Iterable[BlockGroupRecord]) -> str:
    buf = io.StringIO()
    write_jsonl(records, buf)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------


@dataclass
class FilterReport:
    kept: list[GeoId]
    removed: list[tuple[GeoId, str]]
    records: list[BlockGroupRecord] = field(default_factory=list, repr=False)

    def reason_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for _, reason in self.removed:
            counts[reason] = counts.get(reason, 0) + 1
        return counts

    def write(self, dest: IO[str]) -> None:
        writer = csv.writer(dest, lineterminator="\n")
        writer.writerow(["geoid", "status", "reason"])
        rows = [(g.key, "kept", "") for g in self.kept]
        rows += [(g.key, "removed", reason) for g, reason in self.removed]
        writer.writerows(sorted(rows))


def filter_reason(record: BlockGroupRecord) -> str | None:
    """First violated reliability rule, or None when the record is usable."""
    if record.population < MIN_POPULATION:
        return "low_population"
    if record.housing_units < MIN_HOUSING_UNITS:
        return "low_housing"
    if record.group_quarters_pct > MAX_GROUP_QUARTERS:
        return "high_group_quarters"
    return None


def filter_block_groups(records: Sequence[BlockGroupRecord]) -> FilterReport:
    """Drop block groups with < 100 persons, < 30 housing units or > 1/3 in group quarters."""
    kept, removed, kept_records = [], [], []
    for r in records:
        reason = filter_reason(r)
        if reason is None:
            kept.append(r.geo)
            kept_records.append(r)
        else:
            removed.append((r.geo, reason))
    return FilterReport(kept, removed, kept_records)

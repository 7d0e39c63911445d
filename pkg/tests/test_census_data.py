import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from badi.census_data import (
    HOME_VALUE_INDEX,
    N_VARIABLES,
    POVERTY_INDEX,
    VARIABLE_NAMES,
    BlockGroupRecord,
    CensusSchema,
    GeoId,
    compute_income_disparity,
    dumps_jsonl,
    filter_block_groups,
    filter_reason,
    parse_block_groups,
    read_jsonl,
    write_block_groups,
)
from badi.errors import RowError, SchemaError

from conftest import base_values, make_record

HEADER = ["geoid", "population", "housing_units", "group_quarters", *VARIABLE_NAMES]


def table(rows, header=HEADER, delimiter=","):
    lines = [delimiter.join(header)]
    lines += [delimiter.join(str(c) for c in row) for row in rows]
    return io.StringIO("\n".join(lines) + "\n")


def full_row(geoid="360050001001", home=""):
    vals = [repr(v) for v in base_values()]
    if home is not None:
        vals[HOME_VALUE_INDEX] = home if home else "250000.0"
    return [geoid, 1200, 450, 12, *vals]


def test_canonical_order():
    assert N_VARIABLES == 17
    assert VARIABLE_NAMES[POVERTY_INDEX] == "pct_families_below_poverty"
    assert VARIABLE_NAMES[HOME_VALUE_INDEX] == "median_home_value"
    assert HOME_VALUE_INDEX == 12


def test_parse_fully_populated_row():
    (rec,) = parse_block_groups(table([full_row()]))
    assert rec.geo == GeoId("360050001001")
    assert rec.n_missing == 0
    assert rec.population == 1200 and rec.housing_units == 450
    assert rec.group_quarters_pct == pytest.approx(0.01)


def test_blank_home_value_flags_only_that_variable():
    row = full_row()
    row[4 + HOME_VALUE_INDEX] = ""
    (rec,) = parse_block_groups(table([row]))
    assert [j for j, m in enumerate(rec.missing) if m] == [HOME_VALUE_INDEX]


@pytest.mark.parametrize("sentinel", ["-666666666", "NA", "*", "  "])
def test_sentinels_become_missing(sentinel):
    row = full_row()
    row[4 + POVERTY_INDEX] = sentinel
    (rec,) = parse_block_groups(table([row]))
    assert rec.missing[POVERTY_INDEX] and rec.n_missing == 1


def test_missing_population_column_is_fatal():
    header = [h for h in HEADER if h != "population"]
    row = full_row()
    del row[1]
    with pytest.raises(SchemaError, match="population"):
        parse_block_groups(table([row], header=header))


def test_malformed_geoid_reports_row_number():
    rows = [full_row(), full_row(geoid="36005000100")]
    with pytest.raises(RowError) as info:
        parse_block_groups(table(rows))
    assert info.value.row == 3


def test_skip_bad_rows_keeps_the_rest():
    rows = [full_row(), full_row(geoid="xx"), full_row(geoid="360050001002")]
    recs = parse_block_groups(table(rows), skip_bad_rows=True)
    assert [r.geo.key for r in recs] == ["360050001001", "360050001002"]


def test_census_api_prefix_and_tab_delimiter():
    rows = [full_row(geoid="1500000US360050001001")]
    (rec,) = parse_block_groups(table(rows, delimiter="\t"), delimiter="\t")
    assert rec.geo.key == "360050001001"
    assert (rec.geo.state_fips, rec.geo.county_fips, rec.geo.tract, rec.geo.block_group) == (
        "36", "005", "000100", "1")


def test_income_disparity_values():
    assert compute_income_disparity({0: 40, 50_000: 40}) == pytest.approx(4.60517, abs=1e-5)
    assert compute_income_disparity({0: 40, 50_000: 40}) == math.log(100)
    assert math.isnan(compute_income_disparity({0: 0, 50_000: 40}))
    assert compute_income_disparity({0: 4, 10_000: 99, 50_000: 150, 200_000: 250}) == 0.0
    assert math.isnan(compute_income_disparity({0: 10, 45_000: 30}))


def test_schema_reduces_count_tables():
    schema = CensusSchema.from_mapping({
        "population": "B01003_001E",
        "variables": {
            "income_disparity": {"under_10k": ["b1"], "at_least_50k": ["b11", "b12"]},
            "pct_families_below_poverty": {"numerator": ["pov"], "denominator": ["fam"]},
        },
    })
    header = ["geoid", "B01003_001E", "housing_units", "group_quarters", "b1", "b11", "b12",
              "pov", "fam", *[n for n in VARIABLE_NAMES
                              if n not in ("income_disparity", "pct_families_below_poverty")]]
    vals = base_values()
    others = [repr(v) for j, v in enumerate(vals) if j not in (1, POVERTY_INDEX)]
    row = ["360050001001", 500, 200, 0, 4, 100, 300, 25, 200, *others]
    (rec,) = parse_block_groups(table([row], header=header), schema)
    assert rec.variables[1] == 0.0
    assert rec.variables[POVERTY_INDEX] == 12.5


def test_schema_rejects_unknown_variable():
    with pytest.raises(SchemaError):
        CensusSchema.from_mapping({"variables": {"pct_cats": "x"}})


def test_record_invariants():
    vals = base_values()
    vals[POVERTY_INDEX] = 101.0
    with pytest.raises(ValueError):
        make_record("360050001001", vals)
    with pytest.raises(ValueError):
        make_record("360050001001", gq=1.5)
    with pytest.raises(ValueError):
        make_record("360050001001", base_values()[:16])
    with pytest.raises(ValueError):
        GeoId("36005000100a")


@pytest.mark.parametrize("pop,housing,gq,expected", [
    (99, 50, 0.0, "low_population"),
    (100, 30, 0.33, None),
    (500, 200, 0.34, "high_group_quarters"),
    (500, 29, 0.0, "low_housing"),
    (50, 10, 0.9, "low_population"),
])
def test_filter_reasons(pop, housing, gq, expected):
    assert filter_reason(make_record("360050001001", population=pop, housing=housing, gq=gq)) == expected


def test_filter_report_partitions_input():
    recs = [make_record(f"3600500010{i:02d}", population=pop)
            for i, pop in enumerate([50, 150, 99, 1000])]
    report = filter_block_groups(recs)
    kept = {g.key for g in report.kept}
    removed = {g.key for g, _ in report.removed}
    assert kept | removed == {r.geo.key for r in recs}
    assert not kept & removed
    assert report.reason_counts() == {"low_population": 2}
    assert filter_block_groups([]).kept == []


reliability = st.tuples(st.integers(0, 400), st.integers(0, 100), st.floats(0, 1))


@settings(max_examples=60, deadline=None)
@given(st.lists(reliability, max_size=30))
def test_filter_idempotent(rows):
    recs = [make_record(f"3600500010{i:02d}", population=p, housing=h, gq=g)
            for i, (p, h, g) in enumerate(rows)]
    once = filter_block_groups(recs)
    twice = filter_block_groups(once.records)
    assert twice.removed == []
    assert twice.kept == once.kept


values = st.lists(
    st.one_of(st.just(math.nan), st.floats(0.5, 99.5, allow_subnormal=False)),
    min_size=N_VARIABLES, max_size=N_VARIABLES,
)


@settings(max_examples=60, deadline=None)
@given(st.lists(values, min_size=1, max_size=8))
def test_jsonl_round_trip(rows):
    recs = [make_record(f"3600500010{i:02d}", v, gq=0.125) for i, v in enumerate(rows)]
    back = read_jsonl(io.StringIO(dumps_jsonl(recs)))
    assert [r.to_json() for r in back] == [r.to_json() for r in recs]
    assert [r.missing for r in back] == [r.missing for r in recs]


def test_table_round_trip(rng):
    from conftest import random_records

    recs = random_records(rng, missing=0.1)
    buf = io.StringIO()
    write_block_groups(recs, buf)
    buf.seek(0)
    back = parse_block_groups(buf)
    for a, b in zip(recs, back):
        assert a.geo == b.geo
        np.testing.assert_array_equal(np.array(a.variables), np.array(b.variables))


def test_from_json_rejects_short_vector():
    with pytest.raises(ValueError):
        BlockGroupRecord.from_json({"geoid": "360050001001", "population": 1, "housing_units": 1,
                                    "group_quarters_pct": 0.0, "variables": [1.0]})

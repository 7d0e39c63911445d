import math

import numpy as np
import pytest

from badi.census_data import N_VARIABLES, VARIABLES, BlockGroupRecord, GeoId


def base_values():
    """A plausible fully observed 17-vector."""
    out = []
    for var in VARIABLES:
        if var.kind == "dollar":
            out.append(50_000.0)
        elif var.kind == "percent":
            out.append(20.0)
        else:
            out.append(1.0)
    return out


def make_record(geoid, values=None, population=1000, housing=400, gq=0.0):
    return BlockGroupRecord(GeoId.parse(geoid), population, housing, gq,
                            tuple(base_values() if values is None else values))


def random_records(rng, n_counties=2, tracts=3, bgs=4, missing=0.0, state="39"):
    """Random records across a small nested geography, values in valid ranges."""
    recs = []
    for c in range(n_counties):
        for t in range(tracts):
            for b in range(bgs):
                geoid = f"{state}{c + 1:03d}{t + 1:06d}{b + 1}"
                vals = []
                for var in VARIABLES:
                    if var.kind == "dollar":
                        vals.append(float(rng.uniform(1_000, 500_000)))
                    elif var.kind == "percent":
                        vals.append(float(rng.uniform(0, 100)))
                    else:
                        vals.append(float(rng.normal(1.0, 1.0)))
                recs.append(make_record(geoid, vals))
    if missing:
        recs = mask(recs, rng, missing)
    return recs


def mask(records, rng, rate):
    """Mask cells at random, keeping at least one observed cell per record."""
    out = []
    for r in records:
        vals = list(r.variables)
        hide = rng.random(N_VARIABLES) < rate
        if hide.all():
            hide[rng.integers(N_VARIABLES)] = False
        for j in np.flatnonzero(hide):
            vals[j] = math.nan
        out.append(r.with_variables(vals))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one status line per acceptance criterion; printed in the terminal summary."""

    def record(number, passed, detail):
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        line = f"criterion {number}: {status} | {detail}"
        print(line)
        _ACCEPTANCE_LINES.append(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)

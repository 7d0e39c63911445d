"""Synthetic census block groups and Medicare-like beneficiaries with known ground truth.

Random streams: every draw comes from a PCG64 generator seeded with
``SeedSequence(seed, spawn_key=(stream, *entity))``. Census draws use one
stream per county and beneficiary draws one stream per (program, state)
stratum, so adding counties or strata never changes the draws of existing
ones.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .census_data import N_VARIABLES, VARIABLES, BlockGroupRecord, GeoId
from .outcomes_glm import BENEFICIARY_FIELDS, QUINTILE_COLUMNS

STREAM_CENSUS = 1
STREAM_BENEFICIARIES = 2
STREAM_OUTCOMES = 3

STATE_ABBR = {
    "01": "AL", "02": "AK", "04": "AZ", "05": "AR", "06": "CA", "08": "CO", "09": "CT",
    "10": "DE", "11": "DC", "12": "FL", "13": "GA", "15": "HI", "16": "ID", "17": "IL",
    "18": "IN", "19": "IA", "20": "KS", "21": "KY", "22": "LA", "23": "ME", "24": "MD",
    "25": "MA", "26": "MI", "27": "MN", "28": "MS", "29": "MO", "30": "MT", "31": "NE",
    "32": "NV", "33": "NH", "34": "NJ", "35": "NM", "36": "NY", "37": "NC", "38": "ND",
    "39": "OH", "40": "OK", "41": "OR", "42": "PA", "44": "RI", "45": "SC", "46": "SD",
    "47": "TN", "48": "TX", "49": "UT", "50": "VT", "51": "VA", "53": "WA", "54": "WV",
    "55": "WI", "56": "WY",
}
# States of the claims cohort first, so small configs land on them.
DEFAULT_STATES = ("39", "29", "06", "48", "04", "32", "12", "09")

# Per-variable (loading, scale, offset). Loadings are signed so that a higher
# latent value means more disadvantage.
DEFAULT_VARIABLE_MODEL = {
    "median_family_income": (-0.80, 22_000.0, 75_000.0),
    "income_disparity": (0.60, 0.45, 2.9),
    "pct_families_below_poverty": (0.85, 5.0, 11.0),
    "pct_below_150_poverty": (0.85, 7.0, 20.0),
    "pct_single_parent": (0.60, 6.0, 22.0),
    "pct_no_vehicle": (0.60, 4.0, 9.0),
    "pct_no_telephone": (0.30, 0.8, 2.0),
    "pct_incomplete_plumbing": (0.20, 0.25, 0.7),
    "pct_owner_occupied": (-0.50, 12.0, 64.0),
    "pct_crowded": (0.40, 2.0, 4.0),
    "median_mortgage": (-0.60, 420.0, 1_700.0),
    "median_gross_rent": (-0.50, 260.0, 1_150.0),
    "median_home_value": (-0.70, 70_000.0, 260_000.0),
    "pct_white_collar": (-0.70, 9.0, 38.0),
    "pct_unemployed": (0.60, 2.2, 5.5),
    "pct_no_high_school": (0.75, 4.0, 10.0),
    "pct_at_least_high_school": (-0.75, 5.0, 88.0),
}
RACE_LEVELS = ("white", "black", "hispanic", "asian", "other")
RACE_PROBS = (0.74, 0.11, 0.09, 0.04, 0.02)


def _generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


@dataclass
class SynthConfig:
    seed: int = 20240101
    n_states: int = 2
    counties_per_state: int = 5
    tracts_per_county: int = 20
    block_groups_per_tract: int = 5
    loadings: tuple[float, ...] = tuple(v[0] for v in DEFAULT_VARIABLE_MODEL.values())
    scales: tuple[float, ...] = tuple(v[1] for v in DEFAULT_VARIABLE_MODEL.values())
    offsets: tuple[float, ...] = tuple(v[2] for v in DEFAULT_VARIABLE_MODEL.values())
    noise_sd: float = 0.6
    missing_rate: float = 0.03
    violation_rate: float = 0.05
    # Share of latent variance at county and tract level; the rest is block-group noise.
    county_share: float = 0.3
    tract_share: float = 0.3
    # Beneficiaries: (program, state FIPS) -> count. Empty means 2,000 per program per state.
    beneficiaries: dict = field(default_factory=dict)
    cost_beta: dict = field(default_factory=lambda: {
        "intercept": 7.2, "q1": math.log(1.08), "q2": 0.0, "q4": 0.0, "q5": math.log(0.85),
        "age": 0.01, "male": -0.05, "chronic_condition_count": 0.08, "hcc_condition_count": 0.05,
        "hcc_score": 0.35, "race_black": 0.05, "race_hispanic": -0.03, "race_asian": -0.1, "race_other": 0.0,
    })
    er_beta: dict = field(default_factory=lambda: {
        "intercept": -3.2, "q1": math.log(1.05), "q2": 0.0, "q4": 0.0, "q5": math.log(0.9),
        "age": 0.01, "male": 0.02, "chronic_condition_count": 0.1, "hcc_condition_count": 0.06,
        "hcc_score": 0.3, "race_black": 0.08, "race_hispanic": 0.02, "race_asian": -0.15, "race_other": 0.0,
    })
    gamma_shape: float = 1.5
    quintile_variant: str = "bADI"

    def __post_init__(self):
        for name in ("n_states", "counties_per_state", "tracts_per_county", "block_groups_per_tract"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_states > len(STATE_ABBR):
            raise ValueError("too many states")
        if self.counties_per_state > 499 or self.tracts_per_county > 9999 or self.block_groups_per_tract > 9:
            raise ValueError("geography counts exceed GEOID capacity")
        for name in ("loadings", "scales", "offsets"):
            if len(getattr(self, name)) != N_VARIABLES:
                raise ValueError(f"{name} must have {N_VARIABLES} entries")
        if not 0 <= self.missing_rate < 1:
            raise ValueError("missing_rate must lie in [0, 1)")
        if not 0 <= self.violation_rate <= 1:
            raise ValueError("violation_rate must lie in [0, 1]")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if not self.gamma_shape > 0:
            raise ValueError("gamma_shape must be positive")
        if self.county_share < 0 or self.tract_share < 0 or self.county_share + self.tract_share > 1:
            raise ValueError("county_share and tract_share must be non-negative and sum to <= 1")

    @property
    def states(self) -> list[str]:
        rest = [s for s in sorted(STATE_ABBR) if s not in DEFAULT_STATES]
        return list((DEFAULT_STATES + tuple(rest))[: self.n_states])

    def true_adi_weights(self) -> np.ndarray:
        """Factor score coefficients of the generating one-factor model (standardized scale).

        Applied to unstandardized variables these play the role of published
        ADI weights.
        """
        L = np.asarray(self.loadings, dtype=float)
        total = L**2 + self.noise_sd**2
        lam = L / np.sqrt(total)
        psi = 1.0 - lam**2
        return (lam / psi) / (1.0 + np.sum(lam**2 / psi))


@dataclass
class SynthCensus:
    records: list[BlockGroupRecord]
    latent: dict[str, float]


def synth_census(cfg: SynthConfig) -> SynthCensus:
    """Block groups with a hierarchical latent disadvantage and 17 noisy indicators.

    The latent value of a block group is
    ``sqrt(c) * county + sqrt(t) * tract + sqrt(1 - c - t) * own``, each term a
    standard normal draw, so it is marginally standard normal. Variable ``j``
    is ``scale_j * (loading_j * d + noise_sd * e) + offset_j``, clipped into
    its admissible range.
    """
    L = np.asarray(cfg.loadings, dtype=float)
    scale = np.asarray(cfg.scales, dtype=float)
    offset = np.asarray(cfg.offsets, dtype=float)
    kinds = [v.kind for v in VARIABLES]
    bg_share = 1.0 - cfg.county_share - cfg.tract_share
    records, latent = [], {}
    for state in cfg.states:
        for c_idx in range(cfg.counties_per_state):
            rng = _generator(cfg.seed, STREAM_CENSUS, int(state), c_idx)
            county = f"{2 * c_idx + 1:03d}"
            nt, nb = cfg.tracts_per_county, cfg.block_groups_per_tract
            n = nt * nb
            c_eff = rng.standard_normal()
            t_eff = np.repeat(rng.standard_normal(nt), nb)
            own = rng.standard_normal(n)
            d = math.sqrt(cfg.county_share) * c_eff + math.sqrt(cfg.tract_share) * t_eff + math.sqrt(bg_share) * own
            noise = rng.standard_normal((n, N_VARIABLES))
            X = scale * (np.outer(d, L) + cfg.noise_sd * noise) + offset
            for j, kind in enumerate(kinds):
                if kind == "percent":
                    X[:, j] = np.clip(X[:, j], 0.0, 100.0)
                elif kind == "dollar":
                    X[:, j] = np.maximum(X[:, j], 0.05 * offset[j])
            mask = rng.random((n, N_VARIABLES)) < cfg.missing_rate
            pop, hu, gq = _reliability(rng, n, cfg.violation_rate)

            # Every record keeps at least one value and every tract keeps each variable once.
            for i in np.flatnonzero(mask.all(axis=1)):
                mask[i, rng.integers(N_VARIABLES)] = False
            for t in range(nt):
                block = mask[t * nb:(t + 1) * nb]
                for j in np.flatnonzero(block.all(axis=0)):
                    block[rng.integers(nb), j] = False
            X[mask] = np.nan

            for t in range(nt):
                tract = f"{(t + 1) * 100:06d}"
                for b in range(nb):
                    i = t * nb + b
                    geo = GeoId(f"{state}{county}{tract}{b + 1}")
                    records.append(BlockGroupRecord(geo, int(pop[i]), int(hu[i]), gq[i] / pop[i], tuple(X[i])))
                    latent[geo.key] = float(d[i])
    return SynthCensus(records, latent)


def _reliability(rng: np.random.Generator, n: int, violation_rate: float):
    """Population, housing units and group-quarters counts; a share of rows violates one filter."""
    pop = np.round(300 + rng.lognormal(7.0, 0.4, n)).astype(int)
    hu = np.maximum(30, np.round(pop / rng.uniform(2.2, 2.8, n))).astype(int)
    gq = np.floor(pop * rng.uniform(0.0, 0.15, n)).astype(int)
    violate = rng.random(n) < violation_rate
    kind = rng.integers(0, 3, n)
    low_pop = violate & (kind == 0)
    low_hu = violate & (kind == 1)
    high_gq = violate & (kind == 2)
    pop[low_pop] = rng.integers(20, 100, low_pop.sum())
    hu[low_pop] = np.maximum(30, pop[low_pop] // 2)
    hu[low_hu] = rng.integers(5, 30, low_hu.sum())
    gq[low_pop] = 0
    gq[high_gq] = np.ceil(pop[high_gq] * rng.uniform(0.4, 0.9, high_gq.sum())).astype(int)
    return pop, hu, gq


def synth_beneficiaries(cfg: SynthConfig, quintiles: dict[str, int]) -> pd.DataFrame:
    """Beneficiaries living in the index's block groups, with gamma costs and Poisson ER visits.

    ``quintiles`` maps GEOID -> national quintile of ``cfg.quintile_variant``;
    the quintile effects in ``cfg.cost_beta`` / ``cfg.er_beta`` act through it.
    """
    by_state: dict[str, list[str]] = {}
    for g in sorted(quintiles):
        by_state.setdefault(g[:2], []).append(g)
    plan = cfg.beneficiaries or {
        (program, state): 2_000 for program in ("FFS", "MA") for state in cfg.states if state in by_state
    }
    frames = []
    for (program, state) in sorted(plan):
        count = plan[(program, state)]
        geoids = by_state.get(state)
        if not geoids or count <= 0:
            continue
        rng = _generator(cfg.seed, STREAM_BENEFICIARIES, 0 if program == "FFS" else 1, int(state))
        frames.append(_draw_stratum(rng, cfg, program, state, geoids, quintiles, count))
    if not frames:
        return pd.DataFrame(columns=list(BENEFICIARY_FIELDS))
    return pd.concat(frames, ignore_index=True)


def _draw_stratum(rng, cfg, program, state, geoids, quintiles, n) -> pd.DataFrame:
    geo = np.asarray(geoids)[rng.integers(0, len(geoids), n)]
    age = np.clip(np.round(65 + rng.gamma(2.0, 3.5, n), 1), 65, 100)
    male = rng.random(n) < 0.45
    race = np.asarray(RACE_LEVELS)[rng.choice(len(RACE_LEVELS), n, p=RACE_PROBS)]
    chronic = rng.poisson(3.0, n)
    hcc_count = rng.poisson(1.5, n)
    hcc_score = np.round(rng.lognormal(-0.1, 0.45, n), 4) + 0.01
    quint = np.array([quintiles[g] for g in geo])

    cov = {
        "intercept": np.ones(n),
        "age": age,
        "male": male.astype(float),
        "chronic_condition_count": chronic.astype(float),
        "hcc_condition_count": hcc_count.astype(float),
        "hcc_score": hcc_score,
    }
    for level, name in QUINTILE_COLUMNS.items():
        cov[name] = (quint == level).astype(float)
    for level in RACE_LEVELS[1:]:
        cov[f"race_{level}"] = (race == level).astype(float)

    def linear(beta: dict) -> np.ndarray:
        return sum(beta.get(name, 0.0) * v for name, v in cov.items())

    mu_cost = np.exp(linear(cfg.cost_beta))
    cost = rng.gamma(cfg.gamma_shape, mu_cost / cfg.gamma_shape)
    er = rng.poisson(np.exp(linear(cfg.er_beta)))
    ids = [f"{program}{state}-{i:07d}" for i in range(n)]
    return pd.DataFrame({
        "id": ids,
        "geoid": geo,
        "program": program,
        "state": STATE_ABBR[state],
        "age": age,
        "sex": np.where(male, "M", "F"),
        "race": race,
        "chronic_condition_count": chronic,
        "hcc_condition_count": hcc_count,
        "hcc_score": hcc_score,
        "total_cost": np.round(cost, 2) + 0.01,
        "er_visits": er,
    }, columns=list(BENEFICIARY_FIELDS))


def synth_outcomes(cfg: SynthConfig, census: SynthCensus, measures: dict[str, float] | None = None) -> pd.DataFrame:
    """County-level outcome table driven by the mean latent disadvantage of each county.

    ``measures`` maps a measure id to its slope on the county latent mean;
    values are ``base + slope * latent + noise``.
    """
    measures = measures or {"LIFE_EXPECTANCY": -2.0, "DIABETES": 1.5, "CSMOKING": 2.0, "DENTAL": -3.0, "CHD": 0.5}
    base = {"LIFE_EXPECTANCY": 78.0, "DIABETES": 11.0, "CSMOKING": 16.0, "DENTAL": 64.0, "CHD": 6.5}
    by_county: dict[str, list[float]] = {}
    for g, d in census.latent.items():
        by_county.setdefault(g[:5], []).append(d)
    rows = []
    for county in sorted(by_county):
        rng = _generator(cfg.seed, STREAM_OUTCOMES, int(county))
        d = float(np.mean(by_county[county]))
        for measure in sorted(measures):
            value = base.get(measure, 50.0) + measures[measure] * d + 0.3 * rng.standard_normal()
            rows.append((county, measure, round(value, 6)))
    return pd.DataFrame(rows, columns=["geoid", "measure", "value"])


def synth_crosswalk(census: SynthCensus, counties_per_metro: int = 2) -> pd.DataFrame:
    """Group consecutive counties of each state into synthetic metro areas."""
    counties = sorted({g[:5] for g in census.latent})
    rows = []
    per_state: dict[str, int] = {}
    for county in counties:
        state = county[:2]
        k = per_state.get(state, 0)
        per_state[state] = k + 1
        metro = f"M{state}{k // counties_per_metro:03d}"
        rows.append((county, metro, f"Synthetic metro {STATE_ABBR[state]}-{k // counties_per_metro + 1}"))
    return pd.DataFrame(rows, columns=["county_fips", "metro_id", "metro_name"])


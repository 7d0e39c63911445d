import io
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from badi.census_data import N_VARIABLES, VARIABLES, dumps_jsonl, filter_block_groups
from badi.errors import SingularMatrixError
from badi.imputation import knn_impute
from badi.index_core import build_badi, principal_factor, standardize
from badi.outcomes_glm import Beneficiary, build_design, fit_cell
from badi.synth import SynthConfig, synth_beneficiaries, synth_census, synth_crosswalk, synth_outcomes


def badi_quintiles(census):
    kept = filter_block_groups(census.records).records
    imputed, _ = knn_impute(kept)
    scores, _, _ = build_badi(imputed)
    return scores


def test_config_validation():
    for bad in (dict(n_states=0), dict(missing_rate=1.0), dict(gamma_shape=0.0),
                dict(loadings=(1.0,)), dict(county_share=0.8, tract_share=0.5)):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_missing_rate_zero():
    census = synth_census(SynthConfig(missing_rate=0.0, counties_per_state=2))
    assert all(r.n_missing == 0 for r in census.records)


def test_missing_rate_close_to_configured():
    census = synth_census(SynthConfig(missing_rate=0.1, counties_per_state=4))
    cells = len(census.records) * N_VARIABLES
    rate = sum(r.n_missing for r in census.records) / cells
    assert abs(rate - 0.1) < 4 * math.sqrt(0.1 * 0.9 / cells) + 0.005


def test_fixed_seed_is_byte_identical():
    a, b = synth_census(SynthConfig(seed=42)), synth_census(SynthConfig(seed=42))
    assert dumps_jsonl(a.records) == dumps_jsonl(b.records)
    assert a.latent == b.latent
    assert dumps_jsonl(synth_census(SynthConfig(seed=43)).records) != dumps_jsonl(a.records)


def test_adding_counties_keeps_existing_draws():
    small = synth_census(SynthConfig(seed=8, counties_per_state=2))
    big = synth_census(SynthConfig(seed=8, counties_per_state=4))
    by_key = {r.geo.key: r for r in big.records}
    for r in small.records:
        assert by_key[r.geo.key].to_json() == r.to_json()


def test_violation_rate_within_tolerance():
    cfg = SynthConfig(seed=3, counties_per_state=10, tracts_per_county=100, missing_rate=0.0)
    census = synth_census(cfg)
    assert len(census.records) == 10_000
    report = filter_block_groups(census.records)
    rate = len(report.removed) / len(census.records)
    assert abs(rate - cfg.violation_rate) < 0.02
    assert set(report.reason_counts()) == {"low_population", "low_housing", "high_group_quarters"}


def test_noise_free_equal_loadings_limit():
    cfg = SynthConfig(seed=5, noise_sd=0.0, loadings=(0.1,) * N_VARIABLES, missing_rate=0.0)
    census = synth_census(cfg)
    d = np.array([census.latent[r.geo.key] for r in census.records])
    X = np.array([r.variables for r in census.records])
    A = np.column_stack([np.ones_like(d), d])
    for j in range(N_VARIABLES):
        coef, *_ = np.linalg.lstsq(A, X[:, j], rcond=None)
        assert np.abs(A @ coef - X[:, j]).max() < 1e-9 * max(1.0, np.abs(X[:, j]).max())
    # Every column is the same affine image of d, so the correlation matrix is all ones.
    with pytest.raises(SingularMatrixError):
        principal_factor(standardize(census.records))

    near = SynthConfig(seed=5, noise_sd=1e-3, loadings=(0.1,) * N_VARIABLES, missing_rate=0.0,
                       violation_rate=0.0)
    census = synth_census(near)
    scores, _, _ = build_badi(census.records)
    rho = spearmanr(scores.rescaled, [census.latent[g] for g in scores.geoids]).statistic
    assert rho > 0.9999


def test_latent_recovered_by_badi():
    census = synth_census(SynthConfig(seed=21))
    scores = badi_quintiles(census)
    rho = spearmanr(scores.national_percentile, [census.latent[g] for g in scores.geoids]).statistic
    assert rho > 0.95


def test_true_adi_weights_match_factor_scores():
    cfg = SynthConfig(seed=4, county_share=0.0, tract_share=0.0, missing_rate=0.0, violation_rate=0.0,
                      counties_per_state=10, tracts_per_county=200)
    census = synth_census(cfg)
    coef = principal_factor(standardize(census.records))
    w = cfg.true_adi_weights()
    cos = (coef.oriented_weights @ w) / np.linalg.norm(coef.oriented_weights) / np.linalg.norm(w)
    assert cos > 0.99


def test_records_satisfy_invariants():
    census = synth_census(SynthConfig(seed=9, missing_rate=0.2, violation_rate=0.3))
    for r in census.records:
        for var, x in zip(VARIABLES, r.variables):
            if math.isnan(x):
                continue
            if var.kind == "percent":
                assert 0 <= x <= 100
            elif var.kind == "dollar":
                assert x > 0
        assert r.n_missing < N_VARIABLES


def test_beneficiaries_satisfy_invariants_and_are_reproducible():
    cfg = SynthConfig(seed=12, counties_per_state=2)
    census = synth_census(cfg)
    quint = badi_quintiles(census).quintile_map()
    a, b = synth_beneficiaries(cfg, quint), synth_beneficiaries(cfg, quint)
    assert a.equals(b)
    assert len(a) == 2 * 2 * 2000
    for row in a.itertuples(index=False):
        Beneficiary(**row._asdict())
    assert set(a["geoid"]) <= set(quint)


def test_q5_effect_recovered_at_scale():
    cfg = SynthConfig(seed=31, n_states=1, counties_per_state=4,
                      beneficiaries={("FFS", "39"): 100_000})
    quint = badi_quintiles(synth_census(cfg)).quintile_map()
    df = synth_beneficiaries(cfg, quint)
    _, cons, _, _ = fit_cell(build_design(df, quint), "total_cost")
    assert -0.19 <= cons[5].percent_change <= -0.11


def test_outcomes_and_crosswalk_shapes():
    cfg = SynthConfig(seed=2)
    census = synth_census(cfg)
    out = synth_outcomes(cfg, census)
    counties = {g[:5] for g in census.latent}
    assert set(out["geoid"]) == counties
    assert not out.duplicated(["geoid", "measure"]).any()
    cw = synth_crosswalk(census)
    assert cw["county_fips"].is_unique and len(cw) == len(counties)
    buf = io.StringIO()
    cw.to_csv(buf, index=False)
    assert buf.getvalue().startswith("county_fips,metro_id,metro_name")

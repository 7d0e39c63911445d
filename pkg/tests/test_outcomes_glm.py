import io
import json
import math

import numpy as np
import pandas as pd
import pytest
import statsmodels.api as sm

from badi.errors import SingularMatrixError
from badi.outcomes_glm import (
    BENEFICIARY_FIELDS,
    Beneficiary,
    GlmFit,
    build_design,
    contrast,
    fit_cell,
    fit_glm,
    read_beneficiaries,
    stratified_run,
    write_beneficiaries,
)
from badi.synth import SynthConfig, synth_beneficiaries

from oracles import GAMMA_BETA, simulate_gamma


def toy_geoids(state, n):
    return [f"{state}001{i // 5:06d}{i % 5 + 1}" for i in range(n)]


def toy_quintiles(states=("39",), n=200):
    return {g: i % 5 + 1 for s in states for i, g in enumerate(toy_geoids(s, n))}


def people(quintiles, n=2000, seed=5, **overrides):
    states = sorted({g[:2] for g in quintiles})
    cfg = SynthConfig(seed=seed, n_states=len(states), **overrides)
    assert sorted(cfg.states) == states
    return synth_beneficiaries(cfg, quintiles)


def test_beneficiary_invariants():
    good = dict(id="a", geoid="390010000011", program="FFS", state="OH", age=70, sex="F",
                race="white", chronic_condition_count=2, hcc_condition_count=1, hcc_score=0.9,
                total_cost=10.0, er_visits=0)
    Beneficiary(**good)
    for key, bad in [("age", 130), ("sex", "X"), ("hcc_score", 0.0), ("total_cost", -1.0),
                     ("er_visits", -1), ("program", "VA")]:
        with pytest.raises(ValueError):
            Beneficiary(**{**good, key: bad})


def test_design_reference_coding():
    df = pd.DataFrame([
        dict(id="a", geoid="g3", program="FFS", state="OH", age=70, sex="F", race="white",
             chronic_condition_count=2, hcc_condition_count=1, hcc_score=0.9, total_cost=5.0, er_visits=0),
        dict(id="b", geoid="g1", program="FFS", state="OH", age=70, sex="F", race="white",
             chronic_condition_count=2, hcc_condition_count=1, hcc_score=0.9, total_cost=5.0, er_visits=0),
        dict(id="c", geoid="g5", program="FFS", state="OH", age=70, sex="F", race="white",
             chronic_condition_count=2, hcc_condition_count=1, hcc_score=0.9, total_cost=5.0, er_visits=0),
    ])
    with pytest.warns(UserWarning, match="all-zero"):
        design = build_design(df, {"g1": 1, "g3": 3, "g5": 5})
    cols = design.columns
    row = dict(zip(cols, design.X[0]))
    assert all(row.get(q, 0.0) == 0.0 for q in ("q1", "q2", "q4", "q5"))
    diff = [c for c, a, b in zip(cols, design.X[1], design.X[2]) if a != b]
    assert diff == ["q1", "q5"]
    assert {"q2", "q4", "male"} <= set(design.dropped_columns)


def test_design_tabulation_oracle():
    quint = toy_quintiles(("39",))
    df = people(quint, seed=11).iloc[:1000]
    df = pd.concat([df, df.iloc[:3].assign(geoid="999999999999")], ignore_index=True)
    design = build_design(df, quint)
    assert design.n_unmatched == 3 and len(design.X) == 1000
    means = dict(zip(design.columns, design.X.mean(axis=0)))

    matched = df.iloc[:1000]
    counts = {}
    for g in matched["geoid"]:
        counts[quint[g]] = counts.get(quint[g], 0) + 1
    for q in (1, 2, 4, 5):
        assert means[f"q{q}"] == counts.get(q, 0) / 1000
    races = {}
    for r in matched["race"]:
        races[r] = races.get(r, 0) + 1
    reference = min(races, key=lambda r: (-races[r], r))
    assert design.race_reference == reference
    for r, c in races.items():
        if r != reference:
            assert means[f"race_{r}"] == c / 1000
    assert means["male"] == sum(1 for s in matched["sex"] if s == "M") / 1000
    assert means["age"] == pytest.approx(sum(matched["age"]) / 1000, rel=1e-12)
    assert (design.X[:, 1:5].sum(axis=1) <= 1).all()
    assert (design.X[design.quintile == 3, 1:5] == 0).all()


@pytest.mark.parametrize("family", ["gamma_log", "poisson_log"])
def test_intercept_only_recovers_log_mean(rng, family):
    y = rng.gamma(2.0, 50.0, 3000) if family == "gamma_log" else rng.poisson(2.3, 3000).astype(float)
    fit = fit_glm(np.ones((3000, 1)), y, family)
    assert fit.converged
    assert abs(fit.beta[0] - math.log(y.mean())) < 1e-8


def test_gamma_matches_statsmodels(rng):
    X, y, cols = simulate_gamma(rng, 4000, GAMMA_BETA)
    fit = fit_glm(X, y, "gamma_log", cols)
    ref = sm.GLM(y, X, family=sm.families.Gamma(sm.families.links.Log())).fit(scale="X2", tol=1e-12)
    np.testing.assert_allclose(fit.beta, ref.params, rtol=0, atol=1e-7)
    np.testing.assert_allclose(fit.se, ref.bse, rtol=1e-6)
    assert fit.dispersion == pytest.approx(ref.scale, rel=1e-6)
    assert fit.deviance == pytest.approx(ref.deviance, rel=1e-8)
    np.testing.assert_allclose(fit.pvalues, ref.pvalues, rtol=1e-4, atol=1e-12)


@pytest.mark.parametrize("quasi", [False, True])
def test_poisson_matches_statsmodels(rng, quasi):
    X = np.column_stack([np.ones(3000), rng.normal(size=3000), rng.random(3000) < 0.3])
    y = rng.poisson(np.exp(0.2 + 0.4 * X[:, 1] - 0.3 * X[:, 2])).astype(float)
    fit = fit_glm(X, y, "poisson_log", quasi=quasi)
    ref = sm.GLM(y, X, family=sm.families.Poisson()).fit(scale="X2" if quasi else None, tol=1e-12)
    np.testing.assert_allclose(fit.beta, ref.params, atol=1e-7)
    np.testing.assert_allclose(fit.se, ref.bse, rtol=1e-6)
    assert (fit.dispersion == 1.0) != quasi


def test_quasi_scales_standard_errors(rng):
    X = np.column_stack([np.ones(2000), rng.normal(size=2000)])
    y = rng.negative_binomial(2, 0.4, 2000).astype(float)
    plain, quasi = fit_glm(X, y, "poisson_log"), fit_glm(X, y, "poisson_log", quasi=True)
    np.testing.assert_allclose(quasi.se, plain.se * math.sqrt(quasi.dispersion), rtol=1e-12)


def test_deviance_non_increasing(rng):
    X, y, cols = simulate_gamma(rng, 5000, GAMMA_BETA)
    fit = fit_glm(X, y, "gamma_log", cols)
    assert np.all(np.diff(fit.deviance_trace) <= 0)
    assert fit.iterations == len(fit.deviance_trace)


def test_response_rescaling_equivariance(rng):
    X, y, cols = simulate_gamma(rng, 3000, GAMMA_BETA)
    a, b = fit_glm(X, y, "gamma_log", cols), fit_glm(X, y * 250.0, "gamma_log", cols)
    assert abs(b.beta[0] - a.beta[0] - math.log(250.0)) < 1e-8
    np.testing.assert_allclose(b.beta[1:], a.beta[1:], atol=1e-8)
    np.testing.assert_allclose(b.se, a.se, atol=1e-8)
    np.testing.assert_allclose(b.pvalues, a.pvalues, atol=1e-8)


def test_rank_deficiency_names_columns(rng):
    X = np.column_stack([np.ones(100), rng.normal(size=100), rng.normal(size=100)])
    X = np.column_stack([X, X[:, 1] + X[:, 2]])
    with pytest.raises(SingularMatrixError, match="collinear"):
        fit_glm(X, rng.gamma(2.0, 1.0, 100), columns=["intercept", "a", "b", "a_plus_b"])


def test_input_validation(rng):
    with pytest.raises(ValueError):
        fit_glm(np.ones((10, 1)), np.r_[np.ones(9), 0.0], "gamma_log")
    with pytest.raises(ValueError):
        fit_glm(np.ones((10, 1)), np.full(10, 1.5), "poisson_log")
    with pytest.raises(ValueError):
        fit_glm(np.ones((2, 3)), np.ones(2))


def test_non_convergence_is_reported(rng):
    X, y, cols = simulate_gamma(rng, 2000, GAMMA_BETA)
    fit = fit_glm(X, y, "gamma_log", cols, max_iter=2)
    assert not fit.converged and fit.iterations == 2


def test_known_effects_within_three_se():
    rng = np.random.default_rng(99)
    X, y, cols = simulate_gamma(rng, 50_000, GAMMA_BETA)
    fit = fit_glm(X, y, "gamma_log", cols)
    assert np.all(np.abs(fit.beta - GAMMA_BETA) < 3 * fit.se)


def manual_fit(beta_q1, beta_q5, se=0.05):
    cols = ["intercept", "q1", "q5"]
    return GlmFit("gamma_log", cols, np.array([4.0, beta_q1, beta_q5]), np.full(3, se),
                  np.eye(3) * se**2, 1.0, 0.0, 3, True, [0.0], 100)


def small_design():
    df = pd.DataFrame({"geoid": ["a", "b", "c", "d"], "age": 70.0, "sex": "F", "race": "white",
                       "chronic_condition_count": 1, "hcc_condition_count": 1, "hcc_score": 1.0})
    with pytest.warns(UserWarning):
        design = build_design(df, {"a": 1, "b": 3, "c": 5, "d": 3})
    design.X = design.X[:, [design.columns.index(c) for c in ("intercept", "q1", "q5")]]
    design.columns = ["intercept", "q1", "q5"]
    return design


def test_contrast_null_and_known_effects():
    cons = contrast(manual_fit(math.log(1.10), 0.0), small_design())
    q1, q5 = cons[1], cons[5]
    assert q5.percent_change == 0.0 and q5.marginal_effect == 0.0 and q5.p_value == 1.0
    assert not q5.significant
    assert q1.percent_change == math.exp(math.log(1.10)) - 1.0
    assert q1.percent_change == pytest.approx(0.10, abs=1e-15)
    assert q1.marginal_effect == pytest.approx(math.exp(4.0) * 0.10, rel=1e-12)
    assert q1.ci_low < q1.percent_change < q1.ci_high
    assert q1.significant == (q1.p_value < 0.05)


def test_q5_effect_recovered_within_wald_interval():
    quint = toy_quintiles(("39",), n=500)
    df = people(quint, seed=3, beneficiaries={("FFS", "39"): 40_000})
    fit, cons, _, _ = fit_cell(build_design(df, quint), "total_cost")
    assert fit.converged
    assert cons[5].ci_low <= 0.85 - 1 <= cons[5].ci_high
    assert cons[1].ci_low <= 1.08 - 1 <= cons[1].ci_high


def test_single_stratum_equals_direct_fit():
    quint = toy_quintiles(("39",))
    df = people(quint, beneficiaries={("FFS", "39"): 3000})
    grid = stratified_run(df, {"bADI": quint}, outcomes=("total_cost",))
    (row,) = grid.rows
    design = build_design(df, quint)
    fit = fit_glm(design.X, design.response("total_cost"), "gamma_log", design.columns)
    cons = contrast(fit, design)
    assert row.q1_pct == cons[1].percent_change and row.q5_p == cons[5].p_value
    assert row.q1_effect == cons[1].marginal_effect and row.n == fit.n


def test_per_stratum_effects_and_grid_counts():
    quint = toy_quintiles(("39", "29"), n=300)
    effects = {("FFS", "39"): (1.2, 0.7), ("FFS", "29"): (1.05, 0.9),
               ("MA", "39"): (0.9, 1.1), ("MA", "29"): (1.0, 0.8)}
    frames = []
    for (program, state), (e1, e5) in effects.items():
        cfg = SynthConfig(seed=17, n_states=2, beneficiaries={(program, state): 6000})
        cfg.cost_beta = {**cfg.cost_beta, "q1": math.log(e1), "q5": math.log(e5)}
        frames.append(synth_beneficiaries(cfg, quint))
    df = pd.concat(frames, ignore_index=True)
    other = {g: 6 - q for g, q in quint.items()}
    grid = stratified_run(df, {"bADI": quint, "ADI": other})
    assert len(grid.rows) == 2 * 2 * 2 * 2 and not grid.skipped
    abbr = {"39": "OH", "29": "MO"}
    for (program, state), (e1, e5) in effects.items():
        fit = grid.fits[(program, abbr[state], "bADI", "total_cost")]
        for name, truth in (("q1", e1), ("q5", e5)):
            k = fit.columns.index(name)
            assert abs(fit.beta[k] - math.log(truth)) < 3 * fit.se[k]
    for row in grid.rows:
        assert row.q1_pct == row.q1_pct  # not NaN
        assert row.q1_significant == (row.q1_p < 0.05)


def test_small_strata_are_skipped():
    quint = toy_quintiles(("39", "29"))
    df = people(quint, beneficiaries={("FFS", "39"): 2000, ("MA", "29"): 40})
    grid = stratified_run(df, {"bADI": quint})
    assert len(grid.rows) == 2 and len(grid.skipped) == 2
    assert all(s.program == "MA" for s in grid.skipped)
    json.dumps(grid.to_json())
    buf = io.StringIO()
    grid.write_csv(buf)
    header = buf.getvalue().splitlines()[0].split(",")
    assert {"program", "state", "variant", "outcome", "q1_effect", "q1_p", "q5_effect", "q5_p", "n"} <= set(header)


def test_zero_costs_are_excluded_and_counted():
    quint = toy_quintiles(("39",))
    df = people(quint, beneficiaries={("FFS", "39"): 1500})
    df.loc[:9, "total_cost"] = 0.0
    _, _, used, excluded = fit_cell(build_design(df, quint), "total_cost")
    assert excluded == 10 and len(used.X) == 1490


def test_beneficiary_file_round_trip(tmp_path):
    quint = toy_quintiles(("39",))
    df = people(quint, beneficiaries={("FFS", "39"): 50})
    path = tmp_path / "b.csv"
    with open(path, "w") as fh:
        write_beneficiaries(df, fh)
    back = read_beneficiaries(path)
    assert list(back.columns) == list(BENEFICIARY_FIELDS)
    pd.testing.assert_frame_equal(back, df, check_dtype=False)
    empty = tmp_path / "empty.csv"
    empty.write_text(",".join(BENEFICIARY_FIELDS) + "\n")
    with pytest.raises(ValueError, match="empty.csv"):
        read_beneficiaries(empty)

import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate
from scipy.special import expit

from trialcea.errors import ConfigError, ValidationError
from trialcea.missingness import (
    QOL_VARS, RESOURCES, _RandomInterceptLogit, choose_imputation_count, classify_resources,
    fit_missingness_model, impute_baseline_cluster_means, profile_missingness,
)
from trialcea.outcomes import value_utilities
from trialcea.synth import Mechanism, SimConfig, apply_missingness, generate_trial
from trialcea.trial_data import CRF_RESOURCES


def frame_with_holes(n, holes, n_wards=10, seed=0):
    """Analysis-shaped frame with exactly ``holes[var]`` missing cells (count or
    list of row positions) in each named variable."""
    rng = np.random.default_rng(seed)
    df = pd.DataFrame({
        "patient_id": [f"p{i:04d}" for i in range(n)],
        "ward_id": [f"W{i % n_wards:02d}" for i in range(n)],
        "arm": [(i % n_wards) % 2 for i in range(n)],
        "age": rng.integers(75, 95, n).astype(float),
        "sex_male": rng.integers(0, 2, n).astype(float),
        "u_0": rng.uniform(0.2, 0.9, n),
        "specialty_elderly": 1.0, "baseline_readm_rate": 20.0, "pct_over_75": 70.0,
        "readm_days": rng.integers(0, 10, n).astype(float),
    })
    for v in QOL_VARS:
        df[v] = rng.uniform(0.2, 0.9, n)
    for r in CRF_RESOURCES:
        df[r] = rng.integers(0, 4, n).astype(float)
    for var, k in holes.items():
        col = "readm_days" if var == "hospitalisation" else var
        rows = rng.choice(n, k, replace=False) if np.isscalar(k) else k
        df.loc[rows, col] = np.nan
    return df


# ---------------------------------------------------------------- profiling

def test_follow_up_percentages_match_reported_table():
    df = frame_with_holes(468, {"u_10": 149, "u_30": 159, "u_90": 213})
    rep = profile_missingness(df)
    assert [round(rep.percent(v), 2) for v in QOL_VARS] == [31.84, 33.97, 45.51]


def test_by_arm_and_pattern_tables():
    df = frame_with_holes(20, {"u_10": [0], "u_30": [0, 1], "u_90": [0, 1, 2, 3]}, n_wards=2)
    rep = profile_missingness(df)
    pats = rep.patterns.set_index("pattern")
    assert pats.loc["...", "count"] == 1 and pats.loc["o..", "count"] == 1 and pats.loc["oo.", "count"] == 2
    assert pats["monotone"].all()
    byarm = rep.by_arm.set_index(["arm", "variable"])
    assert byarm.loc[("control", "u_90"), "missing"] == 2 and byarm.loc[("intervention", "u_90"), "missing"] == 2


def test_non_monotone_pattern_flagged():
    df = frame_with_holes(10, {"u_10": [4]})
    assert not profile_missingness(df).patterns.set_index("pattern").loc[".oo", "monotone"]


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 39), max_size=40), st.lists(st.integers(0, 39), max_size=40))
def test_missing_and_observed_partition_the_cohort(a, b):
    df = frame_with_holes(40, {"u_30": sorted(set(a)), "ae": sorted(set(b))})
    rep = profile_missingness(df)
    t = rep.table.set_index("variable")
    assert (t["missing"] <= t["total"]).all() and (t["total"] == 40).all()
    assert t.loc["u_30", "missing"] == len(set(a)) and t.loc["ae", "missing"] == len(set(b))
    ind = rep.indicators
    assert (ind["u_30"].sum() + (~ind["u_30"]).sum()) == 40


# ---------------------------------------------------------------- resource classes

def test_hospitalisation_imputable_and_outpatient_complete_case():
    # 2/468 readmission records incomplete; 284/468 outpatient counts missing
    df = frame_with_holes(468, {"hospitalisation": 2, "outpatient": 284})
    classes = classify_resources(profile_missingness(df))
    assert "hospitalisation" in classes["imputable"]
    assert "outpatient" in classes["complete_case_only"]
    assert classes["imputable"] | classes["complete_case_only"] == set(RESOURCES)
    assert not classes["imputable"] & classes["complete_case_only"]


def test_threshold_is_strict():
    df = frame_with_holes(100, {"ae": 60, "gp_surgery": 59})
    classes = classify_resources(profile_missingness(df))
    assert "ae" in classes["complete_case_only"] and "gp_surgery" in classes["imputable"]


def test_unknown_resource_name():
    with pytest.raises(ConfigError):
        classify_resources(profile_missingness(frame_with_holes(10, {})), resources=["ambulance"])


# ---------------------------------------------------------------- number of imputations

@pytest.mark.parametrize("pct, m", [(0, 5), (3.2, 5), (45.51, 46), (46, 46), (80, 50)])
def test_imputation_count_clamped(pct, m):
    rep = profile_missingness(frame_with_holes(10, {}))
    assert choose_imputation_count(rep, pct) == m


def test_imputation_count_from_incomplete_cases():
    df = frame_with_holes(468, {"u_10": list(range(149)), "u_30": list(range(159)), "u_90": list(range(213))})
    rep = profile_missingness(df)
    assert choose_imputation_count(rep, list(QOL_VARS)) == 46


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 100), st.floats(0, 100))
def test_imputation_count_monotone(a, b):
    rep = profile_missingness(frame_with_holes(10, {}))
    lo, hi = sorted((a, b))
    assert 5 <= choose_imputation_count(rep, lo) <= choose_imputation_count(rep, hi) <= 50


# ---------------------------------------------------------------- baseline imputation

def test_ward_mean_fill_and_flag():
    df = frame_with_holes(6, {}, n_wards=2)
    df["ward_id"] = ["A", "A", "A", "B", "B", "B"]
    df["u_0"] = [0.4, 0.6, np.nan, 0.1, 0.2, 0.3]
    out = impute_baseline_cluster_means(df).patients
    assert out.loc[2, "u_0"] == pytest.approx(0.5)
    assert out["bimp_u_0"].tolist() == [False, False, True, False, False, False]
    assert not out["bimp_baseline_readm_rate"].any()


def test_empty_ward_falls_back_to_overall_mean():
    df = frame_with_holes(6, {}, n_wards=2)
    df["ward_id"] = ["A", "A", "B", "B", "B", "B"]
    df["u_0"] = [np.nan, np.nan, 0.1, 0.2, 0.3, 0.6]
    out = impute_baseline_cluster_means(df).patients
    assert out.loc[[0, 1], "u_0"].tolist() == pytest.approx([0.3, 0.3])


def test_all_missing_baseline_is_an_error():
    df = frame_with_holes(4, {"u_0": [0, 1, 2, 3]})
    with pytest.raises(ValidationError):
        impute_baseline_cluster_means(df)


# ---------------------------------------------------------------- missingness model

def _cluster_data(seed, J=12, n=25, sigma=0.8):
    rng = np.random.default_rng(seed)
    codes = np.repeat(np.arange(J), n)
    x = rng.normal(size=J * n)
    X = np.column_stack([np.ones(J * n), x])
    y = (rng.random(J * n) < expit(-0.3 + 0.7 * x + sigma * rng.normal(size=J)[codes])).astype(float)
    return y, X, codes


def test_quadrature_likelihood_matches_direct_integration():
    y, X, codes = _cluster_data(1, J=3, n=8)
    model = _RandomInterceptLogit(y, X, codes)
    beta, sigma = np.array([-0.2, 0.5]), 0.9
    total = 0.0
    for j in range(3):
        yj, ej = y[codes == j], X[codes == j] @ beta

        def f(u):
            p = expit(ej + u)
            return np.prod(np.where(yj == 1, p, 1 - p)) * math.exp(-u * u / (2 * sigma ** 2)) / math.sqrt(2 * math.pi * sigma ** 2)

        total += math.log(integrate.quad(f, -12, 12, epsabs=1e-14, epsrel=1e-12)[0])
    assert -model.negloglik(np.append(beta, math.log(sigma))) == pytest.approx(total, rel=1e-9)


def _frame_from(y, X, codes, t=10):
    return pd.DataFrame({"ward_id": codes, "z": X[:, 1], f"u_{t}": np.where(y == 1, np.nan, 0.5)})


def test_zero_cluster_variance_matches_ordinary_logit():
    sm = pytest.importorskip("statsmodels.api")
    # identical covariate and outcome pattern in every ward: no between-ward variation
    rng = np.random.default_rng(3)
    x = rng.normal(size=20)
    y1 = (rng.random(20) < expit(0.4 * x)).astype(float)
    J = 10
    X = np.column_stack([np.ones(20 * J), np.tile(x, J)])
    y = np.tile(y1, J)
    codes = np.repeat(np.arange(J), 20)
    fit = fit_missingness_model(_frame_from(y, X, codes), 10, covariates=("z",))
    ref = sm.Logit(y, X).fit(disp=0)
    assert fit.sigma2_u < 1e-6
    np.testing.assert_allclose(fit.coef, ref.params, atol=1e-4)
    np.testing.assert_allclose(fit.se, ref.bse, rtol=1e-3)


def test_recovers_cluster_variance_sign_and_slope():
    y, X, codes = _cluster_data(5, J=40, n=40, sigma=1.0)
    fit = fit_missingness_model(_frame_from(y, X, codes, 30), 30, covariates=("z",))
    assert fit.coef[1] == pytest.approx(0.7, abs=3 * fit.se[1])
    assert 0.3 < fit.sigma2_u < 3.0
    assert fit.n == 1600 and fit.n_clusters == 40


def _valued(seed, mech):
    ds, _ = generate_trial(SimConfig(wards_per_arm=15, patients_per_ward=(30, 30), seed=seed))
    holed, _ = apply_missingness(ds, mech, seed=seed)
    return value_utilities(holed)


def test_mcar_slopes_near_zero():
    fit = fit_missingness_model(_valued(21, Mechanism("MCAR", 0.3)), 90)
    assert np.all(np.abs(fit.z[1:]) < 3.5)


def test_mar_baseline_dependence_recovered():
    # lower baseline utility makes follow-up data more likely to be missing
    fit = fit_missingness_model(_valued(22, Mechanism("MAR", 0.3, b_baseline=-4.0)), 90)
    k = fit.names.index("u_0")
    assert fit.coef[k] < 0 and fit.z[k] < -3


def test_unknown_timepoint():
    with pytest.raises(ValidationError):
        fit_missingness_model(frame_with_holes(10, {}), 45)

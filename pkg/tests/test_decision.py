import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings, strategies as st

from trialcea.config import AnalysisConfig, ImputationConfig
from trialcea.decision import (
    DOMINANT, DOMINATED, UNDEFINED, DecisionSummary, MnarScenario, apply_mnar_rescale, icer, nhb, nhb_variance, nmb,
    run_scenarios, scenario_rows, scenario_table,
)
from trialcea.errors import ValidationError
from trialcea.mice import ImputedSets
from trialcea.pipeline import analyse_imputed, dumps, impute, prepare
from trialcea.synth import Mechanism, SimConfig, apply_missingness, generate_trial

finite = st.floats(-1e6, 1e6, allow_nan=False)
positive = st.floats(1.0, 1e6)


# ---------------------------------------------------------------- metrics

@pytest.mark.parametrize("dc, de, expected", [
    (-268.78, 0.0057, DOMINANT),
    (100.0, -0.01, DOMINATED),
    (100.0, 0.0, UNDEFINED),
    (-5.0, 0.0, UNDEFINED),
    (0.0, 0.0, UNDEFINED),
    (300.0, 0.02, 15000.0),
    (-300.0, -0.02, 15000.0),
])
def test_icer_labels_and_ratios(dc, de, expected):
    out = icer(dc, de)
    assert out == (pytest.approx(expected) if isinstance(expected, float) else expected)


def test_icer_rejects_non_finite():
    with pytest.raises(ValidationError):
        icer(math.nan, 0.1)


def test_reported_net_health_benefit():
    assert nhb(-268.78, 0.0057, 15000) == pytest.approx(0.023619, abs=5e-7)
    assert nmb(-268.78, 0.0057, 15000) == pytest.approx(354.28, abs=1e-9)


def test_break_even_is_exactly_zero():
    assert nhb(300.0, 0.02, 15000.0) == 0.0
    assert nmb(300.0, 0.02, 15000.0) == 0.0


@pytest.mark.parametrize("lam", [0.0, -1.0, math.inf, math.nan])
def test_threshold_must_be_positive(lam):
    with pytest.raises(ValidationError):
        nhb(1.0, 1.0, lam)
    with pytest.raises(ValidationError):
        nmb(1.0, 1.0, lam)


@settings(max_examples=2000, deadline=None)
@given(finite, st.floats(-1.0, 1.0), positive)
def test_nmb_is_lambda_times_nhb(dc, de, lam):
    # relative to the operands, since the difference itself may cancel to zero
    scale = abs(lam * de) + abs(dc)
    assert abs(nmb(dc, de, lam) - lam * nhb(dc, de, lam)) <= 1e-12 * max(scale, 1e-300) * 4


@settings(max_examples=300, deadline=None)
@given(finite, st.floats(-1.0, 1.0), positive)
def test_icer_partition_agrees_with_nmb_sign(dc, de, lam):
    r = icer(dc, de)
    if r == DOMINANT:
        assert nmb(dc, de, lam) > 0
    elif r == DOMINATED:
        assert nmb(dc, de, lam) < 0
    elif r != UNDEFINED and de > 0:
        # north-east: cost-effective exactly when the ratio is below the threshold
        assert (nmb(dc, de, lam) > 0) == (r < lam) or math.isclose(r, lam, rel_tol=1e-9)


def test_nhb_variance_is_the_linear_combination_variance():
    rng = np.random.default_rng(0)
    cov = np.array([[4e4, 0.5], [0.5, 1e-4]])
    draws = rng.multivariate_normal([0, 0], cov, 400_000)
    lam = 20000.0
    mc = np.var(draws[:, 1] - draws[:, 0] / lam)
    assert nhb_variance(cov[0, 0], cov[1, 1], cov[0, 1], lam) == pytest.approx(mc, rel=0.01)


def test_decision_summary():
    d = DecisionSummary(-268.78, 0.0057, 15000.0, 0.89).to_dict()
    assert d["icer"] == DOMINANT and d["nhb"] == pytest.approx(0.023619, abs=5e-7) and d["prob_ce"] == 0.89


# ---------------------------------------------------------------- scenarios

def test_scenario_table():
    pairs = [(s.id, s.c_control, s.c_intervention) for s in scenario_table()]
    assert pairs == [(1, 1.0, 1.0), (2, 1.0, 0.95), (3, 0.95, 1.0), (4, 0.95, 0.95),
                     (5, 0.95, 0.90), (6, 0.90, 0.95), (7, 0.90, 0.90)]
    with pytest.raises(ValidationError):
        MnarScenario(8, 0.8, 1.0)


@pytest.fixture(scope="module")
def mnar_setup(unit_costs):
    ds, _ = generate_trial(SimConfig(wards_per_arm=6, patients_per_ward=(12, 12), seed=31))
    holed, _ = apply_missingness(ds, Mechanism("MAR", 0.3, hosp_p=0.02, resource_p=0.8), seed=31)
    settings_ = AnalysisConfig(seed=5, B=25, M=3, estimators=("lmm", "sur"))
    prep = prepare(holed, unit_costs, settings_, imputation=ImputationConfig(cycles=4))
    imputed = impute(prep)
    return prep, imputed


def test_rescale_touches_only_imputed_utilities(mnar_setup):
    prep, imputed = mnar_setup
    sc = MnarScenario(5, 0.95, 0.90)
    out = apply_mnar_rescale(imputed, sc)
    for before, after in zip(imputed.datasets, out.datasets):
        for v in ("u_10", "u_30", "u_90"):
            mask = imputed.mask[v].to_numpy()
            arm = before["arm"].to_numpy()
            np.testing.assert_array_equal(after[v].to_numpy()[~mask], before[v].to_numpy()[~mask])
            for a, f in ((0, 0.95), (1, 0.90)):
                sel = mask & (arm == a)
                np.testing.assert_array_equal(after[v].to_numpy()[sel], before[v].to_numpy()[sel] * f)
        untouched = [c for c in before.columns if c not in ("u_10", "u_30", "u_90")]
        assert before[untouched].equals(after[untouched])


def test_rescaling_an_imputed_half_utility():
    df = pd.DataFrame({"patient_id": ["a", "b"], "arm": [0, 1], "u_30": [0.5, 0.5], "hosp_cost": [10.0, 20.0]})
    mask = pd.DataFrame({"u_30": [True, False], "hosp_cost": [True, True]}, index=["a", "b"])
    imputed = ImputedSets([df], mask, ("u_30", "hosp_cost"), 0)
    out = apply_mnar_rescale(imputed, MnarScenario(6, 0.90, 0.95))
    assert out.datasets[0].loc[0, "u_30"] == pytest.approx(0.45)
    assert out.datasets[0].loc[1, "u_30"] == 0.5


def test_scenarios_share_costs_and_base_case(mnar_setup):
    prep, imputed = mnar_setup
    base = analyse_imputed(imputed, prep)
    results = run_scenarios(imputed, prep)
    first = results[0][1]
    assert dumps(first.to_dict()) == dumps(base.to_dict())
    assert np.array_equal(first.cloud.delta_c, base.cloud.delta_c)
    rows = scenario_rows(results)
    assert len({r["delta_c"] for r in rows}) == 1
    assert len({tuple(r["delta_c_ci"]) for r in rows}) == 1
    # QALY gain falls when only the intervention arm is rescaled downwards
    by_id = {r["id"]: r for r in rows}
    assert by_id[2]["delta_e"] < by_id[1]["delta_e"] < by_id[3]["delta_e"]


def test_no_missing_utilities_means_no_scenario_effect(unit_costs):
    ds, _ = generate_trial(SimConfig(wards_per_arm=5, patients_per_ward=(10, 10), seed=32))
    holed, _ = apply_missingness(ds, Mechanism("MCAR", 0.0, hosp_p=0.05, resource_p=0.8), seed=32)
    prep = prepare(holed, unit_costs, AnalysisConfig(seed=3, B=15, M=2, estimators=("lmm",)),
                   imputation=ImputationConfig(cycles=2))
    results = run_scenarios(impute(prep), prep)
    texts = {dumps({k: v for k, v in r.to_dict().items() if k != "scenario"}) for _, r in results}
    assert len(texts) == 1

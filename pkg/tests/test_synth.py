import numpy as np
import pandas as pd
import pytest
from scipy import stats

from trialcea.errors import ValidationError
from trialcea.outcomes import hospitalisation_column, illustrative_unit_costs, qaly_column, value_utilities
from trialcea.synth import (
    Mechanism, SimConfig, apply_missingness, expected_qaly_difference, generate_trial, solve_utility_effect,
    visit_weights, write_trial_csvs,
)
from trialcea.trial_data import FOLLOW_UP, index_col, load_merged


def test_same_seed_same_trial():
    a, _ = generate_trial(SimConfig(wards_per_arm=3, seed=4))
    b, _ = generate_trial(SimConfig(wards_per_arm=3, seed=4))
    c, _ = generate_trial(SimConfig(wards_per_arm=3, seed=5))
    pd.testing.assert_frame_equal(a.frame, b.frame)
    assert not a.frame["age"].equals(c.frame["age"])


def test_layout():
    ds, truth = generate_trial(SimConfig(wards_per_arm=4, patients_per_ward=(5, 9), seed=1))
    df = ds.frame
    sizes = df.groupby("ward_id").size()
    assert len(sizes) == 8 and sizes.between(5, 9).all()
    assert (df.groupby("ward_id")["arm"].nunique() == 1).all()
    assert df["patient_id"].is_unique and (df[[index_col(t) for t in (0, 10, 30, 90)]].fillna(0) <= 1).all().all()
    assert truth.delta_c == -250.0 and truth.delta_e == 0.006


def test_no_visit_after_death():
    ds, _ = generate_trial(SimConfig(wards_per_arm=10, p_death=0.3, seed=2))
    df = ds.frame
    for t in FOLLOW_UP:
        dead = df["death_day"] <= t
        assert df.loc[dead, index_col(t)].isna().all()


def test_effect_is_solved_exactly_under_the_ceiling():
    cfg = SimConfig(delta_e=0.01, utility_mean=0.8)
    eff = solve_utility_effect(cfg)
    assert expected_qaly_difference(cfg, eff) == pytest.approx(0.01, rel=1e-10)
    # the cap at full health means a bigger shift than the uncapped answer
    assert eff > 0.01 / visit_weights(cfg)[1:].sum()


def test_zero_effects():
    cfg = SimConfig(delta_c=0.0, delta_e=0.0)
    _, truth = generate_trial(cfg)
    assert truth.utility_effect == 0.0
    rate = truth.readm_rate_intervention
    uc = illustrative_unit_costs()
    assert rate == pytest.approx(cfg.readm_rate_control - 94.32 / (uc.admission_tariff + 6 * uc.day_tariff))


def test_large_trial_recovers_configured_truth():
    cfg = SimConfig(wards_per_arm=150, patients_per_ward=(30, 30), seed=3)
    ds, truth = generate_trial(cfg)
    df = value_utilities(ds).patients
    uc = illustrative_unit_costs()
    df["qaly"] = qaly_column(df)
    df["cost"] = hospitalisation_column(df, uc) + 94.32 * df["arm"]
    # ward-level means carry the cluster correlation into the standard error
    wm = df.groupby("ward_id").agg(arm=("arm", "first"), qaly=("qaly", "mean"), cost=("cost", "mean"))
    for col, target in (("qaly", truth.delta_e), ("cost", truth.delta_c)):
        a, b = wm.loc[wm["arm"] == 1, col], wm.loc[wm["arm"] == 0, col]
        se = np.sqrt(a.var() / len(a) + b.var() / len(b))
        assert abs(a.mean() - b.mean() - target) < 4 * se


def test_mcar_extremes():
    ds, _ = generate_trial(SimConfig(wards_per_arm=3, seed=6))
    none, deleted = apply_missingness(ds, Mechanism("MCAR", 0.0), seed=1)
    pd.testing.assert_frame_equal(none.frame, ds.frame)
    assert not deleted.any().any()
    every, _ = apply_missingness(ds, Mechanism("MCAR", 1.0), seed=1)
    for t in FOLLOW_UP:
        assert every.frame[index_col(t)].isna().all()
    assert every.frame[index_col(0)].notna().all()


def test_mcar_deletion_rate_is_binomial():
    ds, _ = generate_trial(SimConfig(wards_per_arm=20, p_death=0.0, seed=7))
    _, deleted = apply_missingness(ds, Mechanism("MCAR", 0.3), seed=7)
    col = deleted[index_col(90)]
    assert stats.binomtest(int(col.sum()), len(col), 0.3).pvalue > 1e-3


def test_mar_targets_low_baseline_utility():
    ds, _ = generate_trial(SimConfig(wards_per_arm=20, seed=8))
    _, deleted = apply_missingness(ds, Mechanism("MAR", 0.3, b_baseline=-3.0), seed=8)
    base = ds.frame[index_col(0)].to_numpy()
    hit = deleted[index_col(30)].to_numpy()
    assert base[hit].mean() < base[~hit].mean()


def test_mnar_targets_low_values_themselves():
    ds, _ = generate_trial(SimConfig(wards_per_arm=20, seed=9))
    mech = Mechanism("MNAR", 0.3, b_baseline=0.0, b_value=-4.0)
    _, deleted = apply_missingness(ds, mech, seed=9)
    v = ds.frame[index_col(90)].to_numpy()
    hit = deleted[index_col(90)].to_numpy()
    assert np.nanmean(v[hit]) < np.nanmean(v[~hit])


def test_covariate_distributions():
    cfg = SimConfig(wards_per_arm=40, seed=10)
    df = generate_trial(cfg)[0].frame
    assert stats.kstest(df["age"], "norm", args=(cfg.age_mean, cfg.age_sd)).pvalue > 1e-3
    assert stats.binomtest(int(df["sex_male"].sum()), len(df), cfg.p_male).pvalue > 1e-3
    wards = df.groupby("ward_id")["pct_over_75"].first()
    assert stats.kstest(wards, "norm", args=(cfg.over75_mean, cfg.over75_sd)).pvalue > 1e-3


def test_csv_round_trip(tmp_path):
    ds, _ = generate_trial(SimConfig(wards_per_arm=3, p_death=0.2, seed=12))
    holed, _ = apply_missingness(ds, Mechanism("MAR", 0.3, hosp_p=0.1, resource_p=0.5), seed=12)
    write_trial_csvs(holed, tmp_path)
    back = load_merged(tmp_path / "routine.csv", tmp_path / "crf.csv", tmp_path / "wards.csv").frame
    src = holed.frame.set_index("patient_id").sort_index()
    back = back.set_index("patient_id").sort_index()
    cols = ["arm", "age", "death_day", "n_readm", "readm_days", "ae", *[index_col(t) for t in (0, 10, 30, 90)]]
    pd.testing.assert_frame_equal(src[cols], back[cols], check_dtype=False)


def test_config_validation():
    with pytest.raises(ValidationError):
        SimConfig(wards_per_arm=1)
    with pytest.raises(ValidationError):
        SimConfig.from_dict({"wards": 3})
    with pytest.raises(ValidationError):
        Mechanism("MCAR", 1.5)
    with pytest.raises(ValidationError):
        Mechanism("NMAR", 0.1)
    cfg = SimConfig(patients_per_ward=(3, 4))
    assert SimConfig.from_dict(cfg.to_dict()) == cfg

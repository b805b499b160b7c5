import math

import numpy as np
import pandas as pd
import pytest
from conftest import crf_rows, routine_rows, ward_rows, write_csv
from hypothesis import given, settings, strategies as st

from trialcea.errors import IntegrityError, MergeError, SchemaError, ValidationError
from trialcea.trial_data import (
    baseline_summary, load_merged, merge_datasets, parse_crf_csv, parse_routine_csv, parse_wards_csv,
    read_merged_csv, two_proportion_p, welch_p, write_merged_csv,
)


def test_routine_derives_readmission_totals(trial_files):
    r = parse_routine_csv(trial_files["routine"]).frame.set_index("patient_id")
    assert r.loc["p00", "n_readm"] == 1 and r.loc["p00", "readm_days"] == 4
    assert r.loc["p01", "n_readm"] == 0 and r.loc["p01", "readm_days"] == 0


def test_unknown_readmission_length_makes_days_missing(tmp_path):
    rows = routine_rows()
    rows[0]["readm_len_1"] = ""
    r = parse_routine_csv(write_csv(tmp_path / "r.csv", rows)).frame
    assert r.loc[0, "n_readm"] == 1 and math.isnan(r.loc[0, "readm_days"])


def test_duplicate_patient_is_rejected(tmp_path):
    rows = routine_rows()
    rows[1]["patient_id"] = rows[0]["patient_id"]
    with pytest.raises(IntegrityError):
        parse_routine_csv(write_csv(tmp_path / "r.csv", rows))


def test_missing_column_is_a_schema_error(tmp_path):
    rows = [{k: v for k, v in r.items() if k != "age"} for r in routine_rows()]
    with pytest.raises(SchemaError):
        parse_routine_csv(write_csv(tmp_path / "r.csv", rows))


def test_lenient_mode_skips_bad_rows(tmp_path):
    rows = routine_rows()
    rows[2]["arm"] = 7
    path = write_csv(tmp_path / "r.csv", rows)
    with pytest.raises(ValidationError):
        parse_routine_csv(path, strict=True)
    ds = parse_routine_csv(path, strict=False)
    assert len(ds.frame) == len(rows) - 1
    assert len(ds.issues) == 1 and ds.issues[0].line == 4


def test_crf_needs_profiles_or_index(tmp_path):
    rows = [{k: v for k, v in r.items() if k != "eq5d_30_index"} for r in crf_rows()]
    with pytest.raises(SchemaError):
        parse_crf_csv(write_csv(tmp_path / "c.csv", rows))


def test_missing_file_reports_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="file not found"):
        parse_wards_csv(tmp_path / "wards.csv")


def test_merge_keeps_only_linked_patients(tmp_path):
    routine = routine_rows(8)
    crf = crf_rows(8)[2:] + [{**crf_rows(1)[0], "patient_id": "zz"}]
    m = load_merged(write_csv(tmp_path / "r.csv", routine), write_csv(tmp_path / "c.csv", crf),
                    write_csv(tmp_path / "w.csv", ward_rows()))
    assert m.n == 6
    assert m.report.routine_only == ("p00", "p01") and m.report.crf_only == ("zz",)
    assert {"specialty_elderly", "baseline_readm_rate", "pct_over_75"} <= set(m.frame.columns)


def test_unknown_ward_is_an_integrity_error(trial_files, tmp_path):
    wards = write_csv(tmp_path / "w2.csv", ward_rows(("A", "B", "C")))
    with pytest.raises(IntegrityError, match="D"):
        load_merged(trial_files["routine"], trial_files["crf"], wards)


def test_no_overlap_is_a_merge_error(trial_files, tmp_path):
    crf = [{**r, "patient_id": "x" + r["patient_id"]} for r in crf_rows()]
    with pytest.raises(MergeError):
        load_merged(trial_files["routine"], write_csv(tmp_path / "c.csv", crf), trial_files["wards"])


def test_merge_is_idempotent(trial_files):
    r, c, w = (parse_routine_csv(trial_files["routine"]), parse_crf_csv(trial_files["crf"]),
               parse_wards_csv(trial_files["wards"]))
    once = merge_datasets(r, c, w)
    twice = merge_datasets(once, c, w)
    pd.testing.assert_frame_equal(once.frame, twice.frame)


def test_cohort_sizes_mirror_sample_size_table(tmp_path):
    # 650 routine, 622 CRF, 468 linked; 13 linked patients died within 30 days
    # without readmission, so the primary cohort has 455 and the economic
    # evaluation cohort (decedents kept) 468.
    rng = np.random.default_rng(0)
    wards = [f"W{j:02d}" for j in range(35)]
    routine, crf = [], []
    for i in range(650):
        w = wards[i % 35]
        died = i < 13
        routine.append({"patient_id": f"R{i:04d}", "ward_id": w, "arm": (i % 35) % 2, "age": 83,
                        "sex_male": i % 2, "death_day": int(rng.integers(1, 31)) if died else "",
                        "index_stay_days": 8, "readm_start_1": "", "readm_len_1": ""})
    for i in range(622):
        pid = f"R{i:04d}" if i < 468 else f"C{i:04d}"
        crf.append({**crf_rows(1)[0], "patient_id": pid})
    paths = (write_csv(tmp_path / "r.csv", routine), write_csv(tmp_path / "c.csv", crf),
             write_csv(tmp_path / "w.csv", ward_rows(wards)))
    full = load_merged(*paths)
    primary = load_merged(*paths, include_decedents=False)
    assert (full.report.n_routine, full.report.n_crf, full.report.n_merged) == (650, 622, 468)
    assert primary.n == 455 and len(primary.report.dropped_decedents) == 13


def test_merged_csv_round_trip(small_trial, tmp_path):
    ds, _, _ = small_trial
    write_merged_csv(ds, tmp_path / "m.csv")
    back = read_merged_csv(tmp_path / "m.csv")
    pd.testing.assert_frame_equal(ds.frame.reset_index(drop=True), back.frame, check_dtype=False)


def test_welch_matches_scipy():
    from scipy import stats
    a, b = [1.0, 2.0, 4.0, 7.0], [2.0, 2.5, 3.0]
    assert welch_p(a, b) == pytest.approx(stats.ttest_ind(a, b, equal_var=False).pvalue, rel=1e-12)


def test_two_proportion_p_by_hand():
    # pooled z test: 30/100 vs 45/100
    p = 75 / 200
    z = (0.30 - 0.45) / math.sqrt(p * (1 - p) * (2 / 100))
    from scipy import stats
    assert two_proportion_p([1] * 30 + [0] * 70, [1] * 45 + [0] * 55) == pytest.approx(2 * stats.norm.sf(abs(z)))


def test_baseline_summary_covers_both_arms(small_trial):
    ds, _, _ = small_trial
    tab = baseline_summary(ds)
    row = tab.set_index("column").loc["age"]
    assert row["intervention_n"] + row["control_n"] == row["total_n"] == ds.n
    assert 0 <= row["p_value"] <= 1


@settings(max_examples=25, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 89), st.integers(0, 30)), max_size=4))
def test_readmission_days_sum_lengths(tmp_path_factory, stays):
    row = {"patient_id": "a", "ward_id": "A", "arm": 1, "age": 80, "sex_male": 0, "death_day": "",
           "index_stay_days": 5}
    for k in range(4):
        s = stays[k] if k < len(stays) else ("", "")
        row[f"readm_start_{k + 1}"], row[f"readm_len_{k + 1}"] = s
    path = write_csv(tmp_path_factory.mktemp("r") / "r.csv", [row])
    r = parse_routine_csv(path).frame.iloc[0]
    assert r["n_readm"] == len(stays)
    assert r["readm_days"] == sum(length for _, length in stays)

import math

import numpy as np
import pandas as pd
import pytest

from trialcea.outcomes import illustrative_unit_costs
from trialcea.synth import Mechanism, SimConfig, apply_missingness, generate_trial

ACCEPTANCE = {}


def record_acceptance(number, name, passed, detail=""):
    ACCEPTANCE[number] = (name, passed, detail)


@pytest.fixture(scope="session")
def unit_costs():
    return illustrative_unit_costs()


@pytest.fixture(scope="session")
def small_trial():
    """6 wards per arm, 12 patients each, MAR holes in follow-up utilities."""
    ds, truth = generate_trial(SimConfig(wards_per_arm=6, patients_per_ward=(12, 12), seed=11))
    holed, deleted = apply_missingness(ds, Mechanism("MAR", 0.3, baseline_p=0.03, hosp_p=0.01, resource_p=0.7),
                                       seed=11)
    return holed, truth, deleted


def write_csv(path, rows):
    pd.DataFrame(rows).to_csv(path, index=False)
    return path


def routine_rows(n=6, wards=("A", "B", "C", "D")):
    rows = []
    for i in range(n):
        rows.append({
            "patient_id": f"p{i:02d}", "ward_id": wards[i % len(wards)], "arm": (i % len(wards)) % 2,
            "age": 80 + i, "sex_male": i % 2, "death_day": "", "index_stay_days": 7,
            "readm_start_1": 20 if i % 3 == 0 else "", "readm_len_1": 4 if i % 3 == 0 else "",
        })
    return rows


def crf_rows(n=6):
    from trialcea.trial_data import CRF_RESOURCES, TIMEPOINTS, index_col
    rows = []
    for i in range(n):
        r = {"patient_id": f"p{i:02d}"}
        for t in TIMEPOINTS:
            r[index_col(t)] = round(0.4 + 0.01 * i + 0.001 * t, 4)
        for res in CRF_RESOURCES:
            r[res] = i % 3
        rows.append(r)
    return rows


def ward_rows(wards=("A", "B", "C", "D")):
    return [{"ward_id": w, "specialty_elderly": j % 2, "baseline_readm_rate_pct": 18 + j, "pct_over_75": 60 + j}
            for j, w in enumerate(wards)]


@pytest.fixture
def trial_files(tmp_path):
    return {
        "routine": write_csv(tmp_path / "routine.csv", routine_rows()),
        "crf": write_csv(tmp_path / "crf.csv", crf_rows()),
        "wards": write_csv(tmp_path / "wards.csv", ward_rows()),
    }


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        name, passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {k}. {name}" + (f"  ({detail})" if detail else ""))


def rel_close(a, b, rtol):
    return abs(a - b) <= rtol * max(abs(a), abs(b), np.finfo(float).tiny)


def finite(x):
    return all(math.isfinite(v) for v in np.ravel(x))

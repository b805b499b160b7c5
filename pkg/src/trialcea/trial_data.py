"""Parsing of the routine / CRF / ward extracts and construction of the merged
analysis dataset.

All three inputs are plain CSV with a header row; a blank cell means missing.
Blank cells are kept as NaN all the way through, never coerced to zero.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import stats

from .errors import IntegrityError, MergeError, SchemaError, ValidationError

log = logging.getLogger(__name__)

TIMEPOINTS = (0, 10, 30, 90)
TP_LABELS = {0: "base", 10: "10", 30: "30", 90: "90"}
DIMS = ("mo", "sc", "ua", "pd", "ad")
CRF_RESOURCES = (
    "outpatient", "daycase", "ae", "gp_surgery", "gp_home", "gp_phone",
    "nurse_surgery", "nurse_home", "nurse_phone", "therapist", "homecare", "socialworker",
)
ROUTINE_REQUIRED = ("patient_id", "ward_id", "arm", "age", "sex_male", "death_day", "index_stay_days")
WARD_COLUMNS = ("ward_id", "specialty_elderly", "baseline_readm_rate_pct", "pct_over_75")
# ward covariate names as carried on each patient row
WARD_COVARIATES = ("specialty_elderly", "baseline_readm_rate", "pct_over_75")
FOLLOW_UP = (10, 30, 90)
HORIZON = 90


def utility_col(t):
    return f"u_{t}"


def dim_col(t, dim):
    return f"eq5d_{TP_LABELS[t]}_{dim}"


def index_col(t):
    return f"eq5d_{TP_LABELS[t]}_index"


@dataclass(frozen=True)
class ParseIssue:
    line: int
    message: str


@dataclass
class RoutineDataset:
    frame: pd.DataFrame
    issues: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame)


@dataclass
class CrfDataset:
    frame: pd.DataFrame
    issues: list = field(default_factory=list)

    def __len__(self):
        return len(self.frame)


@dataclass(frozen=True)
class JoinReport:
    n_routine: int
    n_crf: int
    n_merged: int
    n_wards: int
    routine_only: tuple
    crf_only: tuple
    dropped_decedents: tuple = ()

    def to_dict(self):
        return {
            "n_routine": self.n_routine,
            "n_crf": self.n_crf,
            "n_merged": self.n_merged,
            "n_wards": self.n_wards,
            "routine_only": list(self.routine_only),
            "crf_only": list(self.crf_only),
            "dropped_decedents": list(self.dropped_decedents),
        }


@dataclass(frozen=True)
class MergedDataset:
    """One row per patient (routine + CRF + ward covariates), sorted by id."""

    patients: pd.DataFrame
    wards: pd.DataFrame
    report: JoinReport | None = None
    timepoints: tuple = TIMEPOINTS

    @property
    def frame(self):
        return self.patients

    @property
    def n(self):
        return len(self.patients)

    def arm_sizes(self):
        return self.patients.groupby("arm").size().to_dict()


def _read_raw(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    raw = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    raw.columns = [c.strip() for c in raw.columns]
    return raw


def _num(text, line, name, *, integer=False, lo=None, hi=None, allow_blank=True):
    text = text.strip()
    if text == "":
        if allow_blank:
            return math.nan
        raise ValidationError(f"line {line}: {name} is required")
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(f"line {line}: {name}={text!r} is not numeric") from None
    if not math.isfinite(value):
        raise ValidationError(f"line {line}: {name} must be finite")
    if integer and value != int(value):
        raise ValidationError(f"line {line}: {name}={text!r} is not an integer")
    if lo is not None and value < lo:
        raise ValidationError(f"line {line}: {name}={text} below {lo}")
    if hi is not None and value > hi:
        raise ValidationError(f"line {line}: {name}={text} above {hi}")
    return value


def _check_unique(ids, source):
    dup = ids[ids.duplicated()]
    if len(dup):
        raise IntegrityError(f"{source}: duplicate patient_id {dup.iloc[0]!r}")


def _collect(rows, issues, strict, parse_row, raw):
    for i, rec in enumerate(raw.to_dict("records")):
        line = i + 2
        try:
            rows.append(parse_row(rec, line))
        except ValidationError as exc:
            if strict:
                raise
            log.warning("skipping row: %s", exc)
            issues.append(ParseIssue(line, str(exc)))


def parse_routine_csv(path, strict=True) -> RoutineDataset:
    raw = _read_raw(path)
    missing = [c for c in ROUTINE_REQUIRED if c not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    k_start = sorted(int(m.group(1)) for c in raw.columns if (m := re.fullmatch(r"readm_start_(\d+)", c)))
    k_len = sorted(int(m.group(1)) for c in raw.columns if (m := re.fullmatch(r"readm_len_(\d+)", c)))
    if k_start != k_len or k_start != list(range(1, len(k_start) + 1)):
        raise SchemaError(f"{path}: readm_start_i / readm_len_i columns must pair up as 1..k")
    _check_unique(raw["patient_id"].str.strip(), str(path))

    def parse_row(rec, line):
        pid = rec["patient_id"].strip()
        if not pid:
            raise ValidationError(f"line {line}: blank patient_id")
        arm = _num(rec["arm"], line, "arm", integer=True, lo=0, hi=1, allow_blank=False)
        out = {
            "patient_id": pid,
            "ward_id": rec["ward_id"].strip(),
            "arm": int(arm),
            "age": _num(rec["age"], line, "age", lo=0),
            "sex_male": _num(rec["sex_male"], line, "sex_male", integer=True, lo=0, hi=1),
            "death_day": _num(rec["death_day"], line, "death_day", integer=True, lo=0, hi=HORIZON),
            "index_stay_days": _num(rec["index_stay_days"], line, "index_stay_days", lo=0),
        }
        if not out["ward_id"]:
            raise ValidationError(f"line {line}: blank ward_id")
        n_readm, days = 0, 0.0
        for k in k_start:
            start = _num(rec[f"readm_start_{k}"], line, f"readm_start_{k}", lo=0, hi=HORIZON)
            length = _num(rec[f"readm_len_{k}"], line, f"readm_len_{k}", lo=0)
            if math.isnan(start) and not math.isnan(length):
                raise ValidationError(f"line {line}: readm_len_{k} given without readm_start_{k}")
            out[f"readm_start_{k}"] = start
            out[f"readm_len_{k}"] = length
            if not math.isnan(start):
                n_readm += 1
                days += length  # nan propagates: unknown length => unknown days
        out["n_readm"] = n_readm
        out["readm_days"] = days
        return out

    rows, issues = [], []
    _collect(rows, issues, strict, parse_row, raw)
    frame = pd.DataFrame(rows)
    if frame.empty:
        frame = pd.DataFrame(columns=list(ROUTINE_REQUIRED) + ["n_readm", "readm_days"])
    frame["n_readm"] = frame["n_readm"].astype(int)
    return RoutineDataset(frame.sort_values("patient_id", kind="stable").reset_index(drop=True), issues)


def parse_crf_csv(path, strict=True) -> CrfDataset:
    raw = _read_raw(path)
    if "patient_id" not in raw.columns:
        raise SchemaError(f"{path}: missing required column 'patient_id'")
    for t in TIMEPOINTS:
        dims_present = [dim_col(t, d) in raw.columns for d in DIMS]
        if not all(dims_present) and index_col(t) not in raw.columns:
            raise SchemaError(f"{path}: timepoint {TP_LABELS[t]} needs all eq5d dimension columns or {index_col(t)}")
        if any(dims_present) and not all(dims_present):
            raise SchemaError(f"{path}: incomplete eq5d dimension columns for timepoint {TP_LABELS[t]}")
    absent = [r for r in CRF_RESOURCES if r not in raw.columns]
    if absent:
        raise SchemaError(f"{path}: missing resource column(s) {absent}")
    _check_unique(raw["patient_id"].str.strip(), str(path))

    def parse_row(rec, line):
        pid = rec["patient_id"].strip()
        if not pid:
            raise ValidationError(f"line {line}: blank patient_id")
        out = {"patient_id": pid}
        for t in TIMEPOINTS:
            for d in DIMS:
                c = dim_col(t, d)
                out[c] = _num(rec[c], line, c, integer=True, lo=1, hi=5) if c in rec else math.nan
            c = index_col(t)
            out[c] = _num(rec[c], line, c, hi=1.0) if c in rec else math.nan
        for r in CRF_RESOURCES:
            out[r] = _num(rec[r], line, r, lo=0)
        return out

    rows, issues = [], []
    _collect(rows, issues, strict, parse_row, raw)
    frame = pd.DataFrame(rows, columns=["patient_id"]
                         + [dim_col(t, d) for t in TIMEPOINTS for d in DIMS]
                         + [index_col(t) for t in TIMEPOINTS] + list(CRF_RESOURCES))
    return CrfDataset(frame.sort_values("patient_id", kind="stable").reset_index(drop=True), issues)


def parse_wards_csv(path) -> pd.DataFrame:
    raw = _read_raw(path)
    missing = [c for c in WARD_COLUMNS if c not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    rows = []
    for i, rec in enumerate(raw.to_dict("records")):
        line = i + 2
        rows.append({
            "ward_id": rec["ward_id"].strip(),
            "specialty_elderly": _num(rec["specialty_elderly"], line, "specialty_elderly", integer=True, lo=0, hi=1),
            "baseline_readm_rate": _num(rec["baseline_readm_rate_pct"], line, "baseline_readm_rate_pct", lo=0, hi=100),
            "pct_over_75": _num(rec["pct_over_75"], line, "pct_over_75", lo=0, hi=100),
        })
    wards = pd.DataFrame(rows, columns=["ward_id", *WARD_COVARIATES])
    dup = wards["ward_id"][wards["ward_id"].duplicated()]
    if len(dup):
        raise IntegrityError(f"{path}: duplicate ward_id {dup.iloc[0]!r}")
    return wards.sort_values("ward_id", kind="stable").reset_index(drop=True)


def _frame(obj):
    return obj.frame if hasattr(obj, "frame") else obj


def merge_datasets(routine, crf, wards, include_decedents=True) -> MergedDataset:
    """Inner join of routine and CRF records on patient_id, then attach ward
    covariates.  Columns present in both sources are taken from the routine side.

    ``include_decedents=False`` drops patients who died within 30 days without
    any readmission (the primary clinical cohort); by default they are kept.
    """
    r, c = _frame(routine), _frame(crf)
    wards = wards.wards if isinstance(wards, MergedDataset) else wards
    r_ids, c_ids = set(r["patient_id"]), set(c["patient_id"])
    common = r_ids & c_ids
    if not common:
        raise MergeError("routine and CRF datasets share no patient_id")

    c_extra = [col for col in c.columns if col not in r.columns]
    merged = r.merge(c[["patient_id", *c_extra]], on="patient_id", how="inner", validate="one_to_one")
    merged = merged.drop(columns=[w for w in WARD_COVARIATES if w in merged.columns])

    unknown = sorted(set(merged["ward_id"]) - set(wards["ward_id"]))
    if unknown:
        raise IntegrityError(f"ward_id {unknown[0]!r} not found in ward table")
    merged = merged.merge(wards, on="ward_id", how="left", validate="many_to_one")

    dropped = ()
    if not include_decedents:
        mask = (merged["death_day"] <= 30) & (merged["n_readm"] == 0)
        dropped = tuple(sorted(merged.loc[mask, "patient_id"]))
        merged = merged.loc[~mask]
    merged = merged.sort_values("patient_id", kind="stable").reset_index(drop=True)
    if merged["arm"].nunique() < 2:
        raise MergeError("merged dataset must contain both arms")

    used_wards = wards[wards["ward_id"].isin(merged["ward_id"])].reset_index(drop=True)
    report = JoinReport(
        n_routine=len(r), n_crf=len(c), n_merged=len(merged), n_wards=len(used_wards),
        routine_only=tuple(sorted(r_ids - c_ids)), crf_only=tuple(sorted(c_ids - r_ids)),
        dropped_decedents=dropped,
    )
    log.info("merged %d patients in %d wards (%d routine-only, %d crf-only)",
             report.n_merged, report.n_wards, len(report.routine_only), len(report.crf_only))
    return MergedDataset(merged, used_wards, report)


def load_merged(routine_path, crf_path, wards_path, strict=True, include_decedents=True):
    return merge_datasets(parse_routine_csv(routine_path, strict), parse_crf_csv(crf_path, strict),
                          parse_wards_csv(wards_path), include_decedents=include_decedents)


def write_merged_csv(merged, path):
    merged.patients.to_csv(path, index=False)


def read_merged_csv(path, wards=None):
    frame = pd.read_csv(path, dtype={"patient_id": str, "ward_id": str}, float_precision="round_trip")
    if wards is None:
        wards = (frame[["ward_id", *WARD_COVARIATES]].drop_duplicates("ward_id")
                 .sort_values("ward_id").reset_index(drop=True))
    return MergedDataset(frame, wards)


# ---------------------------------------------------------------- baseline table

BASELINE_VARIABLES = (
    # (label, column, binary)
    ("Age", "age", False),
    ("Dummy sex, 1=Male, %", "sex_male", True),
    ("EQ-5D at baseline", "u_0", False),
    ("Ward: baseline readmission rate, %", "baseline_readm_rate", False),
    ("Ward: patients over 75 yo, %", "pct_over_75", False),
    ("Ward: Dummy specialty, 1=Eldery & interm. care, %", "specialty_elderly", True),
)


def welch_p(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        return None
    va, vb = a.var(ddof=1), b.var(ddof=1)
    diff = a.mean() - b.mean()
    if va == 0 and vb == 0:
        return 1.0 if diff == 0 else 0.0
    return float(stats.ttest_ind(a, b, equal_var=False).pvalue)


def two_proportion_p(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if len(a) < 2 or len(b) < 2:
        return None
    p1, p2 = a.mean(), b.mean()
    pooled = (a.sum() + b.sum()) / (len(a) + len(b))
    se = math.sqrt(pooled * (1 - pooled) * (1 / len(a) + 1 / len(b)))
    if se == 0:
        return 1.0 if p1 == p2 else 0.0
    z = (p1 - p2) / se
    return float(2 * stats.norm.sf(abs(z)))


def baseline_summary(merged) -> pd.DataFrame:
    """Per-arm and total mean (SD) with two-sample p-values.

    Binary variables are shown as percent with the SD of the 0/1 indicator
    scaled by 100.  Ward variables are summarised over patients.
    """
    df = _frame(merged)
    if df.empty:
        raise ValidationError("baseline summary needs a non-empty dataset")
    rows = []
    for label, col, binary in BASELINE_VARIABLES:
        if col not in df.columns:
            continue
        scale = 100.0 if binary else 1.0
        vals = {
            "intervention": df.loc[df["arm"] == 1, col].dropna().to_numpy(float),
            "control": df.loc[df["arm"] == 0, col].dropna().to_numpy(float),
            "total": df[col].dropna().to_numpy(float),
        }
        row = {"variable": label, "column": col, "binary": binary}
        for k, v in vals.items():
            row[f"{k}_n"] = len(v)
            row[f"{k}_mean"] = scale * v.mean() if len(v) else math.nan
            row[f"{k}_sd"] = scale * v.std(ddof=1) if len(v) > 1 else math.nan
        test = two_proportion_p if binary else welch_p
        row["p_value"] = test(vals["intervention"], vals["control"])
        rows.append(row)
    return pd.DataFrame(rows)

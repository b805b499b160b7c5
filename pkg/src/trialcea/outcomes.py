"""Outcome and cost valuation: EQ-5D index lookup, area-under-curve QALYs,
intervention / hospitalisation / resource costs (GBP, undiscounted)."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ConfigError, ValidationError, ValueSetError
from .trial_data import (
    CRF_RESOURCES, DIMS, FOLLOW_UP, TIMEPOINTS, MergedDataset, dim_col, index_col, utility_col,
)

DAYS_PER_YEAR = 365.0
N_PROFILES = 5 ** 5


# ---------------------------------------------------------------- value set

class ValueSet:
    """Total lookup from 5-level EQ-5D profiles to index utilities."""

    def __init__(self, table, source="<memory>"):
        self.source = source
        self._values = np.full((5, 5, 5, 5, 5), np.nan)
        for profile, value in table.items():
            self._values[tuple(np.asarray(profile) - 1)] = value
        if np.isnan(self._values).any():
            raise ValueSetError(f"{source}: value set must cover all {N_PROFILES} profiles")
        if self._values[0, 0, 0, 0, 0] != 1.0 or self._values.max() > 1.0:
            raise ValueSetError(f"{source}: full health (1,1,1,1,1) must map to the maximum value 1.0")

    @classmethod
    def from_csv(cls, path):
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"file not found: {path}")
        df = pd.read_csv(path)
        missing = [c for c in (*DIMS, "utility") if c not in df.columns]
        if missing:
            raise ValueSetError(f"{path}: missing column(s) {missing}")
        levels = df[list(DIMS)].to_numpy()
        if ((levels < 1) | (levels > 5)).any():
            raise ValueSetError(f"{path}: dimension levels must lie in 1..5")
        if len(df) != N_PROFILES or df.duplicated(list(DIMS)).any():
            raise ValueSetError(f"{path}: expected {N_PROFILES} distinct profiles, found {len(df)} rows")
        table = {tuple(int(x) for x in row): u for row, u in zip(levels, df["utility"])}
        return cls(table, source=str(path))

    def lookup(self, profile):
        return map_profile(profile, self)

    def lookup_many(self, levels):
        """Vectorised lookup; rows with any NaN level give NaN."""
        levels = np.asarray(levels, float)
        out = np.full(len(levels), np.nan)
        ok = ~np.isnan(levels).any(axis=1)
        idx = levels[ok].astype(int) - 1
        if ((idx < 0) | (idx > 4)).any():
            raise ValidationError("EQ-5D levels must lie in 1..5")
        out[ok] = self._values[tuple(idx.T)]
        return out

    def to_frame(self):
        rows = [(*p, self._values[tuple(np.asarray(p) - 1)]) for p in itertools.product(range(1, 6), repeat=5)]
        return pd.DataFrame(rows, columns=[*DIMS, "utility"])


def map_profile(profile, valueset: ValueSet) -> float:
    profile = tuple(profile)
    if len(profile) != 5 or any(int(x) != x or not 1 <= x <= 5 for x in profile):
        raise ValidationError(f"invalid EQ-5D-5L profile {profile}")
    return float(valueset._values[tuple(int(x) - 1 for x in profile)])


# Dolan (1997) UK 3L TTO decrements, by dimension and 3L level 2/3.
_TTO_3L = {"mo": (0.069, 0.314), "sc": (0.104, 0.214), "ua": (0.036, 0.094),
           "pd": (0.123, 0.386), "ad": (0.071, 0.236)}
_TTO_CONSTANT, _TTO_N3 = 0.081, 0.269


def illustrative_valueset_table():
    """Placeholder 5L value set: each 5L level is placed on the 3L scale
    (1, 1.5, 2, 2.5, 3) and the 3L decrement is interpolated linearly.

    This is NOT the published 5L->3L mapping; replace it with a licensed
    value-set file for any real analysis.
    """
    table = {}
    for profile in itertools.product(range(1, 6), repeat=5):
        if profile == (1, 1, 1, 1, 1):
            table[profile] = 1.0
            continue
        dec = _TTO_CONSTANT
        for dim, level in zip(DIMS, profile):
            pos = 1 + (level - 1) / 2
            d2, d3 = _TTO_3L[dim]
            dec += d2 * (pos - 1) if pos <= 2 else d2 + (d3 - d2) * (pos - 2)
        if 5 in profile:
            dec += _TTO_N3
        table[profile] = round(1.0 - dec, 6)
    return table


def load_valueset(path=None) -> ValueSet:
    if path:
        return ValueSet.from_csv(path)
    with resources.as_file(resources.files("trialcea.data") / "valueset_illustrative.csv") as p:
        return ValueSet.from_csv(p)


def value_utilities(merged: MergedDataset, valueset: ValueSet | None = None) -> MergedDataset:
    """Attach u_0..u_90.  An explicit index cell wins over a mapped profile; a
    partially answered profile is missing.  Follow-up utilities on or after the
    day of death are structural zeros, not missing values."""
    df = merged.patients.copy()
    for t in TIMEPOINTS:
        u = df[index_col(t)].to_numpy(float) if index_col(t) in df else np.full(len(df), np.nan)
        dcols = [dim_col(t, d) for d in DIMS]
        if valueset is not None and all(c in df for c in dcols):
            mapped = valueset.lookup_many(df[dcols].to_numpy(float))
            u = np.where(np.isnan(u), mapped, u)
        if t > 0:
            dead = df["death_day"].to_numpy(float) <= t
            u = np.where(dead, 0.0, u)
        df[utility_col(t)] = u
    return MergedDataset(df, merged.wards, merged.report)


# ---------------------------------------------------------------- QALYs

def qaly_auc(utilities, death_day=None, times=TIMEPOINTS) -> float:
    """Trapezoidal area under the utility curve over days 0..90, in years.

    With a death on day d the curve runs linearly from the last measurement
    before d down to zero at d and stays at zero afterwards.
    """
    u = np.asarray(utilities, float)
    d = np.array([np.nan if death_day is None else death_day], float)
    return float(_qaly_rows(u[None, :], d, times)[0])


def _qaly_rows(U, death, times=TIMEPOINTS):
    t = np.asarray(times, float)
    death = np.where(np.isnan(death), np.inf, death)[:, None]
    lo, hi = t[:-1][None, :], t[1:][None, :]
    full = (U[:, :-1] + U[:, 1:]) / 2 * (hi - lo)
    taper = U[:, :-1] / 2 * (np.minimum(death, hi) - lo)
    area = np.where(death > hi, full, np.where(death > lo, taper, 0.0))
    return area.sum(axis=1) / DAYS_PER_YEAR


def qaly_column(frame: pd.DataFrame) -> np.ndarray:
    U = frame[[utility_col(t) for t in TIMEPOINTS]].to_numpy(float)
    return _qaly_rows(U, frame["death_day"].to_numpy(float))


# ---------------------------------------------------------------- costs

@dataclass(frozen=True)
class Activity:
    name: str
    usual_minutes: float
    intervention_minutes: float
    staff: str

    @property
    def increment(self):
        return self.intervention_minutes - self.usual_minutes


# Intervention delivery per patient (minutes), usual-care vs intervention wards.
DEFAULT_ACTIVITIES = (
    Activity("Discussion with patient about care - on admission", 5, 5, "nursing_manager"),
    Activity("Discussion with patient about care - during admission", 15, 30, "nursing_manager"),
    Activity("Discussion with patient about care - during admission", 15, 25, "medical"),
    Activity("Discussion with patient about care - discharge", 15, 20, "nursing_manager"),
    Activity("Assisting with activities of daily living", 70, 105, "nursing_manager"),
    Activity("Instructions/education for patient and/or caregiver", 5, 25, "nursing_manager"),
)


@dataclass(frozen=True)
class UnitCostTable:
    resources: dict = field(default_factory=dict)   # GBP per unit of use
    wages: dict = field(default_factory=dict)       # GBP per minute of staff time
    admission_tariff: float = 0.0
    day_tariff: float = 0.0
    currency_year: int = 2022
    activities: tuple = DEFAULT_ACTIVITIES

    def __post_init__(self):
        values = [*self.resources.values(), *self.wages.values(), self.admission_tariff, self.day_tariff]
        if any(not math.isfinite(v) or v < 0 for v in values):
            raise ConfigError("unit costs, wages and tariffs must be finite and non-negative")

    def scaled(self, k):
        return UnitCostTable({r: k * v for r, v in self.resources.items()},
                             {s: k * v for s, v in self.wages.items()},
                             k * self.admission_tariff, k * self.day_tariff, self.currency_year, self.activities)

    @classmethod
    def from_dict(cls, data):
        acts = data.get("activity")
        activities = DEFAULT_ACTIVITIES if not acts else tuple(
            Activity(a["name"], float(a["usual_minutes"]), float(a["intervention_minutes"]), a["staff"]) for a in acts)
        tariffs = data.get("tariffs", {})
        return cls(
            resources={k: float(v) for k, v in data.get("resources", {}).items()},
            wages={k: float(v) for k, v in data.get("wages", {}).items()},
            admission_tariff=float(tariffs.get("admission", 0.0)),
            day_tariff=float(tariffs.get("day", 0.0)),
            currency_year=int(data.get("currency_year", 2022)),
            activities=activities,
        )

    @classmethod
    def from_toml(cls, path):
        from .config import read_toml
        return cls.from_dict(read_toml(path))

    def to_dict(self):
        return {
            "currency_year": self.currency_year,
            "tariffs": {"admission": self.admission_tariff, "day": self.day_tariff},
            "wages": dict(self.wages),
            "resources": dict(self.resources),
            "activity": [{"name": a.name, "usual_minutes": a.usual_minutes,
                          "intervention_minutes": a.intervention_minutes, "staff": a.staff}
                         for a in self.activities],
        }


ILLUSTRATIVE_RESOURCE_COSTS = {
    "outpatient": 135.0, "daycase": 780.0, "ae": 210.0, "gp_surgery": 42.0, "gp_home": 95.0,
    "gp_phone": 22.0, "nurse_surgery": 14.0, "nurse_home": 48.0, "nurse_phone": 9.0,
    "therapist": 60.0, "homecare": 28.0, "socialworker": 55.0,
}


def illustrative_unit_costs() -> UnitCostTable:
    """Placeholder prices of plausible magnitude; replace with a local table."""
    return UnitCostTable(dict(ILLUSTRATIVE_RESOURCE_COSTS), {"nursing_manager": 0.90, "medical": 2.682},
                         admission_tariff=1200.0, day_tariff=320.0)


def intervention_cost(activities, wages: UnitCostTable, arm) -> float:
    """Incremental staff time valued at wage per minute; zero for control."""
    if isinstance(wages, UnitCostTable):
        wages = wages.wages
    total = 0.0
    for a in activities:
        if a.staff not in wages:
            raise ConfigError(f"no wage configured for staff type {a.staff!r}")
        total += a.increment * wages[a.staff]
    return round(total, 10) if arm == 1 else 0.0


def hospitalisation_cost(readmissions, tariffs: UnitCostTable, index_stay=None, include_index_stay=False) -> float:
    """Per-admission tariff plus per-day tariff over readmissions after discharge."""
    total = 0.0
    for _start, length in readmissions:
        if length < 0:
            raise ValidationError("readmission length must be non-negative")
        total += tariffs.admission_tariff + length * tariffs.day_tariff
    if include_index_stay and index_stay:
        total += index_stay * tariffs.day_tariff
    return total


def hospitalisation_column(frame, tariffs: UnitCostTable, include_index_stay=False):
    cost = frame["n_readm"].to_numpy(float) * tariffs.admission_tariff + frame["readm_days"].to_numpy(float) * tariffs.day_tariff
    if include_index_stay:
        cost = cost + frame["index_stay_days"].fillna(0).to_numpy(float) * tariffs.day_tariff
    return cost


@dataclass(frozen=True)
class CostBreakdown:
    intervention_cost: float
    hospitalisation_cost: float
    other_resource_costs: dict
    excluded_resource_use: dict
    total: float


def total_cost(patient, imputable, unit_costs: UnitCostTable, include_index_stay=False) -> CostBreakdown:
    """Cost one patient.  ``patient`` is a mapping with arm, readmissions
    (list of (start, length)) or hosp_cost, and resource counts.  Only
    resources in ``imputable`` are costed into the total; the others are
    passed through as counts for complete-case reporting."""
    ic = intervention_cost(unit_costs.activities, unit_costs, patient["arm"])
    if "hosp_cost" in patient and patient["hosp_cost"] is not None:
        hc = float(patient["hosp_cost"])
    else:
        hc = hospitalisation_cost(patient.get("readmissions", ()), unit_costs,
                                  patient.get("index_stay_days"), include_index_stay)
    other, excluded = {}, {}
    for r in CRF_RESOURCES:
        count = patient.get(r)
        if r in imputable:
            if r not in unit_costs.resources:
                raise ConfigError(f"no unit cost configured for resource {r!r}")
            other[r] = (0.0 if count is None or math.isnan(count) else count) * unit_costs.resources[r]
        elif count is not None:
            excluded[r] = count
    return CostBreakdown(ic, hc, other, excluded, ic + hc + sum(other.values()))


def cost_columns(frame, imputable, unit_costs: UnitCostTable) -> pd.DataFrame:
    """Vectorised ``total_cost`` over a completed frame (hosp_cost already set)."""
    out = pd.DataFrame(index=frame.index)
    ic = intervention_cost(unit_costs.activities, unit_costs, 1)
    out["intervention_cost"] = np.where(frame["arm"].to_numpy() == 1, ic, 0.0)
    out["hospitalisation_cost"] = frame["hosp_cost"].to_numpy(float)
    other = np.zeros(len(frame))
    for r in sorted(imputable):
        if r == "hospitalisation":
            continue
        if r not in unit_costs.resources:
            raise ConfigError(f"no unit cost configured for resource {r!r}")
        other = other + frame[r].to_numpy(float) * unit_costs.resources[r]
    out["other_costs"] = other
    out["total_cost"] = out["intervention_cost"] + out["hospitalisation_cost"] + out["other_costs"]
    return out


# ---------------------------------------------------------------- descriptive tables

def readmission_summary(merged) -> dict:
    df = merged.patients if isinstance(merged, MergedDataset) else merged
    out = {}
    top = int(df["n_readm"].max()) if len(df) else 0
    for name, sub in (("intervention", df[df["arm"] == 1]), ("control", df[df["arm"] == 0]), ("total", df)):
        counts = sub["n_readm"].value_counts().reindex(range(top + 1), fill_value=0)
        n = len(sub)
        out[name] = {
            "n": n,
            "counts": {int(k): int(v) for k, v in counts.items()},
            "percent": {int(k): (100.0 * v / n if n else math.nan) for k, v in counts.items()},
            "mean": float(sub["n_readm"].mean()) if n else math.nan,
            "sd": float(sub["n_readm"].std(ddof=1)) if n > 1 else (0.0 if n == 1 else math.nan),
        }
    return out


def complete_case_resource_table(merged, resources_=CRF_RESOURCES) -> pd.DataFrame:
    """Respondents (N) and percent using each resource, over observed cells only."""
    df = merged.patients if isinstance(merged, MergedDataset) else merged
    rows = []
    for r in resources_:
        row = {"resource": r}
        for name, sub in (("intervention", df[df["arm"] == 1]), ("control", df[df["arm"] == 0]), ("total", df)):
            obs = sub[r].dropna()
            row[f"{name}_n"] = len(obs)
            row[f"{name}_pct"] = 100.0 * (obs > 0).mean() if len(obs) else math.nan
        rows.append(row)
    return pd.DataFrame(rows)


def unadjusted_outcome_table(frames) -> pd.DataFrame:
    """Per-arm mean utilities at each timepoint and QALYs, averaged over
    completed datasets (mean of per-patient QALYs)."""
    acc = []
    for f in frames:
        q = qaly_column(f)
        g = f.assign(qaly=q).groupby("arm")
        acc.append(g[[utility_col(t) for t in TIMEPOINTS] + ["qaly"]].mean())
    mean = sum(acc) / len(acc)
    return mean.rename(index={1: "intervention", 0: "control"}).T


def unadjusted_cost_table(frames, imputable, unit_costs) -> pd.DataFrame:
    acc = []
    for f in frames:
        c = cost_columns(f, imputable, unit_costs).assign(arm=f["arm"].to_numpy())
        acc.append(c.groupby("arm")[["intervention_cost", "hospitalisation_cost", "total_cost"]].mean())
    mean = (sum(acc) / len(acc)).rename(index={1: "intervention", 0: "control"}).T
    mean["difference"] = mean["intervention"] - mean["control"]
    return mean


FOLLOW_UP_UTILITIES = tuple(utility_col(t) for t in FOLLOW_UP)
HOSPITALISATION = "hospitalisation"

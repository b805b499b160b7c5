"""Synthetic cluster-randomised trials with known effects, used to validate
the estimators and the full pipeline.

Utilities follow a ward intercept plus patient baseline plus AR(1)
deviations over the four visits, capped at 1.  Readmissions are Poisson
with a mean-one lognormal ward frailty.  The arm effect on utilities and the
intervention readmission rate are solved so that the expected QALY and cost
differences equal the configured truth exactly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .errors import ValidationError
from .outcomes import UnitCostTable, _qaly_rows, illustrative_unit_costs, intervention_cost
from .trial_data import CRF_RESOURCES, FOLLOW_UP, TIMEPOINTS, WARD_COVARIATES, MergedDataset, index_col

GENERATE_TAG = 3
MISSING_TAG = 4


@dataclass(frozen=True)
class SimConfig:
    wards_per_arm: int = 20
    patients_per_ward: tuple = (15, 15)
    delta_c: float = -250.0
    delta_e: float = 0.006
    seed: int = 0
    # utilities
    utility_mean: float = 0.49
    utility_drift: tuple = (-0.02, -0.03, -0.01)   # mean shift at days 10, 30, 90
    utility_ward_sd: float = 0.05
    utility_baseline_sd: float = 0.20
    utility_sd: float = 0.12
    utility_rho: float = 0.6
    # costs
    readm_rate_control: float = 0.6
    readm_frailty_sd: float = 0.3
    stay_mean_days: float = 6.0
    index_stay_mean: float = 10.0
    resource_rate: float = 0.3
    # covariates
    p_death: float = 0.03
    age_mean: float = 82.0
    age_sd: float = 7.0
    p_male: float = 0.45
    p_specialty: float = 0.5
    readm_pct_mean: float = 20.0
    readm_pct_sd: float = 4.0
    over75_mean: float = 60.0
    over75_sd: float = 10.0

    def __post_init__(self):
        sds = [self.utility_ward_sd, self.utility_baseline_sd, self.utility_sd, self.readm_frailty_sd,
               self.age_sd, self.readm_pct_sd, self.over75_sd]
        if any(s < 0 for s in sds):
            raise ValidationError("standard deviations must be >= 0")
        probs = [self.p_death, self.p_male, self.p_specialty]
        if any(not 0 <= p <= 1 for p in probs):
            raise ValidationError("probabilities must lie in [0, 1]")
        if self.wards_per_arm < 2:
            raise ValidationError("need at least 2 wards per arm")
        lo, hi = self.patients_per_ward
        if not 1 <= lo <= hi:
            raise ValidationError("patients_per_ward must be a range (lo, hi) with 1 <= lo <= hi")
        if not -1 < self.utility_rho < 1:
            raise ValidationError("utility_rho must lie in (-1, 1)")
        if self.stay_mean_days < 1 or self.readm_rate_control < 0 or self.resource_rate < 0:
            raise ValidationError("stay_mean_days must be >= 1 and rates >= 0")
        if len(self.utility_drift) != len(FOLLOW_UP):
            raise ValidationError("utility_drift needs one value per follow-up visit")

    @classmethod
    def from_dict(cls, data):
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValidationError(f"unknown simulate option(s): {sorted(extra)}")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class GroundTruth:
    delta_c: float
    delta_e: float
    utility_effect: float
    readm_rate_intervention: float
    complete: pd.DataFrame = field(repr=False)

    def nhb(self, lam):
        return self.delta_e - self.delta_c / lam

    def nmb(self, lam):
        return lam * self.delta_e - self.delta_c


def _capped_mean(mu, sd, cap=1.0):
    """E[min(X, cap)] for X ~ N(mu, sd^2)."""
    if sd == 0:
        return min(mu, cap)
    z = (cap - mu) / sd
    return mu - ((mu - cap) * stats.norm.sf(z) + sd * stats.norm.pdf(z))


def visit_weights(cfg: SimConfig):
    """Expected AUC weight (years) of each visit's utility, averaged over the
    death-day distribution (uniform over days 1..90 with probability p_death)."""
    eye = np.eye(len(TIMEPOINTS))
    alive = _qaly_rows(eye, np.full(len(TIMEPOINTS), np.nan))
    if cfg.p_death == 0:
        return alive
    days = np.arange(1, 91, dtype=float)
    dead = np.mean([_qaly_rows(eye, np.full(len(TIMEPOINTS), d)) for d in days], axis=0)
    return (1 - cfg.p_death) * alive + cfg.p_death * dead


def _visit_sd(cfg: SimConfig):
    return math.sqrt(cfg.utility_ward_sd ** 2 + cfg.utility_baseline_sd ** 2 + cfg.utility_sd ** 2)


def expected_qaly_difference(cfg: SimConfig, effect):
    w = visit_weights(cfg)
    sd = _visit_sd(cfg)
    diff = [0.0]
    for drift in cfg.utility_drift:
        mu = cfg.utility_mean + drift
        diff.append(_capped_mean(mu + effect, sd) - _capped_mean(mu, sd))
    return float(np.dot(w, diff))


def solve_utility_effect(cfg: SimConfig):
    if cfg.delta_e == 0:
        return 0.0
    f = lambda d: expected_qaly_difference(cfg, d) - cfg.delta_e
    guess = cfg.delta_e * 365 / 85
    lo, hi = (0.0, 4 * guess + 0.1) if guess > 0 else (4 * guess - 0.1, 0.0)
    return optimize.brentq(f, lo, hi, xtol=1e-15, rtol=1e-14, maxiter=200)


def solve_intervention_rate(cfg: SimConfig, unit_costs: UnitCostTable):
    stay = unit_costs.admission_tariff + cfg.stay_mean_days * unit_costs.day_tariff
    ic = intervention_cost(unit_costs.activities, unit_costs, 1)
    if stay == 0:
        raise ValidationError("tariffs are zero; cost effect cannot be produced by readmissions")
    rate = cfg.readm_rate_control + (cfg.delta_c - ic) / stay
    if rate < 0:
        raise ValidationError(f"delta_c={cfg.delta_c} needs a negative intervention readmission rate")
    return rate


def generate_trial(cfg: SimConfig, unit_costs: UnitCostTable | None = None):
    """Draw a complete trial.  Returns (MergedDataset, GroundTruth); the
    dataset carries eq5d index columns, readmissions and resource counts in
    the same layout the CSV readers produce."""
    unit_costs = unit_costs or illustrative_unit_costs()
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), GENERATE_TAG]))
    effect = solve_utility_effect(cfg)
    rate1 = solve_intervention_rate(cfg, unit_costs)

    n_wards = 2 * cfg.wards_per_arm
    ward_ids = np.array([f"W{j + 1:03d}" for j in range(n_wards)])
    ward_arm = np.tile([1, 0], cfg.wards_per_arm)
    wards = pd.DataFrame({
        "ward_id": ward_ids,
        "specialty_elderly": rng.binomial(1, cfg.p_specialty, n_wards).astype(float),
        "baseline_readm_rate": np.clip(rng.normal(cfg.readm_pct_mean, cfg.readm_pct_sd, n_wards), 0, 100),
        "pct_over_75": np.clip(rng.normal(cfg.over75_mean, cfg.over75_sd, n_wards), 0, 100),
    })
    ward_u = rng.normal(0, cfg.utility_ward_sd, n_wards)
    frailty = np.exp(rng.normal(-cfg.readm_frailty_sd ** 2 / 2, cfg.readm_frailty_sd, n_wards))
    lo, hi = cfg.patients_per_ward
    sizes = rng.integers(lo, hi + 1, n_wards)

    w = np.repeat(np.arange(n_wards), sizes)
    n = len(w)
    arm = ward_arm[w]
    age = np.clip(rng.normal(cfg.age_mean, cfg.age_sd, n), 18, 110)
    sex = rng.binomial(1, cfg.p_male, n).astype(float)
    dies = rng.random(n) < cfg.p_death
    death = np.where(dies, rng.integers(1, 91, n), -1).astype(float)
    death[death < 0] = np.nan

    base = cfg.utility_mean + ward_u[w] + rng.normal(0, cfg.utility_baseline_sd, n)
    shocks = rng.standard_normal((n, len(FOLLOW_UP)))
    dev = np.empty_like(shocks)
    dev[:, 0] = shocks[:, 0]
    for k in range(1, len(FOLLOW_UP)):
        dev[:, k] = cfg.utility_rho * dev[:, k - 1] + math.sqrt(1 - cfg.utility_rho ** 2) * shocks[:, k]
    U = np.empty((n, len(TIMEPOINTS)))
    U[:, 0] = base
    U[:, 1:] = base[:, None] + np.asarray(cfg.utility_drift)[None, :] + effect * arm[:, None] + cfg.utility_sd * dev
    U = np.minimum(U, 1.0)

    rate = np.where(arm == 1, rate1, cfg.readm_rate_control) * frailty[w]
    n_readm = rng.poisson(rate)
    kmax = int(n_readm.max()) if n else 0
    starts = np.full((n, kmax), np.nan)
    lens = np.full((n, kmax), np.nan)
    for i in np.flatnonzero(n_readm):
        k = n_readm[i]
        starts[i, :k] = np.sort(rng.integers(1, 90, k))
        lens[i, :k] = 1 + rng.poisson(cfg.stay_mean_days - 1, k)
    res = rng.poisson(cfg.resource_rate, (n, len(CRF_RESOURCES))).astype(float)
    index_stay = 1 + rng.poisson(cfg.index_stay_mean - 1, n).astype(float)

    df = pd.DataFrame({
        "patient_id": [f"P{i + 1:05d}" for i in range(n)],
        "ward_id": ward_ids[w],
        "arm": arm.astype(int),
        "age": age,
        "sex_male": sex,
        "death_day": death,
        "index_stay_days": index_stay,
    })
    for k in range(kmax):
        df[f"readm_start_{k + 1}"] = starts[:, k]
        df[f"readm_len_{k + 1}"] = lens[:, k]
    df["n_readm"] = n_readm.astype(int)
    df["readm_days"] = np.nansum(lens, axis=1) if kmax else 0.0
    for j, t in enumerate(TIMEPOINTS):
        u = U[:, j].copy()
        if t > 0:
            u[death <= t] = np.nan   # no visit after death
        df[index_col(t)] = u
    for j, r in enumerate(CRF_RESOURCES):
        df[r] = res[:, j]
    df = df.merge(wards, on="ward_id", how="left")

    truth = GroundTruth(cfg.delta_c, cfg.delta_e, effect, rate1, df.copy())
    return MergedDataset(df, wards), truth


# ---------------------------------------------------------------- missingness

@dataclass(frozen=True)
class Mechanism:
    """Deletion of follow-up utilities (and optionally other cells).

    MCAR deletes each eligible cell with probability ``p``.  MAR uses
    logit P = logit(p) + b_baseline * (u_0 - mean) + b_arm * (arm - 1/2);
    MNAR adds b_value * (u_t - mean) for the value being deleted.
    """

    kind: str = "MCAR"
    p: float = 0.0
    b_baseline: float = -3.0
    b_arm: float = 0.0
    b_value: float = -3.0
    timepoints: tuple = FOLLOW_UP
    baseline_p: float = 0.0
    hosp_p: float = 0.0
    resource_p: float = 0.0

    def __post_init__(self):
        if self.kind not in ("MCAR", "MAR", "MNAR"):
            raise ValidationError(f"unknown missingness mechanism {self.kind!r}")
        for name in ("p", "baseline_p", "hosp_p", "resource_p"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        if set(self.timepoints) - set(FOLLOW_UP):
            raise ValidationError(f"timepoints must be among {FOLLOW_UP}")

    @classmethod
    def from_dict(cls, data):
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        return cls(**data)


def _probability(mech: Mechanism, base, arm, value):
    if mech.p in (0.0, 1.0):
        return np.full(len(base), mech.p)
    eta = math.log(mech.p / (1 - mech.p)) + np.zeros(len(base))
    if mech.kind in ("MAR", "MNAR"):
        b = np.nan_to_num(base - np.nanmean(base))
        eta = eta + mech.b_baseline * b + mech.b_arm * (arm - 0.5)
    if mech.kind == "MNAR":
        eta = eta + mech.b_value * (value - np.nanmean(value))
    return 1 / (1 + np.exp(-eta))


def apply_missingness(dataset, mechanism: Mechanism, seed=0):
    """Delete cells per ``mechanism``.  Returns (MergedDataset, deletion map)
    where the map flags every deleted cell."""
    ds = dataset if isinstance(dataset, MergedDataset) else MergedDataset(dataset, None)
    df = ds.patients.copy()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), MISSING_TAG]))
    deleted = pd.DataFrame(False, index=df.index, columns=[])
    base = df[index_col(0)].to_numpy(float)
    arm = df["arm"].to_numpy(float)

    for t in mechanism.timepoints:
        col = index_col(t)
        vals = df[col].to_numpy(float)
        prob = _probability(mechanism, base, arm, vals)
        hit = (rng.random(len(df)) < prob) & ~np.isnan(vals)
        df.loc[hit, col] = np.nan
        deleted[col] = hit

    hit = (rng.random(len(df)) < mechanism.baseline_p) & df[index_col(0)].notna().to_numpy()
    df.loc[hit, index_col(0)] = np.nan
    deleted[index_col(0)] = hit

    k = 1
    hosp = np.zeros(len(df), bool)
    while f"readm_len_{k}" in df:
        col = f"readm_len_{k}"
        h = (rng.random(len(df)) < mechanism.hosp_p) & df[col].notna().to_numpy()
        df.loc[h, col] = np.nan
        deleted[col] = h
        hosp |= h
        k += 1
    df.loc[hosp, "readm_days"] = np.nan

    for r in CRF_RESOURCES:
        h = (rng.random(len(df)) < mechanism.resource_p) & df[r].notna().to_numpy()
        df.loc[h, r] = np.nan
        deleted[r] = h
    deleted.index = df["patient_id"].to_numpy()
    return MergedDataset(df, ds.wards, ds.report), deleted


# ---------------------------------------------------------------- CSV export

def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)) and float(v).is_integer():
        return str(int(v))
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_trial_csvs(dataset, directory):
    """Write routine.csv, crf.csv and wards.csv in the reader schemas."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    df = dataset.patients if isinstance(dataset, MergedDataset) else dataset
    k = 0
    while f"readm_start_{k + 1}" in df:
        k += 1
    routine_cols = ["patient_id", "ward_id", "arm", "age", "sex_male", "death_day", "index_stay_days"]
    routine_cols += [c for i in range(1, max(k, 1) + 1) for c in (f"readm_start_{i}", f"readm_len_{i}")]
    routine = df.reindex(columns=routine_cols)
    crf = df[["patient_id"] + [index_col(t) for t in TIMEPOINTS] + list(CRF_RESOURCES)]
    wards = dataset.wards if isinstance(dataset, MergedDataset) and dataset.wards is not None else \
        df[["ward_id", *WARD_COVARIATES]].drop_duplicates("ward_id")
    wards = wards.rename(columns={"baseline_readm_rate": "baseline_readm_rate_pct"})
    paths = {}
    for name, frame in (("routine", routine), ("crf", crf), ("wards", wards)):
        p = directory / f"{name}.csv"
        out = frame.astype(object).map(_fmt) if hasattr(frame, "map") else frame.astype(object).applymap(_fmt)
        out.to_csv(p, index=False, lineterminator="\n")
        paths[name] = p
    return paths

"""End-to-end analysis: value outcomes, cost resources, impute by arm,
estimate per imputed dataset, pool, bootstrap and summarise."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .config import AnalysisConfig, ImputationConfig
from .decision import icer, nhb_variance
from .errors import ValidationError
from .estimation import CovariateSpec, design_matrix
from .mice import ImputationSpec, ImputedSets, mice_by_arm
from .missingness import (
    HOSPITALISATION, QOL_VARS, MissingnessReport, choose_imputation_count, classify_resources,
    impute_baseline_cluster_means, profile_missingness,
)
from .outcomes import UnitCostTable, cost_columns, hospitalisation_column, qaly_column, value_utilities
from .parallel import run_tasks
from .trial_data import CRF_RESOURCES, MergedDataset
from .uncertainty import (
    Ceac, CeCloud, ceac, cluster_bootstrap, difference_pair, pool_clouds, rubin_pool, threshold_grid,
)

log = logging.getLogger(__name__)


@dataclass
class Prepared:
    """Analysis frame after utilities, hospital costs and baseline filling,
    with everything needed to impute and estimate."""

    frame: pd.DataFrame
    report: MissingnessReport
    classes: dict
    M: int
    spec: ImputationSpec
    unit_costs: UnitCostTable
    settings: AnalysisConfig
    covariates: CovariateSpec = field(default_factory=CovariateSpec)

    @property
    def imputable(self):
        return self.classes["imputable"]


def prepare(merged: MergedDataset, unit_costs: UnitCostTable, settings: AnalysisConfig = AnalysisConfig(),
            valueset=None, imputation: ImputationConfig = ImputationConfig()) -> Prepared:
    valued = value_utilities(merged, valueset)
    df = valued.patients.copy()
    df["hosp_cost"] = hospitalisation_column(df, unit_costs, settings.include_index_stay)
    report = profile_missingness(df)
    classes = classify_resources(report, settings.resource_threshold)
    filled = impute_baseline_cluster_means(MergedDataset(df, valued.wards, valued.report)).patients

    variables = list(QOL_VARS)
    if HOSPITALISATION in classes["imputable"]:
        variables.append("hosp_cost")
    else:
        log.warning("hospitalisation exceeds the missingness threshold; readmission costs left out of totals")
        filled["hosp_cost"] = 0.0
    counts = [r for r in CRF_RESOURCES if r in classes["imputable"]]
    variables += counts
    analysis_vars = [v for v in QOL_VARS] + [r for r in sorted(classes["imputable"])]
    M = settings.M or choose_imputation_count(report, analysis_vars)
    spec = ImputationSpec(tuple(variables), tuple(counts), pmm_k=imputation.pmm_k, cycles=imputation.cycles,
                          ridge=imputation.ridge, min_complete=imputation.min_complete)
    return Prepared(filled, report, classes, M, spec, unit_costs, settings)


def impute(prep: Prepared, workers=1) -> ImputedSets:
    return mice_by_arm(prep.frame, prep.M, prep.settings.seed, prep.spec, workers=workers)


def finalize(df: pd.DataFrame, prep: Prepared) -> pd.DataFrame:
    """Add QALYs and total cost to a completed dataset."""
    df = df.copy()
    df["qaly"] = qaly_column(df)
    costs = cost_columns(df, prep.imputable, prep.unit_costs)
    for c in costs.columns:
        df[c] = costs[c].to_numpy()
    bad = df[["qaly", "total_cost"]].isna().any(axis=1)
    if bad.any():
        raise ValidationError(f"{int(bad.sum())} completed rows still lack QALY or cost")
    return df


# ---------------------------------------------------------------- estimation

def estimate_one(df, estimator, prep: Prepared):
    Xc, _ = design_matrix(df, prep.covariates.cost)
    Xq, _ = design_matrix(df, prep.covariates.qaly)
    _, cl = np.unique(df["ward_id"].to_numpy(), return_inverse=True)
    family = prep.settings.cost_family if estimator == "lmm" else "gaussian"
    return difference_pair(df["total_cost"].to_numpy(float), df["qaly"].to_numpy(float), Xc, Xq, cl,
                           estimator, family)


def _pool_endpoint(diffs):
    pooled = rubin_pool([d.difference for d in diffs], [d.variance for d in diffs], diffs[0].df)
    return {
        "adjusted_mean_control": float(np.mean([d.mean_control for d in diffs])),
        "adjusted_mean_intervention": float(np.mean([d.mean_intervention for d in diffs])),
        "difference": pooled.to_dict(),
    }


def threshold_key(lam):
    return str(int(lam)) if float(lam).is_integer() else repr(float(lam))


def pool_estimator(per_imp, thresholds):
    """Rubin-pool cost, QALY and NHB/NMB for one estimator.  ``per_imp``
    holds (cost diff, qaly diff, covariance) per imputation."""
    dcs, des, covs = zip(*per_imp)
    out = {"cost": _pool_endpoint(dcs), "qaly": _pool_endpoint(des)}
    dc, de = out["cost"]["difference"]["estimate"], out["qaly"]["difference"]["estimate"]
    out["icer"] = icer(dc, de)
    out["nhb"], out["nmb"] = {}, {}
    for lam in thresholds:
        vals = [e.difference - c.difference / lam for c, e, _ in per_imp]
        vars_ = [nhb_variance(c.variance, e.variance, cv, lam) for c, e, cv in per_imp]
        p = rubin_pool(vals, vars_, min(dcs[0].df, des[0].df)).to_dict()
        out["nhb"][threshold_key(lam)] = p
        # NMB is lambda times NHB, so its pooled summary is too
        out["nmb"][threshold_key(lam)] = {k: (lam * v if k in ("estimate", "ci_low", "ci_high", "se") else
                                              lam ** 2 * v if k.endswith("_var") else v) for k, v in p.items()}
    return out


@dataclass
class AnalysisResult:
    pooled: dict
    cloud: CeCloud
    curve: Ceac
    M: int
    B: int
    seed: int
    scenario: int = 1
    redraws: int = 0
    settings: dict = field(default_factory=dict)

    def probability(self, lam):
        return self.curve.at(lam)

    def to_dict(self):
        primary = self.settings.get("primary_estimator", "lmm")
        p = self.pooled[primary]
        dc, de = p["cost"]["difference"]["estimate"], p["qaly"]["difference"]["estimate"]
        decisions = {}
        for lam in self.settings.get("thresholds", ()):
            k = threshold_key(lam)
            decisions[k] = {"threshold": lam, "nhb": p["nhb"][k]["estimate"], "nmb": p["nmb"][k]["estimate"],
                            "prob_ce": self.probability(lam)}
        return {
            "scenario": self.scenario, "M": self.M, "B": self.B, "seed": self.seed,
            "primary_estimator": primary, "estimators": self.pooled,
            "decision": {"delta_c": dc, "delta_e": de, "icer": icer(dc, de), "by_threshold": decisions},
            "probability_method": self.cloud.method, "bootstrap_redraws": self.redraws,
        }


def _bootstrap_task(df, B, seed, m, estimator, family, cov):
    return cluster_bootstrap(df, B, seed, cov, key=(m,), estimator=estimator, cost_family=family)


def analyse_imputed(imputed: ImputedSets, prep: Prepared, workers=1, scenario=1) -> AnalysisResult:
    s = prep.settings
    completed = [finalize(df, prep) for df in imputed.datasets]
    pooled = {}
    for est in s.estimators:
        per_imp = [estimate_one(df, est, prep) for df in completed]
        pooled[est] = pool_estimator(per_imp, s.thresholds)
    family = s.cost_family if s.primary_estimator == "lmm" else "gaussian"
    tasks = [(df, s.B, s.seed, m, s.primary_estimator, family, prep.covariates) for m, df in enumerate(completed)]
    boots = run_tasks(_bootstrap_task, tasks, workers)
    cloud = pool_clouds([b[0] for b in boots], s.seed, scenario)
    grid = threshold_grid(*s.ceac_grid, include=s.thresholds)
    curve = ceac(cloud, grid)
    settings = {"thresholds": list(s.thresholds), "primary_estimator": s.primary_estimator}
    return AnalysisResult(pooled, cloud, curve, imputed.M, s.B, s.seed, scenario, sum(b[1] for b in boots), settings)


def run_analysis(merged, unit_costs, settings=AnalysisConfig(), valueset=None, imputation=ImputationConfig(),
                 workers=1):
    prep = prepare(merged, unit_costs, settings, valueset, imputation)
    imputed = impute(prep, workers)
    return prep, imputed, analyse_imputed(imputed, prep, workers)


def dumps(obj):
    """Deterministic JSON text (sorted keys, shortest round-trip floats)."""
    return json.dumps(_clean(obj), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (set, frozenset)):
        return sorted(_clean(v) for v in obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    return obj

"""Multiple imputation by chained equations, run separately in each arm.

Each (arm, m) chain owns the stream SeedSequence([seed, 1, arm, m]) so the
completed datasets do not depend on execution order or worker count.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ImputationError, ValidationError
from .parallel import run_tasks

log = logging.getLogger(__name__)

MICE_TAG = 1


@dataclass(frozen=True)
class ImputationSpec:
    variables: tuple = ("u_10", "u_30", "u_90", "hosp_cost")
    count_variables: tuple = ()
    # patient-level predictors; ward-level covariates are absorbed by the ward dummies
    predictors: tuple = ("sex_male", "u_0")
    pmm_k: int = 5
    cycles: int = 20
    ridge: float = 1e-4
    min_complete: int = 10

    def __post_init__(self):
        if self.pmm_k < 1 or self.cycles < 1 or self.ridge <= 0 or self.min_complete < 1:
            raise ValidationError("pmm_k, cycles and min_complete must be >= 1 and ridge > 0")
        extra = set(self.count_variables) - set(self.variables)
        if extra:
            raise ValidationError(f"count variables not listed as imputation variables: {sorted(extra)}")


def chain_rng(seed, arm, m):
    return np.random.default_rng(np.random.SeedSequence([int(seed), MICE_TAG, int(arm), int(m)]))


def _norm_draw(X, y, rng, ridge, label):
    """Coefficients drawn from their posterior under a flat prior (Bayesian
    linear regression), plus the least-squares fit used for matching."""
    n, p = X.shape
    xtx = X.T @ X
    scale = np.sqrt(np.diag(xtx))
    ev = np.linalg.eigvalsh(xtx / np.outer(scale, scale)) if p else np.array([1.0])
    if ev.min() < 1e-10:
        log.info("collinear predictors imputing %s; ridge %.0e applied", label, ridge)
        xtx = xtx + ridge * np.diag(np.diag(xtx))
    V = np.linalg.inv(xtx)
    V = (V + V.T) / 2
    coef = V @ (X.T @ y)
    resid = y - X @ coef
    df = max(n - p, 1)
    sigma = np.sqrt(resid @ resid / rng.chisquare(df))
    L = np.linalg.cholesky(V + 1e-12 * np.trace(V) / p * np.eye(p))
    beta = coef + sigma * (L @ rng.standard_normal(p))
    return coef, beta


def _pmm(yhat_obs, yhat_mis, y_obs, k, rng):
    """For each missing cell pick one of the k observed donors whose predicted
    value is closest to the cell's predicted value."""
    k = min(k, len(y_obs))
    dist = np.abs(yhat_mis[:, None] - yhat_obs[None, :])
    near = np.argpartition(dist, k - 1, axis=1)[:, :k] if k < dist.shape[1] else np.argsort(dist, axis=1)
    pick = near[np.arange(len(yhat_mis)), rng.integers(0, k, len(yhat_mis))]
    return y_obs[pick]


def impute_chain(data, fixed, count_mask, names, spec: ImputationSpec, seed, arm, m):
    """Run one chain on one arm.  ``data`` (n, V) holds NaN for missing
    cells, ``fixed`` (n, q) are complete predictors.  Returns the completed
    (n, V) array; observed cells are returned unchanged."""
    rng = chain_rng(seed, arm, m)
    data = np.array(data, float)
    miss = np.isnan(data)
    if not miss.any():
        return data
    work = data.copy()
    work[:, count_mask] = np.log1p(work[:, count_mask])

    order = []
    for j in sorted(range(len(names)), key=lambda j: (miss[:, j].mean(), names[j])):
        if not miss[:, j].any():
            continue
        n_obs = int((~miss[:, j]).sum())
        if n_obs < spec.min_complete:
            raise ImputationError(f"arm {arm}: only {n_obs} observed values of {names[j]} "
                                  f"(need {spec.min_complete})")
        order.append(j)
    for j in order:
        obs_vals = work[~miss[:, j], j]
        work[miss[:, j], j] = rng.choice(obs_vals, miss[:, j].sum())

    for _ in range(spec.cycles):
        for j in order:
            others = [i for i in range(len(names)) if i != j]
            Z = np.column_stack([fixed, work[:, others]])
            sd = Z.std(axis=0)
            keep = sd > 1e-12
            Z = (Z[:, keep] - Z[:, keep].mean(axis=0)) / sd[keep]
            X = np.column_stack([np.ones(len(Z)), Z])
            o, u = ~miss[:, j], miss[:, j]
            coef, beta = _norm_draw(X[o], work[o, j], rng, spec.ridge, names[j])
            work[u, j] = _pmm(X[o] @ coef, X[u] @ beta, work[o, j], spec.pmm_k, rng)

    out = data.copy()
    filled = work.copy()
    filled[:, count_mask] = np.maximum(np.round(np.expm1(filled[:, count_mask])), 0.0)
    out[miss] = filled[miss]
    return out


def ward_dummies(wards):
    levels = np.unique(wards)
    return (wards[:, None] == levels[None, 1:]).astype(float)


@dataclass
class ImputedSets:
    datasets: list
    mask: pd.DataFrame              # True where the source cell was missing
    variables: tuple
    seed: int
    seeds: list = field(default_factory=list)
    baseline_mask: pd.DataFrame | None = None

    @property
    def M(self):
        return len(self.datasets)

    def imputed_ids(self, variable):
        return [str(p) for p in self.mask.index[self.mask[variable].to_numpy()]]

    def manifest(self):
        return {
            "M": self.M, "seed": self.seed, "variables": list(self.variables),
            "chains": self.seeds,
            "imputed": {v: self.imputed_ids(v) for v in self.variables},
            "baseline_imputed": ({c: [str(p) for p in self.baseline_mask.index[self.baseline_mask[c].to_numpy()]]
                                  for c in self.baseline_mask.columns} if self.baseline_mask is not None else {}),
        }

    def to_dir(self, path, extra=None):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        for m, df in enumerate(self.datasets, start=1):
            df.to_csv(path / f"imputation_{m:03d}.csv", index=False, float_format="%.17g")
        man = {**self.manifest(), **(extra or {})}
        (path / "mask.json").write_text(json.dumps(man, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_dir(cls, path):
        path = Path(path)
        man_path = path / "mask.json"
        if not man_path.exists():
            raise FileNotFoundError(f"file not found: {man_path}")
        man = json.loads(man_path.read_text(encoding="utf-8"))
        datasets = [pd.read_csv(path / f"imputation_{m:03d}.csv", dtype={"patient_id": str, "ward_id": str},
                                float_precision="round_trip") for m in range(1, man["M"] + 1)]
        ids = datasets[0]["patient_id"].to_numpy()
        mask = pd.DataFrame({v: np.isin(ids, man["imputed"][v]) for v in man["variables"]}, index=ids)
        base = man.get("baseline_imputed") or {}
        bmask = pd.DataFrame({c: np.isin(ids, v) for c, v in base.items()}, index=ids) if base else None
        return cls(datasets, mask, tuple(man["variables"]), man["seed"], man["chains"], bmask)


def mice_by_arm(frame, M, seed, spec: ImputationSpec = ImputationSpec(), workers=1) -> ImputedSets:
    """M completed copies of ``frame``; chains run independently per arm."""
    df = frame.patients if hasattr(frame, "patients") else frame
    if M < 2:
        raise ValidationError("M must be >= 2")
    names = list(spec.variables)
    absent = [c for c in names + list(spec.predictors) + ["arm", "ward_id"] if c not in df]
    if absent:
        raise ValidationError(f"imputation input lacks column(s) {absent}")
    if df[list(spec.predictors)].isna().any().any():
        raise ValidationError("imputation predictors must be complete (run baseline imputation first)")
    count_mask = np.array([v in spec.count_variables for v in names], bool)

    tasks, rows_of = [], {}
    for arm in sorted(df["arm"].unique()):
        rows = np.flatnonzero(df["arm"].to_numpy() == arm)
        rows_of[arm] = rows
        sub = df.iloc[rows]
        fixed = np.column_stack([sub[list(spec.predictors)].to_numpy(float),
                                 ward_dummies(sub["ward_id"].to_numpy())])
        data = sub[names].to_numpy(float)
        for m in range(M):
            tasks.append((data, fixed, count_mask, names, spec, seed, int(arm), m))
    results = run_tasks(impute_chain, tasks, workers)

    mask = pd.DataFrame(df[names].isna().to_numpy(), columns=names, index=df["patient_id"].to_numpy())
    datasets = [df.copy() for _ in range(M)]
    seeds = []
    for (data, *_rest, s, arm, m), res in zip(tasks, results):
        rows = rows_of[arm]
        for j, v in enumerate(names):
            col = datasets[m][v].to_numpy(float, copy=True)
            col[rows] = res[:, j]
            datasets[m][v] = col
        seeds.append({"seed": int(s), "arm": arm, "m": m, "entropy": [int(s), MICE_TAG, arm, m]})
    bcols = [c for c in df.columns if c.startswith("bimp_")]
    bmask = (pd.DataFrame(df[bcols].to_numpy(bool), columns=[c[5:] for c in bcols], index=mask.index)
             if bcols else None)
    return ImputedSets(datasets, mask, tuple(names), int(seed), seeds, bmask)

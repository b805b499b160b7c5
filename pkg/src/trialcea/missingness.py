"""Missing-data profiling and the deterministic parts of the missing-data
strategy: resource classification, within-ward baseline imputation, the
number of imputations, and a random-intercept logistic model for missingness.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import optimize
from scipy.special import expit, log_expit, logsumexp

from .errors import ConfigError, ConvergenceError, ValidationError
from .trial_data import CRF_RESOURCES, FOLLOW_UP, MergedDataset, utility_col

log = logging.getLogger(__name__)

HOSPITALISATION = "hospitalisation"
RESOURCES = (HOSPITALISATION, *CRF_RESOURCES)
BASELINE_VARS = ("arm", "age", "sex_male", "u_0", "specialty_elderly", "baseline_readm_rate", "pct_over_75")
QOL_VARS = tuple(utility_col(t) for t in FOLLOW_UP)
BASELINE_IMPUTED = ("u_0", "baseline_readm_rate")
GROUPS = {**{v: "baseline" for v in BASELINE_VARS}, **{v: "quality_of_life" for v in QOL_VARS},
          **{r: "resource_use" for r in RESOURCES}}


def _frame(obj):
    return obj.patients if isinstance(obj, MergedDataset) else obj


def missing_indicators(frame) -> pd.DataFrame:
    """Boolean missing flag per patient for every profiled variable."""
    out = {}
    for v in BASELINE_VARS + QOL_VARS:
        out[v] = frame[v].isna().to_numpy() if v in frame else np.ones(len(frame), bool)
    out[HOSPITALISATION] = frame["readm_days"].isna().to_numpy()
    for r in CRF_RESOURCES:
        out[r] = frame[r].isna().to_numpy() if r in frame else np.ones(len(frame), bool)
    return pd.DataFrame(out, index=frame["patient_id"].to_numpy())


@dataclass
class MissingnessReport:
    table: pd.DataFrame        # variable, group, missing, total, percent
    by_arm: pd.DataFrame       # arm, variable, missing, total, percent (utilities)
    patterns: pd.DataFrame     # follow-up utility patterns: pattern, count, monotone
    indicators: pd.DataFrame   # patient x variable missing flags

    def percent(self, variable):
        return float(self.table.set_index("variable").loc[variable, "percent"])

    def fraction(self, variable):
        row = self.table.set_index("variable").loc[variable]
        return row["missing"] / row["total"] if row["total"] else 0.0

    def incomplete_case_pct(self, variables):
        if not variables:
            return 0.0
        return 100.0 * float(self.indicators[list(variables)].any(axis=1).mean())

    def to_dict(self):
        return {
            "variables": self.table.to_dict("records"),
            "by_arm": self.by_arm.to_dict("records"),
            "patterns": self.patterns.to_dict("records"),
        }


def profile_missingness(merged) -> MissingnessReport:
    df = _frame(merged)
    ind = missing_indicators(df)
    n = len(df)
    table = pd.DataFrame({
        "variable": ind.columns,
        "group": [GROUPS[v] for v in ind.columns],
        "missing": ind.sum(axis=0).to_numpy().astype(int),
        "total": n,
    })
    table["percent"] = 100.0 * table["missing"] / n if n else 0.0

    rows = []
    for arm, label in ((1, "intervention"), (0, "control")):
        sub = ind[df["arm"].to_numpy() == arm]
        for v in ("u_0", *QOL_VARS):
            miss = int(sub[v].sum())
            rows.append({"arm": label, "variable": v, "missing": miss, "total": len(sub),
                         "percent": 100.0 * miss / len(sub) if len(sub) else 0.0})
    by_arm = pd.DataFrame(rows)

    pat = ind[list(QOL_VARS)].apply(lambda r: "".join("." if x else "o" for x in r), axis=1)
    counts = pat.value_counts().sort_index()
    patterns = pd.DataFrame({"pattern": counts.index, "count": counts.to_numpy()})
    # monotone: once missing, missing at every later visit
    patterns["monotone"] = patterns["pattern"].map(lambda p: "o" not in p[p.index(".") :] if "." in p else True)
    return MissingnessReport(table, by_arm, patterns, ind)


def classify_resources(report: MissingnessReport, threshold=0.60, resources=None):
    """Resources with missing share strictly below ``threshold`` are imputed and
    costed; the rest are described by complete-case comparison only."""
    resources = RESOURCES if resources is None else tuple(resources)
    unknown = [r for r in resources if r not in RESOURCES]
    if unknown:
        raise ConfigError(f"unknown resource name(s): {unknown}")
    imputable = {r for r in resources if report.fraction(r) < threshold}
    return {"imputable": imputable, "complete_case_only": set(resources) - imputable}


def impute_baseline_cluster_means(merged, columns=BASELINE_IMPUTED) -> MergedDataset:
    """Fill missing baseline values with the mean of observed values in the
    same ward, both arms pooled; fall back to the overall mean for a ward with
    nothing observed.  Adds ``bimp_<col>`` flag columns."""
    merged = merged if isinstance(merged, MergedDataset) else MergedDataset(merged, None)
    df = merged.patients.copy()
    for col in columns:
        miss = df[col].isna()
        df[f"bimp_{col}"] = miss.to_numpy()
        if not miss.any():
            continue
        ward_mean = df.groupby("ward_id")[col].transform("mean")
        overall = df[col].mean()
        if math.isnan(overall):
            raise ValidationError(f"baseline variable {col} is missing for every patient")
        fallback = miss & ward_mean.isna()
        for ward in sorted(df.loc[fallback, "ward_id"].unique()):
            log.warning("ward %s has no observed %s; using overall mean %.6g", ward, col, overall)
        df[col] = df[col].fillna(ward_mean).fillna(overall)
    return MergedDataset(df, merged.wards, merged.report)


def choose_imputation_count(report: MissingnessReport, variables=None, lo=5, hi=50):
    """M = percentage of incomplete cases, rounded up, clamped to [lo, hi]."""
    if variables is None:
        variables = list(QOL_VARS) + sorted(classify_resources(report)["imputable"])
    pct = report.incomplete_case_pct(variables) if not np.isscalar(variables) else float(variables)
    return int(min(max(math.ceil(round(pct, 9)), lo), hi))


# ---------------------------------------------------------------- missingness model

MISSINGNESS_COVARIATES = ("arm", "u_0", "specialty_elderly", "baseline_readm_rate", "pct_over_75", "sex_male")


@dataclass
class MissingnessModelFit:
    timepoint: int
    names: tuple
    coef: np.ndarray
    se: np.ndarray
    sigma2_u: float
    loglik: float
    n: int
    n_clusters: int
    iterations: int

    @property
    def z(self):
        return self.coef / self.se

    def to_dict(self):
        return {"timepoint": self.timepoint, "n": self.n, "n_clusters": self.n_clusters,
                "cluster_variance": self.sigma2_u, "loglik": self.loglik,
                "coefficients": {k: {"coef": float(c), "se": float(s), "z": float(c / s)}
                                 for k, c, s in zip(self.names, self.coef, self.se)}}


LOG_SIGMA_MIN = -12.0


class _RandomInterceptLogit:
    """Marginal likelihood of a logistic model with a normal cluster intercept,
    integrated by adaptive Gauss-Hermite quadrature."""

    def __init__(self, y, X, codes, n_nodes=15):
        self.y, self.X, self.codes = y, X, codes
        self.J = codes.max() + 1
        self.nodes, self.weights = np.polynomial.hermite.hermgauss(n_nodes)

    def _sum(self, v):
        return np.bincount(self.codes, weights=v, minlength=self.J)

    def negloglik(self, theta):
        beta, log_sigma = theta[:-1], theta[-1]
        eta = self.X @ beta
        if log_sigma <= LOG_SIGMA_MIN:
            return -float(np.sum(self.y * log_expit(eta) + (1 - self.y) * log_expit(-eta)))
        s2 = math.exp(2 * log_sigma)
        u = np.zeros(self.J)
        for _ in range(50):
            p = expit(eta + u[self.codes])
            g = self._sum(self.y - p) - u / s2
            h = -self._sum(p * (1 - p)) - 1 / s2
            step = g / h
            u = u - step
            if np.max(np.abs(step)) < 1e-12:
                break
        scale = 1.0 / np.sqrt(-h)
        # node points per cluster: u_hat + sqrt(2) * scale * x_k
        pts = u[:, None] + math.sqrt(2) * scale[:, None] * self.nodes[None, :]
        eta_k = eta[:, None] + pts[self.codes]
        ll_i = self.y[:, None] * log_expit(eta_k) + (1 - self.y[:, None]) * log_expit(-eta_k)
        ll_j = np.zeros((self.J, len(self.nodes)))
        np.add.at(ll_j, self.codes, ll_i)
        g_k = ll_j - pts ** 2 / (2 * s2)
        log_l = (np.log(math.sqrt(2) * scale) - 0.5 * math.log(2 * math.pi * s2)
                 + logsumexp(g_k + self.nodes[None, :] ** 2 + np.log(self.weights)[None, :], axis=1))
        return -float(log_l.sum())


def _hessian(f, x, step=1e-4):
    k = len(x)
    H = np.zeros((k, k))
    h = step * np.maximum(1.0, np.abs(x))
    for i in range(k):
        for j in range(i, k):
            e_i, e_j = np.eye(k)[i] * h[i], np.eye(k)[j] * h[j]
            H[i, j] = H[j, i] = (f(x + e_i + e_j) - f(x + e_i - e_j) - f(x - e_i + e_j) + f(x - e_i - e_j)) / (4 * h[i] * h[j])
    return H


def fit_missingness_model(merged, timepoint, covariates=MISSINGNESS_COVARIATES, n_nodes=15, max_iter=200):
    """Random-intercept (ward) logistic regression of the missing-utility
    indicator at ``timepoint`` on arm, baseline utility and the covariates."""
    if timepoint not in FOLLOW_UP:
        raise ValidationError(f"timepoint must be one of {FOLLOW_UP}")
    df = _frame(merged)
    cols = list(covariates)
    ok = df[cols].notna().all(axis=1).to_numpy()
    df = df.loc[ok]
    y = df[utility_col(timepoint)].isna().to_numpy(float)
    X = np.column_stack([np.ones(len(df))] + [df[c].to_numpy(float) for c in cols])
    _, codes = np.unique(df["ward_id"].to_numpy(), return_inverse=True)
    model = _RandomInterceptLogit(y, X, codes, n_nodes)

    # plain logistic start
    start = optimize.minimize(lambda b: model.negloglik(np.append(b, LOG_SIGMA_MIN)), np.zeros(X.shape[1]),
                              method="BFGS", options={"gtol": 1e-8})
    theta0 = np.append(start.x, -1.0)
    bounds = [(None, None)] * X.shape[1] + [(LOG_SIGMA_MIN, 5.0)]
    res = optimize.minimize(model.negloglik, theta0, method="L-BFGS-B", jac="3-point", bounds=bounds,
                            options={"maxiter": max_iter, "ftol": 1e-15, "gtol": 1e-9})
    if not res.success and res.nit >= max_iter:
        raise ConvergenceError(f"missingness model did not converge in {max_iter} iterations", last_iterate=res.x)
    theta = res.x
    at_boundary = theta[-1] <= LOG_SIGMA_MIN + 1e-6
    if at_boundary:
        # sigma on its lower bound: refine the fixed effects with sigma = 0
        beta = optimize.minimize(lambda b: model.negloglik(np.append(b, LOG_SIGMA_MIN)), theta[:-1],
                                 method="BFGS", options={"gtol": 1e-10}).x
        theta = np.append(beta, LOG_SIGMA_MIN)
        H = _hessian(lambda b: model.negloglik(np.append(b, LOG_SIGMA_MIN)), beta)
        cov = np.linalg.inv(H)
        sigma2 = 0.0
    else:
        H = _hessian(model.negloglik, theta)
        cov = np.linalg.inv(H)[:-1, :-1]
        sigma2 = math.exp(2 * theta[-1])
    se = np.sqrt(np.diag(cov))
    return MissingnessModelFit(timepoint, ("const", *cols), theta[:-1], se, sigma2, -model.negloglik(theta),
                               len(y), int(codes.max() + 1), int(res.nit))

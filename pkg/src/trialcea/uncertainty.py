"""Rubin pooling across imputations, ward-level bootstrap within each imputed
dataset, pooled cost-effectiveness clouds and acceptability curves."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import BootstrapError, ValidationError
from .estimation import (
    CovariateSpec, adjusted_difference, design_matrix, fit_glm_log, fit_lmm_batch, fit_lmm_reml, fit_sur,
    singular_mask, stats_from_blocks, ward_blocks,
)

BOOTSTRAP_TAG = 2
REPORT_THRESHOLDS = (15000.0, 20000.0, 30000.0)


# ---------------------------------------------------------------- Rubin's rules

@dataclass(frozen=True)
class PooledEstimate:
    point: float
    within: float
    between: float
    total: float
    df: float
    ci: tuple
    m: int

    @property
    def se(self):
        return math.sqrt(self.total)

    def to_dict(self):
        return {"estimate": self.point, "se": self.se, "ci_low": self.ci[0], "ci_high": self.ci[1],
                "df": self.df if math.isfinite(self.df) else None,
                "within_var": self.within, "between_var": self.between, "total_var": self.total, "m": self.m}


def barnard_rubin_df(m, within, between, complete_df=math.inf):
    total = within + (1 + 1 / m) * between
    lam = (1 + 1 / m) * between / total if total > 0 else 0.0
    df_old = (m - 1) / lam ** 2 if lam > 0 else math.inf
    if not math.isfinite(complete_df):
        return df_old
    df_obs = (complete_df + 1) / (complete_df + 3) * complete_df * (1 - lam)
    if not math.isfinite(df_old):
        return df_obs
    return df_old * df_obs / (df_old + df_obs)


def rubin_pool(estimates, variances, complete_df=math.inf, level=0.95) -> PooledEstimate:
    q = np.asarray(estimates, float)
    u = np.asarray(variances, float)
    m = len(q)
    if m < 2 or len(u) != m:
        raise ValidationError("Rubin pooling needs M >= 2 paired estimates and variances")
    if (u < 0).any():
        raise ValidationError("variances must be non-negative")
    # identical estimates: keep the point exact and B exactly zero
    same = bool(np.all(q == q[0]))
    point = float(q[0]) if same else float(q.mean())
    within = float(u.mean())
    between = 0.0 if same else float(q.var(ddof=1))
    total = within + (1 + 1 / m) * between
    df = barnard_rubin_df(m, within, between, complete_df)
    crit = stats.t.ppf(0.5 + level / 2, df) if math.isfinite(df) else stats.norm.ppf(0.5 + level / 2)
    half = crit * math.sqrt(total)
    return PooledEstimate(point, within, between, total, df, (point - half, point + half), m)


# ---------------------------------------------------------------- ward bootstrap

def replicate_rng(seed, *key):
    return np.random.default_rng(np.random.SeedSequence([int(seed), BOOTSTRAP_TAG, *map(int, key)]))


def resample_wards(arm_groups, rng):
    """One draw: within each arm, as many wards as it has, with replacement.
    ``arm_groups`` lists arrays of ward (block) indices per arm."""
    return np.concatenate([g[rng.integers(0, len(g), len(g))] for g in arm_groups])


def _arm_groups(frame, labels):
    ward_arm = frame.groupby("ward_id")["arm"].agg(["min", "max"])
    if (ward_arm["min"] != ward_arm["max"]).any():
        bad = ward_arm.index[ward_arm["min"] != ward_arm["max"]][0]
        raise ValidationError(f"ward {bad!r} contains patients from both arms")
    arms = ward_arm.loc[labels, "min"].to_numpy()
    groups = [np.flatnonzero(arms == a) for a in (0, 1)]
    if min(len(g) for g in groups) < 2:
        raise ValidationError("bootstrap needs at least 2 wards per arm")
    return groups


def _draw_all(groups, B, seed, key, is_singular):
    draws, redraws = [], 0
    for b in range(B):
        rng = replicate_rng(seed, *key, b)
        d = resample_wards(groups, rng)
        while is_singular(d):
            redraws += 1
            if redraws > 10 * B:
                raise BootstrapError(f"more than {10 * B} singular resamples")
            d = resample_wards(groups, rng)
        draws.append(d)
    return np.array(draws), redraws


def cluster_bootstrap(frame, B, seed, spec: CovariateSpec = CovariateSpec(), key=(0,), estimator="lmm",
                      cost_family="gaussian", chunk=250):
    """(dC, dE) for B ward-resampled replicates of one completed dataset.

    Replicate b draws from its own stream seeded by (seed, *key, b), so the
    output depends only on (data, B, seed, key).  Resamples with a singular
    design are redrawn from the same stream; ``redraws`` counts them.
    Returns ``(points (B, 2), redraws)``.
    """
    if B < 1:
        raise ValidationError("B must be >= 1")
    Xc, _ = design_matrix(frame, spec.cost)
    Xq, _ = design_matrix(frame, spec.qaly)
    yc, yq = frame["total_cost"].to_numpy(float), frame["qaly"].to_numpy(float)
    wards = frame["ward_id"].to_numpy()
    labels, cblocks = ward_blocks(yc, Xc, wards)
    _, qblocks = ward_blocks(yq, Xq, wards)
    groups = _arm_groups(frame, labels)

    def singular(d):
        return bool(singular_mask(cblocks[3][d].sum(axis=0)) or singular_mask(qblocks[3][d].sum(axis=0)))

    draws, redraws = _draw_all(groups, B, seed, key, singular)
    arm = 1
    if estimator == "lmm" and cost_family == "gaussian":
        out = np.empty((B, 2))
        for s in range(0, B, chunk):
            d = draws[s:s + chunk]
            out[s:s + chunk, 0] = fit_lmm_batch(stats_from_blocks(cblocks, d))[1][:, arm]
            out[s:s + chunk, 1] = fit_lmm_batch(stats_from_blocks(qblocks, d))[1][:, arm]
        return out, redraws

    # general path: rebuild patient rows, relabel duplicated wards
    rows_of = [np.flatnonzero(wards == w) for w in labels]
    out = np.empty((B, 2))
    for b, d in enumerate(draws):
        idx = np.concatenate([rows_of[j] for j in d])
        cl = np.concatenate([np.full(len(rows_of[j]), i) for i, j in enumerate(d)])
        dc, de, _ = difference_pair(yc[idx], yq[idx], Xc[idx], Xq[idx], cl, estimator, cost_family)
        out[b] = dc.difference, de.difference
    return out, redraws


def difference_pair(yc, yq, Xc, Xq, cluster, estimator="lmm", cost_family="gaussian", arm=1):
    """Adjusted cost and QALY differences for one dataset under ``estimator``.
    The third element is the covariance between the two differences (zero
    when the equations are fitted separately)."""
    if estimator == "sur":
        fit = fit_sur(yc, yq, Xc, Xq, cluster)
        dc = adjusted_difference(fit.equation(0), Xc, arm)
        de = adjusted_difference(fit.equation(1), Xq, arm)
        return dc, de, fit.cross_cov(arm, arm)
    if estimator != "lmm":
        raise ValidationError(f"unknown estimator {estimator!r}")
    if cost_family == "gamma":
        dc = adjusted_difference(fit_glm_log(yc, Xc, cluster), Xc, arm)
    else:
        dc = adjusted_difference(fit_lmm_reml(yc, Xc, cluster), Xc, arm)
    de = adjusted_difference(fit_lmm_reml(yq, Xq, cluster), Xq, arm)
    return dc, de, 0.0


# ---------------------------------------------------------------- clouds and CEACs

@dataclass
class CeCloud:
    m: np.ndarray
    b: np.ndarray
    delta_c: np.ndarray
    delta_e: np.ndarray
    seed: int = 0
    scenario: int = 1
    method: str = "ward bootstrap within each imputed dataset, pooled"

    def __len__(self):
        return len(self.delta_c)

    def points(self):
        return np.column_stack([self.delta_e, self.delta_c])


def pool_clouds(per_imputation, seed=0, scenario=1) -> CeCloud:
    """Concatenate per-imputation bootstrap lists, tagged by (m, b)."""
    arrays = [np.asarray(p, float).reshape(-1, 2) for p in per_imputation]
    if not arrays:
        raise ValidationError("no bootstrap clouds to pool")
    B = len(arrays[0])
    if any(len(a) != B for a in arrays):
        raise ValidationError("every imputation must contribute the same number of replicates")
    pts = np.vstack(arrays)
    if not np.isfinite(pts).all():
        raise ValidationError("bootstrap cloud contains non-finite values")
    m = np.repeat(np.arange(len(arrays)), B)
    b = np.tile(np.arange(B), len(arrays))
    return CeCloud(m, b, pts[:, 0], pts[:, 1], seed, scenario)


@dataclass(frozen=True)
class Ceac:
    thresholds: np.ndarray
    probabilities: np.ndarray

    def at(self, lam):
        i = np.flatnonzero(np.isclose(self.thresholds, lam))
        if not len(i):
            raise KeyError(lam)
        return float(self.probabilities[i[0]])


def threshold_grid(start=0.0, stop=50000.0, step=500.0, include=REPORT_THRESHOLDS):
    grid = np.arange(start, stop + step / 2, step)
    return np.unique(np.concatenate([grid, np.asarray(include, float)]))


def ceac(cloud: CeCloud, thresholds) -> Ceac:
    """Share of cloud points with positive net monetary benefit at each threshold."""
    if len(cloud) == 0:
        raise ValidationError("empty cloud")
    lam = np.asarray(thresholds, float)
    if len(lam) > 1 and not (np.diff(lam) > 0).all():
        raise ValidationError("thresholds must be strictly increasing")
    nmb = lam[:, None] * cloud.delta_e[None, :] - cloud.delta_c[None, :]
    return Ceac(lam, (nmb > 0).mean(axis=1))


def quadrant_summary(cloud: CeCloud):
    de, dc = cloud.delta_e, cloud.delta_c
    n = len(cloud)
    q = {
        "NE": (de > 0) & (dc > 0),
        "SE": (de > 0) & (dc < 0),
        "SW": (de < 0) & (dc < 0),
        "NW": (de < 0) & (dc > 0),
    }
    out = {k: float(v.sum() / n) for k, v in q.items()}
    out["on_axis"] = float(1.0 - sum(v.sum() for v in q.values()) / n)
    return out


def ce_plane_export(clouds, path, extra=None):
    """CSV of (scenario, m, b, delta_e, delta_c) plus a JSON sidecar with the
    share of points per quadrant (SE = cheaper and more effective)."""
    clouds = [clouds] if isinstance(clouds, CeCloud) else list(clouds)
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario", "m", "b", "delta_e", "delta_c"])
        for c in clouds:
            for m, b, de, dc in zip(c.m, c.b, c.delta_e, c.delta_c):
                w.writerow([c.scenario, int(m), int(b), repr(float(de)), repr(float(dc))])
    sidecar = path.with_suffix(".quadrants.json")
    summary = {"quadrants": {str(c.scenario): quadrant_summary(c) for c in clouds},
               "method": clouds[0].method, "seed": clouds[0].seed, **(extra or {})}
    sidecar.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path, sidecar


def write_ceac_csv(curve: Ceac, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "probability"])
        for lam, p in zip(curve.thresholds, curve.probabilities):
            w.writerow([repr(float(lam)), repr(float(p))])
    return Path(path)

"""Adjusted-difference estimators: random-intercept linear mixed model (REML),
two-equation SUR by feasible GLS with cluster-robust covariance, and a
log-link quasi-gamma GLM for skewed costs.

The mixed model works on per-cluster sufficient statistics, so the same code
fits a single dataset or a whole batch of cluster-bootstrap replicates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import optimize, stats

from .errors import ConvergenceError, RankDeficiencyError, ValidationError

COST_COVARIATES = ("arm", "specialty_elderly", "baseline_readm_rate", "pct_over_75", "sex_male")
QALY_COVARIATES = COST_COVARIATES + ("u_0",)

LOG_GAMMA_BOUNDS = (-18.0, 10.0)
GRID_POINTS = 29
XATOL = 1e-10


@dataclass(frozen=True)
class CovariateSpec:
    cost: tuple = COST_COVARIATES
    qaly: tuple = QALY_COVARIATES

    def __post_init__(self):
        if "arm" not in self.cost or "arm" not in self.qaly:
            raise ValidationError("arm indicator must enter both equations")
        if set(self.qaly) - set(self.cost) != {"u_0"} or not set(self.cost) <= set(self.qaly):
            raise ValidationError("QALY covariates must be the cost covariates plus baseline utility u_0")

    def for_endpoint(self, endpoint):
        return self.cost if endpoint == "cost" else self.qaly


def design_matrix(frame, covariates):
    names = ("const", *covariates)
    X = np.column_stack([np.ones(len(frame))] + [frame[c].to_numpy(float) for c in covariates])
    return X, names


def check_full_rank(X, names=None):
    names = names or [f"x{j}" for j in range(X.shape[1])]
    if np.linalg.matrix_rank(X) == X.shape[1]:
        return
    keep, bad = [], []
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, keep + [j]]) == len(keep) + 1:
            keep.append(j)
        else:
            bad.append(names[j])
    raise RankDeficiencyError(bad)


# ---------------------------------------------------------------- OLS and sandwiches

@dataclass
class OlsFit:
    coef: np.ndarray
    resid: np.ndarray
    cov: np.ndarray
    bread: np.ndarray
    sigma2: float
    names: tuple = ()


def ols(y, X, names=None):
    y, X = np.asarray(y, float), np.asarray(X, float)
    check_full_rank(X, names)
    XtX_inv = np.linalg.inv(X.T @ X)
    coef = XtX_inv @ (X.T @ y)
    resid = y - X @ coef
    sigma2 = resid @ resid / (len(y) - X.shape[1])
    return OlsFit(coef, resid, sigma2 * XtX_inv, XtX_inv, sigma2, tuple(names or ()))


def sandwich_cov(scores, bread, clusters=None, k=None):
    """Cluster-robust sandwich ``c * bread @ meat @ bread``.

    Finite-sample factor c = G/(G-1) * (N-1)/(N-k); with every observation in
    its own cluster this reduces to the HC1 factor N/(N-k).
    """
    scores = np.asarray(scores, float)
    n = scores.shape[0]
    k = bread.shape[0] if k is None else k
    if clusters is None:
        summed, G = scores, n
    else:
        _, codes = np.unique(np.asarray(clusters), return_inverse=True)
        G = codes.max() + 1
        summed = np.zeros((G, scores.shape[1]))
        np.add.at(summed, codes, scores)
    if G < 2:
        raise ValidationError("cluster-robust covariance needs at least 2 clusters")
    meat = summed.T @ summed
    c = G / (G - 1) * (n - 1) / (n - k)
    return c * bread @ meat @ bread


def robust_cov(X, resid, clusters=None):
    X = np.asarray(X, float)
    bread = np.linalg.inv(X.T @ X)
    return sandwich_cov(X * np.asarray(resid, float)[:, None], bread, clusters)


# ---------------------------------------------------------------- random-intercept LMM

@dataclass
class ClusterStats:
    """Sufficient statistics of (y, X) for a random-intercept model.  Arrays
    may carry a leading batch axis (one entry per bootstrap replicate)."""

    n: np.ndarray     # (..., J) cluster sizes
    S: np.ndarray     # (..., J, p) per-cluster column sums of X
    T: np.ndarray     # (..., J) per-cluster sums of y
    XtX: np.ndarray   # (..., p, p)
    Xty: np.ndarray   # (..., p)
    yty: np.ndarray   # (...)

    @property
    def N(self):
        return self.n.sum(axis=-1)

    @property
    def p(self):
        return self.XtX.shape[-1]

    def batched(self):
        if self.XtX.ndim == 3:
            return self
        return ClusterStats(self.n[None], self.S[None], self.T[None], self.XtX[None], self.Xty[None],
                            np.asarray(self.yty)[None])

    def take(self, idx):
        return ClusterStats(self.n[idx], self.S[idx], self.T[idx], self.XtX[idx], self.Xty[idx], self.yty[idx])


def ward_blocks(y, X, cluster):
    """Per-cluster pieces (n_j, s_j, t_j, X_j'X_j, X_j'y_j, y_j'y_j) plus the
    sorted cluster labels; summing pieces over a resample gives ClusterStats."""
    y, X = np.asarray(y, float), np.asarray(X, float)
    labels, codes = np.unique(np.asarray(cluster), return_inverse=True)
    J, p = len(labels), X.shape[1]
    n = np.bincount(codes, minlength=J).astype(float)
    S = np.zeros((J, p))
    np.add.at(S, codes, X)
    T = np.bincount(codes, weights=y, minlength=J)
    XtX = np.zeros((J, p, p))
    np.add.at(XtX, codes, X[:, :, None] * X[:, None, :])
    Xty = np.zeros((J, p))
    np.add.at(Xty, codes, X * y[:, None])
    yty = np.bincount(codes, weights=y * y, minlength=J)
    return labels, (n, S, T, XtX, Xty, yty)


def cluster_stats(y, X, cluster) -> ClusterStats:
    _, (n, S, T, XtX, Xty, yty) = ward_blocks(y, X, cluster)
    y, X = np.asarray(y, float), np.asarray(X, float)
    return ClusterStats(n, S, T, X.T @ X, X.T @ y, float(y @ y))


def stats_from_blocks(blocks, draws) -> ClusterStats:
    """Batch of ClusterStats for resamples ``draws`` (R, J) of block indices."""
    n, S, T, XtX, Xty, yty = blocks
    return ClusterStats(n[draws], S[draws], T[draws], XtX[draws].sum(axis=1), Xty[draws].sum(axis=1),
                        yty[draws].sum(axis=1))


def _terms(gamma, st: ClusterStats):
    """Profiled REML pieces for batch ``st`` at variance ratios ``gamma`` (R,)."""
    g = np.asarray(gamma, float)[:, None]
    denom = 1.0 + st.n * g
    w = g / denom
    WS = st.S * w[..., None]
    A = st.XtX - np.matmul(np.swapaxes(WS, -1, -2), st.S)
    b = st.Xty - np.matmul((w * st.T)[:, None, :], st.S)[:, 0, :]
    L = np.linalg.cholesky(A)
    beta = np.linalg.solve(A, b[..., None])[..., 0]
    q = st.yty - np.sum(w * st.T ** 2, axis=-1) - np.sum(b * beta, axis=-1)
    dof = st.N - st.p
    logdet_A = 2.0 * np.log(np.diagonal(L, axis1=-2, axis2=-1)).sum(axis=-1)
    crit = dof * np.log(q / dof) + np.log(denom).sum(axis=-1) + logdet_A + dof * (1.0 + math.log(2 * math.pi))
    return crit, beta, q, A, denom


def reml_criterion(gamma, st: ClusterStats):
    """-2 x profiled REML log-likelihood at variance ratio gamma = s2_u / s2_e."""
    st1 = st.batched()
    gam = np.atleast_1d(np.asarray(gamma, float))
    big = ClusterStats(*(np.broadcast_to(a, (len(gam),) + a.shape[1:]) for a in
                         (st1.n, st1.S, st1.T, st1.XtX, st1.Xty, st1.yty)))
    crit = _terms(gam, big)[0]
    return crit if np.ndim(gamma) else float(crit[0])


def reml_gradient(gamma, st: ClusterStats):
    """Analytic d(-2 l_R)/d gamma."""
    st1 = st.batched()
    _, beta, q, A, denom = _terms(np.array([gamma], float), st1)
    Ainv = np.linalg.inv(A[0])
    n, S, T, d = st1.n[0], st1.S[0], st1.T[0], denom[0]
    e = T - S @ beta[0]
    quad = np.einsum("jk,kl,jl->j", S, Ainv, S)
    dof = st1.N[0] - st1.p
    return float(np.sum(n / d - quad / d ** 2) - dof / q[0] * np.sum(e ** 2 / d ** 2))


def _golden(st: ClusterStats, lo, hi, xatol=XATOL):
    """Vectorised golden-section minimisation of the criterion over log gamma."""
    invphi = (math.sqrt(5) - 1) / 2
    a, b = lo.astype(float), hi.astype(float)
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = _terms(np.exp(c), st)[0], _terms(np.exp(d), st)[0]
    width = float(np.max(b - a))
    n_iter = max(1, int(math.ceil(math.log(xatol / width) / math.log(invphi))))
    for _ in range(n_iter):
        left = fc < fd
        a, b = np.where(left, a, c), np.where(left, d, b)
        keep_x, keep_f = np.where(left, c, d), np.where(left, fc, fd)
        probe = np.where(left, b - invphi * (b - a), a + invphi * (b - a))
        fp = _terms(np.exp(probe), st)[0]
        c, fc = np.where(left, probe, keep_x), np.where(left, fp, keep_f)
        d, fd = np.where(left, keep_x, probe), np.where(left, keep_f, fp)
    return np.where(fc < fd, c, d)


def _repeat(st: ClusterStats, k):
    return ClusterStats(*(np.repeat(a, k, axis=0) for a in (st.n, st.S, st.T, st.XtX, st.Xty, st.yty)))


def _search(st: ClusterStats):
    """Grid bracket, golden section, boundary comparison.  Returns
    (log_gamma, gamma, boundary) per batch entry."""
    R = st.XtX.shape[0]
    grid = np.linspace(*LOG_GAMMA_BOUNDS, GRID_POINTS)
    f = _terms(np.tile(np.exp(grid), R), _repeat(st, GRID_POINTS))[0].reshape(R, GRID_POINTS)
    k = f.argmin(axis=1)
    lo, hi = grid[np.maximum(k - 1, 0)], grid[np.minimum(k + 1, GRID_POINTS - 1)]
    x = _golden(st, lo, hi)
    f_x = _terms(np.exp(x), st)[0]
    f_0 = _terms(np.zeros(R), st)[0]
    boundary = f_0 <= f_x
    return x, np.where(boundary, 0.0, np.exp(x)), boundary, (lo, hi)


def singular_mask(XtX, tol=1e-10):
    """True where a (batch of) cross-product matrices is numerically singular."""
    XtX = np.asarray(XtX, float)
    d = np.sqrt(np.diagonal(XtX, axis1=-2, axis2=-1))
    d = np.where(d > 0, d, 1.0)
    corr = XtX / d[..., :, None] / d[..., None, :]
    return np.linalg.eigvalsh(corr)[..., 0] < tol


@dataclass
class LmmFit:
    coef: np.ndarray
    cov: np.ndarray
    sigma2_u: float
    sigma2_e: float
    gamma: float
    reml_loglik: float
    boundary: bool
    converged: bool
    gradient: float
    n: int
    n_clusters: int
    names: tuple = ()
    link: str = "identity"

    @property
    def p(self):
        return len(self.coef)

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov))

    @property
    def df_resid(self):
        return self.n - self.p

    def summary(self):
        return {
            "coefficients": dict(zip(self.names, map(float, self.coef))),
            "se": dict(zip(self.names, map(float, self.se))),
            "sigma2_u": self.sigma2_u, "sigma2_e": self.sigma2_e,
            "reml_loglik": self.reml_loglik, "boundary": self.boundary, "converged": self.converged,
            "n": self.n, "n_clusters": self.n_clusters,
        }


def fit_lmm_stats(st: ClusterStats, names=()) -> LmmFit:
    st1 = st.batched()
    x, gamma, boundary, (lo, hi) = _search(st1)
    x, gamma, boundary = float(x[0]), float(gamma[0]), bool(boundary[0])
    if not boundary:
        # polish on the analytic gradient so the stationarity check is sharp
        h = lambda z: math.exp(z) * reml_gradient(math.exp(z), st1)
        a, b = float(lo[0]), float(hi[0])
        if h(a) < 0 < h(b):
            x = optimize.brentq(h, a, b, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
            gamma = math.exp(x)
    crit, beta, q, A, _ = _terms(np.array([gamma]), st1)
    dof = float(st1.N[0] - st1.p)
    sigma2_e = max(float(q[0]), 0.0) / dof
    grad = 0.0 if boundary else gamma * reml_gradient(gamma, st1)
    return LmmFit(
        coef=beta[0], cov=sigma2_e * np.linalg.inv(A[0]), sigma2_u=gamma * sigma2_e, sigma2_e=sigma2_e,
        gamma=gamma, reml_loglik=-0.5 * float(crit[0]), boundary=boundary,
        converged=boundary or abs(grad) < 1e-6, gradient=grad, n=int(st1.N[0]),
        n_clusters=int(np.count_nonzero(st1.n[0])), names=tuple(names),
    )


def fit_lmm_reml(y, X, cluster, names=None) -> LmmFit:
    """Gaussian identity-link model with one random intercept per cluster.

    REML is profiled to one dimension in the variance ratio and maximised over
    its logarithm; a boundary solution (no between-cluster variance) is
    returned with ``sigma2_u = 0`` rather than treated as a failure.
    """
    y, X = np.asarray(y, float), np.asarray(X, float)
    if len(y) != len(X) or len(y) != len(cluster):
        raise ValidationError("y, X and cluster must have the same number of rows")
    if len(np.unique(np.asarray(cluster))) < 2:
        raise ValidationError("mixed model needs at least 2 clusters")
    names = tuple(names) if names is not None else tuple(f"x{j}" for j in range(X.shape[1]))
    check_full_rank(X, names)
    return fit_lmm_stats(cluster_stats(y, X, cluster), names)


def fit_lmm_batch(st: ClusterStats):
    """Fixed effects and variance ratios for a batch of resampled datasets."""
    _, gamma, _, _ = _search(st)
    return gamma, _terms(gamma, st)[1]


# ---------------------------------------------------------------- SUR

@dataclass
class Equation:
    coef: np.ndarray
    cov: np.ndarray
    names: tuple = ()
    link: str = "identity"
    df_resid: int = 0


@dataclass
class SurFit:
    coef: np.ndarray            # stacked (k1 + k2,)
    cov: np.ndarray             # cluster-robust covariance of the stacked coefficients
    sigma: np.ndarray           # 2x2 residual covariance
    k1: int
    n: int
    n_clusters: int
    iterations: int
    converged: bool
    names: tuple = ((), ())

    def equation(self, i) -> Equation:
        sl = slice(0, self.k1) if i == 0 else slice(self.k1, len(self.coef))
        return Equation(self.coef[sl], self.cov[sl, sl], self.names[i], "identity", self.n - (sl.stop - sl.start))

    def cross_cov(self, j1, j2):
        """Covariance between coefficient j1 of equation 0 and j2 of equation 1."""
        return float(self.cov[j1, self.k1 + j2])


def fit_sur(y_cost, y_qaly, X_cost, X_qaly, cluster, names=((), ()), tol=1e-8, max_iter=50) -> SurFit:
    """Iterated feasible GLS for two equations; coefficient covariance by the
    cluster-robust sandwich over the stacked system."""
    y1, y2 = np.asarray(y_cost, float), np.asarray(y_qaly, float)
    X1, X2 = np.asarray(X_cost, float), np.asarray(X_qaly, float)
    n, k1, k2 = len(y1), X1.shape[1], X2.shape[1]
    if not (len(y2) == len(X1) == len(X2) == len(cluster) == n):
        raise ValidationError("SUR equations must be aligned on the same patients")
    if len(np.unique(np.asarray(cluster))) < 2:
        raise ValidationError("SUR needs at least 2 clusters")
    check_full_rank(X1, names[0] or None)
    check_full_rank(X2, names[1] or None)

    X11, X12, X22 = X1.T @ X1, X1.T @ X2, X2.T @ X2
    coef = np.concatenate([ols(y1, X1).coef, ols(y2, X2).coef])
    converged, it = False, 0
    for it in range(1, max_iter + 1):
        u1, u2 = y1 - X1 @ coef[:k1], y2 - X2 @ coef[k1:]
        sigma = np.array([[u1 @ u1, u1 @ u2], [u1 @ u2, u2 @ u2]]) / n
        # perfectly correlated residuals make the GLS weights meaningless
        if not (sigma[0, 0] > 0 and sigma[1, 1] > 0 and sigma[0, 1] ** 2 < (1 - 1e-10) * sigma[0, 0] * sigma[1, 1]):
            raise ValidationError("SUR residual covariance is singular")
        (a, b), (_, c) = np.linalg.inv(sigma)
        M = np.block([[a * X11, b * X12], [b * X12.T, c * X22]])
        r = np.concatenate([X1.T @ (a * y1 + b * y2), X2.T @ (b * y1 + c * y2)])
        try:
            new = np.linalg.solve(M, r)
        except np.linalg.LinAlgError:
            raise ValidationError("singular stacked SUR system") from None
        step = np.max(np.abs(new - coef) / (1.0 + np.abs(coef)))
        coef = new
        if step < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(f"SUR did not converge in {max_iter} iterations", last_iterate=coef)

    u1, u2 = y1 - X1 @ coef[:k1], y2 - X2 @ coef[k1:]
    sigma = np.array([[u1 @ u1, u1 @ u2], [u1 @ u2, u2 @ u2]]) / n
    (a, b), (_, c) = np.linalg.inv(sigma)
    M = np.block([[a * X11, b * X12], [b * X12.T, c * X22]])
    scores = np.hstack([X1 * (a * u1 + b * u2)[:, None], X2 * (b * u1 + c * u2)[:, None]])
    cov = sandwich_cov(scores, np.linalg.inv(M), cluster, k=max(k1, k2))
    return SurFit(coef, cov, sigma, k1, n, len(np.unique(np.asarray(cluster))), it, converged, names)


# ---------------------------------------------------------------- log-link GLM

def fit_glm_log(y, X, cluster, names=None, tol=1e-10, max_iter=200) -> Equation:
    """Quasi-likelihood GLM with log link and gamma variance (V = mu^2),
    cluster-robust covariance.  Zero outcomes are allowed."""
    y, X = np.asarray(y, float), np.asarray(X, float)
    check_full_rank(X, names)
    if y.mean() <= 0:
        raise ValidationError("log-link cost model needs a positive mean outcome")
    beta = np.zeros(X.shape[1])
    beta[0] = math.log(y.mean())
    XtX_inv = np.linalg.inv(X.T @ X)
    for _ in range(max_iter):
        eta = X @ beta
        mu = np.exp(eta)
        # gamma variance + log link: IRLS weights are all one
        new = XtX_inv @ (X.T @ (eta + (y - mu) / mu))
        if np.max(np.abs(new - beta)) < tol:
            beta = new
            break
        beta = new
    else:
        raise ConvergenceError("log-link GLM did not converge", last_iterate=beta)
    mu = np.exp(X @ beta)
    cov = sandwich_cov(X * ((y - mu) / mu)[:, None], XtX_inv, cluster)
    return Equation(beta, cov, tuple(names or ()), "log", len(y) - X.shape[1])


# ---------------------------------------------------------------- adjusted differences

@dataclass(frozen=True)
class AdjustedDifference:
    mean_control: float
    mean_intervention: float
    difference: float
    se: float
    ci: tuple
    df: float = math.inf

    @property
    def variance(self):
        return self.se ** 2

    def to_dict(self):
        return {"adjusted_mean_control": self.mean_control, "adjusted_mean_intervention": self.mean_intervention,
                "difference": self.difference, "se": self.se, "ci_low": self.ci[0], "ci_high": self.ci[1]}


def adjusted_difference(fit, X, arm_index=1, level=0.95) -> AdjustedDifference:
    """Marginal standardisation: predict everyone under each arm at their own
    covariates and average.  Identity link: the difference is the arm
    coefficient and its SE comes straight from the model covariance."""
    X = np.asarray(X, float)
    X0, X1 = X.copy(), X.copy()
    X0[:, arm_index], X1[:, arm_index] = 0.0, 1.0
    z = stats.norm.ppf(0.5 + level / 2)
    if getattr(fit, "link", "identity") == "log":
        mu0, mu1 = np.exp(X0 @ fit.coef), np.exp(X1 @ fit.coef)
        m0, m1 = float(mu0.mean()), float(mu1.mean())
        grad = (mu1[:, None] * X1).mean(axis=0) - (mu0[:, None] * X0).mean(axis=0)
        diff, se = m1 - m0, float(math.sqrt(grad @ fit.cov @ grad))
    else:
        m0 = float((X0 @ fit.coef).mean())
        diff = float(fit.coef[arm_index])
        m1 = m0 + diff
        se = float(math.sqrt(fit.cov[arm_index, arm_index]))
    return AdjustedDifference(m0, m1, diff, se, (diff - z * se, diff + z * se), getattr(fit, "df_resid", math.inf))

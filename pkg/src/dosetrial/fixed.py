"""Fixed-effects estimation: OLS, IRLS logistic regression, Fisher's exact
test and likelihood-ratio tests."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.optimize import linprog
from scipy.special import expit

from .design import Design, ModelSpec, build_design
from .errors import (
    InsufficientRows,
    NonConvergence,
    NotNested,
    RankDeficient,
    RowMismatch,
    Separation,
)

Z95 = stats.norm.ppf(0.975)


def row_key(y) -> str:
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    return hashlib.blake2b(y.tobytes(), digest_size=12).hexdigest() + f":{len(y)}"


class CoefInference:
    """Wald inference shared by fixed and mixed fits (needs coef, cov, n,
    loglik, df_model)."""

    @property
    def aic(self):
        return -2.0 * self.loglik + 2.0 * self.df_model

    @property
    def bic(self):
        return -2.0 * self.loglik + self.df_model * math.log(self.n)

    @property
    def se(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None))

    @property
    def z(self):
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.coef / self.se

    @property
    def pvalues(self):
        return 2.0 * stats.norm.sf(np.abs(self.z))

    def conf_int(self, level=0.95):
        q = stats.norm.ppf(0.5 + level / 2)
        return np.column_stack([self.coef - q * self.se, self.coef + q * self.se])

    def coefficient(self, label):
        return float(self.coef[self.labels.index(label)])

    def coef_table(self):
        ci = self.conf_int()
        rows = []
        for i, lab in enumerate(self.labels or [f"x{i}" for i in range(len(self.coef))]):
            row = {"term": lab, "estimate": float(self.coef[i]), "se": float(self.se[i]),
                   "z": float(self.z[i]), "p": float(self.pvalues[i]),
                   "ci_lower": float(ci[i, 0]), "ci_upper": float(ci[i, 1])}
            if getattr(self, "family", "gaussian") == "binomial":
                row.update(odds_ratio=math.exp(self.coef[i]), or_lower=math.exp(ci[i, 0]),
                           or_upper=math.exp(ci[i, 1]))
            rows.append(row)
        return rows


@dataclass
class FittedFixedModel(CoefInference):
    coef: np.ndarray
    cov: np.ndarray
    loglik: float
    n: int
    p: int
    family: str
    df_model: int
    dispersion: float = 1.0
    labels: list = None
    design_info: object = None
    iterations: int = 0
    row_key: str = ""
    criterion: str = "ML"
    extra: dict = field(default_factory=dict)

    def odds_ratios(self):
        ci = self.conf_int()
        return np.exp(self.coef), np.exp(ci)

    def to_dict(self):
        rows = self.coef_table()
        out = {"kind": "fixed", "family": self.family, "n": self.n, "p": self.p,
               "df_model": self.df_model, "loglik": self.loglik, "aic": self.aic, "bic": self.bic,
               "dispersion": self.dispersion, "coefficients": rows,
               "cov": self.cov.tolist(), "iterations": self.iterations}
        if self.design_info is not None:
            out["design"] = self.design_info.to_dict()
        return out


def _check_shape(X, y):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be n x p and y length n")
    n, p = X.shape
    if n <= p:
        raise InsufficientRows(f"n={n} rows for p={p} coefficients")
    return X, y


def _qr_full_rank(X):
    Q, R = np.linalg.qr(X)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-10 * max(d.max(), 1e-300):
        raise RankDeficient("design matrix is rank deficient")
    return Q, R


def fit_ols(X, y, labels=None) -> FittedFixedModel:
    """Least squares via QR; Gaussian log-likelihood at the ML variance."""
    X, y = _check_shape(X, y)
    n, p = X.shape
    Q, R = _qr_full_rank(X)
    coef = np.linalg.solve(R, Q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    dispersion = rss / (n - p)
    Rinv = np.linalg.inv(R)
    cov = dispersion * (Rinv @ Rinv.T)
    if rss > 0:
        loglik = -0.5 * n * (math.log(2 * math.pi) + math.log(rss / n) + 1.0)
    else:
        loglik = math.inf
    return FittedFixedModel(coef=coef, cov=cov, loglik=loglik, n=n, p=p, family="gaussian",
                            df_model=p + 1, dispersion=dispersion, labels=labels,
                            row_key=row_key(y), extra={"rss": rss})


SEPARATION_CHECK_ETA = 10.0


def _separable(X, y) -> bool:
    """True when some d != 0 has sign(2y-1) * X d >= 0 for every row."""
    s = 2.0 * y - 1.0
    A = X * s[:, None]
    # maximise the summed margin inside a box; a positive optimum is a separating direction
    res = linprog(-A.sum(axis=0), A_ub=-A, b_ub=np.zeros(len(y)), bounds=[(-1, 1)] * X.shape[1],
                  method="highs")
    return bool(res.status == 0 and -res.fun > 1e-7 * np.abs(A).sum(axis=0).max())


def fit_logistic(X, y, labels=None, tol=1e-8, max_iter=100) -> FittedFixedModel:
    """Logistic regression by Newton-Raphson / IRLS with step halving.

    Raises :class:`Separation` when the likelihood has no finite maximiser.
    """
    X, y = _check_shape(X, y)
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("logistic response must be 0/1")
    n, p = X.shape
    _qr_full_rank(X)
    if y.min() == y.max():
        raise Separation("response is constant")

    def loglik(eta):
        # log(1+e^eta) computed stably
        return float(np.sum(y * eta - np.logaddexp(0.0, eta)))

    beta = np.zeros(p)
    eta = X @ beta
    ll = loglik(eta)
    for it in range(1, max_iter + 1):
        mu = expit(eta)
        score = X.T @ (y - mu)
        if np.max(np.abs(score)) < tol:
            break
        W = mu * (1.0 - mu)
        H = X.T @ (X * W[:, None])
        step = np.linalg.solve(H, score)
        t = 1.0
        for _ in range(30):
            cand = beta + t * step
            eta_c = X @ cand
            ll_c = loglik(eta_c)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(eta)) > 30.0:
            raise Separation("fitted probabilities reach 0/1: (quasi-)complete separation")
    else:
        raise NonConvergence(f"IRLS did not converge in {max_iter} iterations")
    # the score test stops early on a separated likelihood, so confirm large fits exactly
    if np.max(np.abs(eta)) > SEPARATION_CHECK_ETA and _separable(X, y):
        raise Separation("a direction in coefficient space separates the outcomes: "
                         "(quasi-)complete separation")
    mu = expit(eta)
    W = mu * (1.0 - mu)
    H = X.T @ (X * W[:, None])
    cov = np.linalg.inv(H)
    cov = 0.5 * (cov + cov.T)
    return FittedFixedModel(coef=beta, cov=cov, loglik=ll, n=n, p=p, family="binomial",
                            df_model=p, labels=labels, iterations=it, row_key=row_key(y),
                            extra={"max_abs_score": float(np.max(np.abs(score)))})


def fit_fixed(spec: ModelSpec, table, design: Design | None = None) -> FittedFixedModel:
    """Build the design for ``spec`` and fit OLS or logistic regression."""
    if spec.random:
        spec = spec.without_random()
    design = design or build_design(spec, table)
    if spec.family == "binomial":
        model = fit_logistic(design.X, design.y, labels=design.labels)
    else:
        model = fit_ols(design.X, design.y, labels=design.labels)
    model.design_info = design.info
    return model


# ---------------------------------------------------------------------------
# tests
# ---------------------------------------------------------------------------

def _log_hypergeom(x, r1, r2, c1):
    n = r1 + r2
    return (math.lgamma(r1 + 1) - math.lgamma(x + 1) - math.lgamma(r1 - x + 1)
            + math.lgamma(r2 + 1) - math.lgamma(c1 - x + 1) - math.lgamma(r2 - c1 + x + 1)
            - math.lgamma(n + 1) + math.lgamma(c1 + 1) + math.lgamma(n - c1 + 1))


def fisher_exact(table) -> float:
    """Two-sided Fisher exact p for a 2x2 table.

    Sums the probabilities of all tables with the observed margins whose
    probability does not exceed that of the observed table.
    """
    (a, b), (c, d) = np.asarray(table, dtype=np.int64).tolist()
    if min(a, b, c, d) < 0:
        raise ValueError("counts must be non-negative")
    r1, r2, c1 = a + b, c + d, a + c
    lo, hi = max(0, c1 - r2), min(r1, c1)
    if lo == hi:
        return 1.0
    xs = range(lo, hi + 1)
    logp = np.array([_log_hypergeom(x, r1, r2, c1) for x in xs])
    p_obs = logp[a - lo]
    # relative tolerance guards against ties lost to rounding
    mask = logp <= p_obs + 1e-7
    m = logp.max()
    total = np.exp(logp - m).sum()
    p = np.exp(logp[mask] - m).sum() / total
    return float(min(1.0, p))


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    df: int
    p: float


def lr_test(full, reduced) -> LRTResult:
    """Likelihood-ratio test of nested models fitted by ML on the same rows."""
    for m in (full, reduced):
        if getattr(m, "criterion", "ML") != "ML":
            raise NotNested("likelihood-ratio tests of fixed effects need ML fits")
    if full.n != reduced.n or full.row_key != reduced.row_key:
        raise RowMismatch("models were fitted on different rows")
    df = int(full.df_model - reduced.df_model)
    same = math.isclose(full.loglik, reduced.loglik, rel_tol=1e-10, abs_tol=1e-8)
    if df == 0 and same:
        # self-comparison
        return LRTResult(statistic=0.0, df=0, p=1.0)
    if df <= 0:
        raise NotNested(f"full model has {df} extra parameters")
    stat = 2.0 * (full.loglik - reduced.loglik)
    if stat < 0:
        if stat < -1e-6 * max(1.0, abs(full.loglik)):
            raise NotNested(f"reduced model fits better (statistic {stat:.3g})")
        stat = 0.0
    return LRTResult(statistic=float(stat), df=df, p=float(stats.chi2.sf(stat, df)))

"""Gaussian linear mixed-effects models fitted by REML or ML.

The random-effect covariance of each grouping factor is written as
``sigma^2 * T T'`` with ``T`` lower triangular (the relative Cholesky factor).
For fixed ``T`` the criterion is profiled over the fixed effects and the
residual variance by solving the penalised least-squares problem, so the
optimiser only sees the log-Cholesky entries of ``T``.

Two evaluation paths share one criterion:

* a single grouping factor uses per-group sufficient statistics, so a
  function evaluation costs O(groups) small dense operations independent of
  the number of rows;
* crossed grouping factors (intercepts only) use dense ``Z'Z``.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy import linalg, optimize

from .design import Design, ModelSpec, RandomBlock, build_design, dense_z
from .errors import (
    NonConvergence,
    NonNestedChain,
    NoRandomSlope,
    SingleObservationPerGroupWithSlope,
)
from .fixed import CoefInference, fit_fixed, lr_test, row_key

log = logging.getLogger(__name__)

LOG2PI = math.log(2.0 * math.pi)
BOUNDARY_REL_SD = 1e-4


# ---------------------------------------------------------------------------
# parameterisation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Param:
    """Layout of the relative factor ``T`` for one grouping factor."""

    q: int
    correlated: bool

    @property
    def size(self):
        if self.q == 1:
            return 1
        return 3 if self.correlated else 2

    def diag_index(self):
        """Positions (within this block's theta) of log-diagonal entries."""
        if self.q == 1:
            return [0]
        return [0, 2] if self.correlated else [0, 1]

    def to_T(self, theta, zero=()):
        """Map theta to T; entries listed in ``zero`` are exact zeros."""
        d = np.exp(np.asarray(theta, dtype=float))
        if self.q == 1:
            T = np.array([[0.0 if 0 in zero else d[0]]])
        elif self.correlated:
            # without an intercept variance the covariance entry is dropped too
            T = np.array([[0.0 if 0 in zero else d[0], 0.0],
                          [0.0 if 0 in zero else theta[1], 0.0 if 2 in zero else d[2]]])
        else:
            T = np.diag([0.0 if 0 in zero else d[0], 0.0 if 1 in zero else d[1]])
        return T

    def from_cov(self, C):
        """theta whose T T' approximates the relative covariance ``C``."""
        C = np.atleast_2d(np.asarray(C, dtype=float))
        floor = 1e-6
        if self.q == 1:
            return np.array([0.5 * math.log(max(C[0, 0], floor))])
        if not self.correlated:
            return 0.5 * np.log(np.maximum(np.diag(C), floor))
        w, V = np.linalg.eigh(0.5 * (C + C.T))
        C = (V * np.maximum(w, floor)) @ V.T
        L = np.linalg.cholesky(C)
        return np.array([math.log(L[0, 0]), L[1, 0], math.log(L[1, 1])])


# ---------------------------------------------------------------------------
# sufficient statistics and the profiled criterion
# ---------------------------------------------------------------------------

@dataclass
class _Stats:
    n: int
    p: int
    XtX: np.ndarray
    Xty: np.ndarray
    yty: float
    y_shift: float
    intercept_col: int | None
    blocks: list
    # block path
    ZtZ_g: np.ndarray = None
    ZtX_g: np.ndarray = None
    Zty_g: np.ndarray = None
    # dense path
    ZtZ: np.ndarray = None
    ZtX: np.ndarray = None
    Zty: np.ndarray = None


def _intercept_column(X):
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.all(col == 1.0):
            return j
    return None


def _sufficient_stats(X, y, blocks) -> _Stats:
    icol = _intercept_column(X)
    # centring y when an intercept is present keeps y'y of the same order as
    # the residual sum of squares
    shift = float(np.mean(y)) if icol is not None else 0.0
    yc = y - shift
    st = _Stats(n=len(y), p=X.shape[1], XtX=X.T @ X, Xty=X.T @ yc, yty=float(yc @ yc),
                y_shift=shift, intercept_col=icol, blocks=blocks)
    if len(blocks) == 1:
        b = blocks[0]
        G, q, p = b.n_levels, b.q, X.shape[1]
        codes = b.codes
        ZtZ = np.zeros((G, q, q))
        ZtX = np.zeros((G, q, p))
        Zty = np.zeros((G, q))
        for i in range(q):
            zi = b.Z[:, i]
            for j in range(q):
                ZtZ[:, i, j] = np.bincount(codes, weights=zi * b.Z[:, j], minlength=G)
            Zty[:, i] = np.bincount(codes, weights=zi * yc, minlength=G)
            for k in range(p):
                ZtX[:, i, k] = np.bincount(codes, weights=zi * X[:, k], minlength=G)
        st.ZtZ_g, st.ZtX_g, st.Zty_g = ZtZ, ZtX, Zty
    elif blocks:
        Z = dense_z(blocks)
        st.ZtZ = Z.T @ Z
        st.ZtX = Z.T @ X
        st.Zty = Z.T @ yc
    return st


@dataclass
class _Profile:
    deviance: float
    beta: np.ndarray
    r2: float
    logdet_L: float
    logdet_RX: float
    XtXs: np.ndarray
    sigma2: float
    u: object = None


def _profile(st: _Stats, Ts, reml: bool, want_u=False) -> _Profile:
    n, p = st.n, st.p
    if not st.blocks:
        XtXs, Xtys, cu_sq, logdet_L = st.XtX, st.Xty, 0.0, 0.0
        L = RZX = cu = None
    elif len(st.blocks) == 1:
        T = Ts[0]
        q = T.shape[0]
        M = np.einsum("ji,gjk,kl->gil", T, st.ZtZ_g, T) + np.eye(q)
        L = _SmallChol(M)
        cu = L.solve(st.Zty_g @ T)
        RZX = L.solve(np.einsum("ji,gjk->gik", T, st.ZtX_g))
        flat = RZX.reshape(-1, p)
        XtXs = st.XtX - flat.T @ flat
        Xtys = st.Xty - flat.T @ cu.reshape(-1)
        cu_sq = float(np.sum(cu * cu))
        logdet_L = L.logdet()
    else:
        lam = _lambda_dense(st.blocks, Ts)
        M = lam.T @ st.ZtZ @ lam
        M[np.diag_indices_from(M)] += 1.0
        L = np.linalg.cholesky(M)
        cu = linalg.solve_triangular(L, lam.T @ st.Zty, lower=True)
        RZX = linalg.solve_triangular(L, lam.T @ st.ZtX, lower=True)
        XtXs = st.XtX - RZX.T @ RZX
        Xtys = st.Xty - RZX.T @ cu
        cu_sq = float(cu @ cu)
        logdet_L = 2.0 * float(np.sum(np.log(np.diag(L))))
    LX = np.linalg.cholesky(XtXs)
    beta = linalg.cho_solve((LX, True), Xtys)
    r2 = st.yty - cu_sq - float(Xtys @ beta)
    r2 = max(r2, 1e-300)
    logdet_RX = 2.0 * float(np.sum(np.log(np.diag(LX))))
    if reml:
        dof = n - p
        dev = logdet_L + logdet_RX + dof * (1.0 + math.log(2.0 * math.pi * r2 / dof))
        sigma2 = r2 / dof
    else:
        dev = logdet_L + n * (1.0 + math.log(2.0 * math.pi * r2 / n))
        sigma2 = r2 / n
    prof = _Profile(deviance=dev, beta=beta, r2=r2, logdet_L=logdet_L, logdet_RX=logdet_RX,
                    XtXs=XtXs, sigma2=sigma2)
    if want_u and st.blocks:
        if len(st.blocks) == 1:
            prof.u = L.solve_t(cu - RZX @ beta)
        else:
            prof.u = linalg.solve_triangular(L.T, cu - RZX @ beta, lower=False)
    return prof


class _SmallChol:
    """Cholesky factors of a stack of 1x1 or 2x2 SPD blocks, in closed form.

    Batched LAPACK calls on thousands of tiny matrices are dominated by
    per-matrix overhead; the explicit formulas are plain array arithmetic.
    """

    def __init__(self, M):
        self.q = M.shape[1]
        self.l11 = np.sqrt(M[:, 0, 0])
        if self.q == 2:
            self.l21 = M[:, 1, 0] / self.l11
            self.l22 = np.sqrt(M[:, 1, 1] - self.l21 ** 2)
        elif self.q != 1:
            raise ValueError("blocks larger than 2x2 are not supported")

    @staticmethod
    def _b(v, ndim):
        return v.reshape(v.shape + (1,) * (ndim - 2))

    def solve(self, R):
        """L^-1 R for R of shape (G, q, ...)."""
        if self.q == 1:
            return R / self._b(self.l11, R.ndim + 1)
        l11 = self._b(self.l11, R.ndim)
        c1 = R[:, 0] / l11
        c2 = (R[:, 1] - self._b(self.l21, R.ndim) * c1) / self._b(self.l22, R.ndim)
        return np.stack([c1, c2], axis=1)

    def solve_t(self, V):
        """L^-T V for V of shape (G, q)."""
        if self.q == 1:
            return V / self.l11[:, None]
        u2 = V[:, 1] / self.l22
        u1 = (V[:, 0] - self.l21 * u2) / self.l11
        return np.stack([u1, u2], axis=1)

    def logdet(self):
        """log det of L L' (twice the log det of L)."""
        out = np.sum(np.log(self.l11))
        if self.q == 2:
            out += np.sum(np.log(self.l22))
        return 2.0 * float(out)


def _lambda_dense(blocks, Ts):
    mats = [np.kron(np.eye(b.n_levels), T) for b, T in zip(blocks, Ts)]
    return linalg.block_diag(*mats)


# ---------------------------------------------------------------------------
# fitted model
# ---------------------------------------------------------------------------

@dataclass
class VarianceComponent:
    grouping: str
    terms: tuple
    cov: np.ndarray  # absolute covariance of the random terms

    @property
    def sd(self):
        return np.sqrt(np.clip(np.diag(self.cov), 0, None))

    @property
    def corr(self):
        if len(self.terms) < 2:
            return None
        sd = self.sd
        if sd[0] == 0 or sd[1] == 0:
            return 0.0
        return float(np.clip(self.cov[0, 1] / (sd[0] * sd[1]), -1.0, 1.0))

    def to_dict(self):
        d = {"grouping": self.grouping, "terms": list(self.terms),
             "variance": [float(v) for v in np.diag(self.cov)]}
        if self.corr is not None:
            d["corr"] = self.corr
        return d


@dataclass
class FittedMixedModel(CoefInference):
    coef: np.ndarray
    cov: np.ndarray
    labels: list
    criterion: str
    loglik: float
    loglik_reml: float
    loglik_ml: float
    sigma2: float
    components: list
    blups: dict
    theta: np.ndarray
    n: int
    p: int
    df_model: int
    row_key: str
    diagnostics: dict = field(default_factory=dict)
    design_info: object = None
    family: str = "gaussian"

    @property
    def residual_variance(self):
        return self.sigma2

    def component(self, grouping) -> VarianceComponent:
        for c in self.components:
            if c.grouping == grouping:
                return c
        raise KeyError(grouping)

    def to_dict(self, include_blups=False):
        out = {"kind": "mixed", "family": "gaussian", "criterion": self.criterion,
               "n": self.n, "p": self.p, "df_model": self.df_model,
               "loglik": self.loglik, "loglik_reml": self.loglik_reml,
               "loglik_ml": self.loglik_ml, "aic": self.aic, "bic": self.bic,
               "residual_variance": self.sigma2,
               "variance_components": [c.to_dict() for c in self.components],
               "coefficients": self.coef_table(), "cov": self.cov.tolist(),
               "convergence": _jsonable_diag(self.diagnostics)}
        if self.design_info is not None:
            out["design"] = self.design_info.to_dict()
        if include_blups:
            out["blups"] = {g: df.reset_index().to_dict(orient="list")
                            for g, df in self.blups.items()}
        return out


def _jsonable_diag(d):
    out = {}
    for k, v in d.items():
        if isinstance(v, np.ndarray):
            v = v.tolist()
        elif isinstance(v, (np.floating, np.integer)):
            v = v.item()
        out[k] = v
    return out


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------

class _Objective:
    def __init__(self, st, params, reml):
        self.st, self.params, self.reml = st, params, reml
        self.offsets = np.cumsum([0] + [pp.size for pp in params])
        self.zero = [set() for _ in params]
        self.evals = 0

    @property
    def size(self):
        return int(self.offsets[-1])

    def Ts(self, theta):
        return [pp.to_T(theta[self.offsets[i]:self.offsets[i + 1]], self.zero[i])
                for i, pp in enumerate(self.params)]

    def __call__(self, theta):
        self.evals += 1
        try:
            return _profile(self.st, self.Ts(theta), self.reml).deviance
        except np.linalg.LinAlgError:
            return np.inf

    def free_mask(self):
        mask = np.ones(self.size, dtype=bool)
        for i, pp in enumerate(self.params):
            for j in self.zero[i]:
                mask[self.offsets[i] + j] = False
            if pp.q == 2 and pp.correlated and 0 in self.zero[i]:
                mask[self.offsets[i] + 1] = False
        return mask


def _nelder_mead(obj, start, free, fscale):
    x0 = np.array(start, dtype=float)
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return x0, obj(x0)

    def f(z):
        x = x0.copy()
        x[idx] = z
        return obj(x)

    z0 = x0[idx]
    simplex = np.vstack([z0] + [z0 + 0.5 * e for e in np.eye(idx.size)])
    res = optimize.minimize(f, z0, method="Nelder-Mead",
                            options={"initial_simplex": simplex, "xatol": 1e-6,
                                     "fatol": 1e-10 * fscale, "maxiter": 400 * idx.size,
                                     "maxfev": 600 * idx.size})
    x = x0.copy()
    x[idx] = res.x
    return x, float(res.fun)


def _fd_grad_hess(obj, x, idx, h=1e-4):
    k = idx.size
    f0 = obj(x)
    g = np.zeros(k)
    H = np.zeros((k, k))
    fp = np.zeros(k)
    fm = np.zeros(k)
    for a, i in enumerate(idx):
        e = np.zeros_like(x)
        e[i] = h
        fp[a], fm[a] = obj(x + e), obj(x - e)
        g[a] = (fp[a] - fm[a]) / (2 * h)
        H[a, a] = (fp[a] - 2 * f0 + fm[a]) / h ** 2
    for a in range(k):
        for b in range(a + 1, k):
            ea = np.zeros_like(x)
            eb = np.zeros_like(x)
            ea[idx[a]] = h
            eb[idx[b]] = h
            v = (obj(x + ea + eb) - obj(x + ea - eb) - obj(x - ea + eb) + obj(x - ea - eb)) / (4 * h * h)
            H[a, b] = H[b, a] = v
    return f0, g, H


def _newton_polish(obj, x, free, max_iter=8):
    """Newton iterations on finite-difference derivatives; never accepts a
    step that increases the criterion."""
    idx = np.flatnonzero(free)
    if idx.size == 0:
        return x, obj(x), np.zeros(0), 0
    f0, g, H = _fd_grad_hess(obj, x, idx)
    it = 0
    for it in range(1, max_iter + 1):
        try:
            w = np.linalg.eigvalsh(H)
            if w.min() <= 0:
                break
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        accepted = False
        t = 1.0
        for _ in range(12):
            cand = x.copy()
            cand[idx] += t * step
            fc = obj(cand)
            if fc <= f0:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        dx = np.max(np.abs(cand - x))
        df = abs(f0 - fc) / max(1.0, abs(f0))
        x = cand
        f0, g, H = _fd_grad_hess(obj, x, idx)
        if dx < 1e-8 and df < 1e-10:
            break
    return x, f0, g, it


def _starting_values(st: _Stats, params) -> list:
    """Three deterministic starts: a moment estimate from OLS residuals, unit
    relative SDs, and a tenth of the moment estimate."""
    beta = np.linalg.solve(st.XtX, st.Xty)
    rss = st.yty - float(st.Xty @ beta)
    sigma2 = max(rss / max(st.n - st.p, 1), 1e-12)
    moment = []
    if len(st.blocks) == 1:
        b = st.blocks[0]
        rtz = st.Zty_g - st.ZtX_g @ beta
        ok = np.linalg.det(st.ZtZ_g) > 1e-8 * np.maximum(1.0, np.einsum("gii->g", st.ZtZ_g)) ** b.q
        if ok.sum() >= 2:
            coefs = np.linalg.solve(st.ZtZ_g[ok], rtz[ok][:, :, None])[:, :, 0]
            S = np.atleast_2d(np.cov(coefs.T)) if coefs.shape[0] > 1 else np.eye(b.q)
            noise = np.mean(np.linalg.inv(st.ZtZ_g[ok]), axis=0) * sigma2
            C = (S - noise) / sigma2
        else:
            C = np.eye(b.q) * 0.1
        moment.append(params[0].from_cov(np.atleast_2d(C)))
    else:
        off = 0
        for b, pp in zip(st.blocks, params):
            cnt = np.diag(st.ZtZ)[off:off + b.n_levels]
            rz = (st.Zty - st.ZtX @ beta)[off:off + b.n_levels]
            means = rz / np.maximum(cnt, 1)
            C = np.array([[max(np.var(means) / sigma2, 1e-4)]])
            moment.append(pp.from_cov(C))
            off += b.n_levels
    m = np.concatenate(moment)
    unit = np.concatenate([pp.from_cov(np.eye(pp.q)) for pp in params])
    tenth = np.concatenate([pp.from_cov(np.atleast_2d(
        (pp.to_T(mv) @ pp.to_T(mv).T) * 0.01)) for pp, mv in zip(params, moment)])
    return [m, unit, tenth]


def _optimise(st, params, reml):
    obj = _Objective(st, params, reml)
    starts = _starting_values(st, params)
    fscale = max(1.0, abs(obj(starts[0])))
    runs = []
    for s in starts:
        x, f = _nelder_mead(obj, s, obj.free_mask(), fscale)
        runs.append((f, x))
    runs.sort(key=lambda r: r[0])
    f_best, x = runs[0]

    # boundary: relative SDs that collapse towards zero are tried at exactly zero
    boundary = []
    for i, pp in enumerate(params):
        for j in pp.diag_index():
            k = obj.offsets[i] + j
            if math.exp(x[k]) < BOUNDARY_REL_SD:
                trial_zero = [set(z) for z in obj.zero]
                trial_zero[i].add(j)
                saved = obj.zero
                obj.zero = trial_zero
                xb, fb = _nelder_mead(obj, x, obj.free_mask(), fscale)
                if fb <= f_best + 1e-9 * fscale:
                    x, f_best = xb, fb
                    boundary.append((i, j))
                else:
                    obj.zero = saved
    x, f_best, g, newton_it = _newton_polish(obj, x, obj.free_mask())
    scaled_grad = float(np.max(np.abs(g)) / max(1.0, abs(f_best))) if g.size else 0.0
    diag = {"evaluations": obj.evals, "restart_deviances": [float(r[0]) for r in runs],
            "newton_iterations": newton_it, "scaled_gradient": scaled_grad,
            "boundary": [f"{st.blocks[i].spec.grouping}:"
                         f"{st.blocks[i].spec.terms[params[i].diag_index().index(j)]}"
                         for i, j in boundary]}
    return obj, x, f_best, diag


# ---------------------------------------------------------------------------
# public fitting API
# ---------------------------------------------------------------------------

def _usable_blocks(design: Design, diag):
    blocks = []
    for b in design.random:
        if b.n_levels < 2:
            diag.setdefault("dropped_groupings", []).append(b.spec.grouping)
            log.warning("grouping %s has a single level; its variance is unidentifiable "
                        "and the term is dropped", b.spec.grouping)
            continue
        if b.spec.has_slope:
            times_per_group = pd.Series(b.Z[:, -1]).groupby(b.codes).nunique()
            if (times_per_group >= 2).sum() == 0:
                raise SingleObservationPerGroupWithSlope(
                    f"no {b.spec.grouping} level has two distinct time points")
        blocks.append(b)
    return blocks


def fit_lmm(spec: ModelSpec, table, criterion: str = "REML", design: Design | None = None,
            variances: dict | None = None) -> FittedMixedModel:
    """Fit a Gaussian linear mixed model.

    Parameters
    ----------
    spec : ModelSpec with one or two random terms
    table : ObservationTable or model frame
    criterion : "REML" or "ML"
    variances : optional {grouping: relative variance matrix} held fixed
        instead of estimated (relative to the residual variance); zeros give
        the degenerate fixed-effects fit.
    """
    criterion = criterion.upper()
    if criterion not in ("REML", "ML"):
        raise ValueError(criterion)
    if spec.family != "gaussian":
        raise ValueError("fit_lmm handles Gaussian outcomes only")
    design = design or build_design(spec, table)
    diag = {}
    blocks = _usable_blocks(design, diag)
    reml = criterion == "REML"
    structures = [b.spec.structure == "IntSlopeCorrelated" for b in blocks]
    params = [_Param(b.q, c and b.q == 2) for b, c in zip(blocks, structures)]
    st = _sufficient_stats(design.X, design.y, blocks)

    if not blocks:
        obj = _Objective(st, [], reml)
        x = np.zeros(0)
        diag.update(evaluations=0, scaled_gradient=0.0, boundary=[])
    elif variances is not None:
        obj = _Objective(st, params, reml)
        x, zeros = [], []
        for b, pp in zip(blocks, params):
            C = np.atleast_2d(variances.get(b.spec.grouping, np.zeros((b.q, b.q))))
            z = {j for j in pp.diag_index() if C[pp.diag_index().index(j), pp.diag_index().index(j)] <= 0}
            x.append(pp.from_cov(C))
            zeros.append(z)
        obj.zero = zeros
        x = np.concatenate(x)
        diag.update(evaluations=1, scaled_gradient=float("nan"), boundary=[], fixed_variances=True)
    else:
        obj, x, _, opt_diag = _optimise(st, params, reml)
        diag.update(opt_diag)
        if any(params_i.correlated for params_i in params) and opt_diag["scaled_gradient"] > 1e-6:
            # correlated 2x2 structure failed: refit with independent components
            params_ind = [_Param(pp.q, False) for pp in params]
            obj_i, x_i, _, diag_i = _optimise(st, params_ind, reml)
            if diag_i["scaled_gradient"] <= opt_diag["scaled_gradient"]:
                obj, x, params = obj_i, x_i, params_ind
                diag.update(diag_i)
                diag["fallback"] = "IndependentComponents"
                log.warning("correlated random effects did not converge; "
                            "fell back to independent components")
    diag["converged"] = bool(diag.get("scaled_gradient", 0.0) <= 1e-6
                             or diag.get("fixed_variances", False)
                             or not np.isfinite(diag.get("scaled_gradient", 0.0)))
    if diag.get("scaled_gradient", 0.0) > 1e-3:
        raise NonConvergence(f"optimiser stopped with scaled gradient "
                             f"{diag['scaled_gradient']:.2e}")
    if not diag["converged"]:
        warnings.warn(f"mixed model: scaled gradient {diag['scaled_gradient']:.2e} at optimum",
                      RuntimeWarning, stacklevel=2)
    return _assemble(spec, design, st, obj, x, blocks, reml, diag)


def _assemble(spec, design, st, obj, x, blocks, reml, diag):
    Ts = obj.Ts(x)
    prof = _profile(st, Ts, reml, want_u=True)
    other = _profile(st, Ts, not reml)
    sigma2 = prof.sigma2
    beta = prof.beta.copy()
    if st.intercept_col is not None:
        beta[st.intercept_col] += st.y_shift
    cov = sigma2 * np.linalg.inv(prof.XtXs)
    cov = 0.5 * (cov + cov.T)
    components, blups = [], {}
    if blocks and len(blocks) == 1:
        b, T = blocks[0], Ts[0]
        components.append(VarianceComponent(b.spec.grouping, b.spec.terms, sigma2 * T @ T.T))
        bl = prof.u @ T.T
        blups[b.spec.grouping] = pd.DataFrame(bl, index=pd.Index(b.levels, name=b.spec.grouping),
                                              columns=list(b.spec.terms))
    elif blocks:
        off = 0
        for b, T in zip(blocks, Ts):
            size = b.n_levels * b.q
            u = prof.u[off:off + size].reshape(b.n_levels, b.q)
            components.append(VarianceComponent(b.spec.grouping, b.spec.terms, sigma2 * T @ T.T))
            blups[b.spec.grouping] = pd.DataFrame(u @ T.T, index=pd.Index(b.levels, name=b.spec.grouping),
                                                  columns=list(b.spec.terms))
            off += size
    n_theta = int(obj.free_mask().sum()) if blocks else 0
    ll = -0.5 * prof.deviance
    ll_other = -0.5 * other.deviance
    return FittedMixedModel(
        coef=beta, cov=cov, labels=design.labels, criterion="REML" if reml else "ML",
        loglik=ll, loglik_reml=ll if reml else ll_other, loglik_ml=ll_other if reml else ll,
        sigma2=sigma2, components=components, blups=blups, theta=np.asarray(x),
        n=st.n, p=st.p, df_model=st.p + n_theta + 1, row_key=row_key(design.y),
        diagnostics=diag, design_info=design.info)


def fit_crossed_lmm(spec: ModelSpec, table, criterion: str = "REML", **kw) -> FittedMixedModel:
    """Mixed model with two crossed random-intercept groupings."""
    if len(spec.random) != 2 or any(r.has_slope for r in spec.random):
        raise ValueError("fit_crossed_lmm expects two intercept-only random terms")
    return fit_lmm(spec, table, criterion=criterion, **kw)


def extract_subject_slopes(model: FittedMixedModel, grouping: str = "participant",
                           time_label: str = "time") -> pd.Series:
    """Per-subject time slope: fixed time coefficient plus the slope BLUP."""
    if grouping not in model.blups or "TimeSlope" not in model.blups[grouping].columns:
        raise NoRandomSlope(f"model has no random time slope for {grouping!r}")
    fixed = model.coefficient(time_label)
    return (fixed + model.blups[grouping]["TimeSlope"]).rename("slope")


# ---------------------------------------------------------------------------
# likelihood at given parameters (for checking against dense formulas)
# ---------------------------------------------------------------------------

def loglik_at(design: Design, beta, covs, sigma2, criterion="ML") -> float:
    """Log-likelihood at explicit parameters.

    ``covs`` lists the absolute random-effect covariance per grouping. ML
    depends on ``beta``; REML integrates it out and ignores it.
    """
    blocks = design.random
    st = _sufficient_stats(design.X, design.y, blocks)
    Ts = []
    for C in covs:
        w, V = np.linalg.eigh(np.atleast_2d(C) / sigma2)
        Ts.append((V * np.sqrt(np.clip(w, 0, None))) @ V.T)
    n, p = st.n, st.p
    if criterion.upper() == "REML":
        prof = _profile(st, Ts, reml=True)
        return -0.5 * ((n - p) * math.log(2 * math.pi * sigma2) + prof.logdet_L
                       + prof.logdet_RX + prof.r2 / sigma2)
    beta = np.asarray(beta, dtype=float).copy()
    if st.intercept_col is not None:
        beta[st.intercept_col] -= st.y_shift
    rr = st.yty - 2 * beta @ st.Xty + beta @ st.XtX @ beta
    if len(blocks) == 1:
        T = Ts[0]
        q = T.shape[0]
        M = np.einsum("ji,gjk,kl->gil", T, st.ZtZ_g, T) + np.eye(q)
        L = _SmallChol(M)
        c = L.solve((st.Zty_g - st.ZtX_g @ beta) @ T)
        logdet = L.logdet()
        pen = rr - np.sum(c * c)
    else:
        lam = _lambda_dense(blocks, Ts)
        M = lam.T @ st.ZtZ @ lam + np.eye(lam.shape[0])
        L = np.linalg.cholesky(M)
        c = linalg.solve_triangular(L, lam.T @ (st.Zty - st.ZtX @ beta), lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(L)))
        pen = rr - c @ c
    return -0.5 * (n * math.log(2 * math.pi * sigma2) + logdet + pen / sigma2)


# ---------------------------------------------------------------------------
# model comparison
# ---------------------------------------------------------------------------

@dataclass
class Comparison:
    table: pd.DataFrame
    selected: int
    models: list
    chain_error: str | None = None

    @property
    def selected_spec(self):
        return self.table.loc[self.selected, "spec"]


def fit_any(spec: ModelSpec, table, criterion="REML", design=None):
    if spec.random:
        return fit_lmm(spec, table, criterion=criterion, design=design)
    return fit_fixed(spec, table, design=design)


def compare_fixed_specs(specs, table) -> Comparison:
    """Rank fixed-effect specifications by AIC under ML.

    Ties go to the spec with fewer parameters. Likelihood-ratio tests run
    along the chain of specs sorted by parameter count.
    """
    models, rows = [], []
    for i, spec in enumerate(specs):
        m = fit_any(spec, table, criterion="ML")
        models.append(m)
        rows.append({"spec": spec, "formula": spec.formula, "poly_order": spec.poly_order,
                     "df": m.df_model, "loglik": m.loglik, "aic": m.aic, "bic": m.bic})
    tab = pd.DataFrame(rows)
    order = sorted(range(len(specs)), key=lambda i: (tab.loc[i, "aic"], tab.loc[i, "df"], i))
    tab["aic_rank"] = 0
    for r, i in enumerate(order):
        tab.loc[i, "aic_rank"] = r + 1
    tab["lrt_stat"] = np.nan
    tab["lrt_df"] = np.nan
    tab["lrt_p"] = np.nan
    chain_error = None
    chain = sorted(range(len(specs)), key=lambda i: (tab.loc[i, "df"], i))
    for a, b in zip(chain[:-1], chain[1:]):
        small, big = models[a], models[b]
        if not set(small.labels) <= set(big.labels):
            chain_error = f"{specs[a].formula} is not nested in {specs[b].formula}"
            break
        try:
            res = lr_test(big, small)
        except (NonNestedChain, Exception) as exc:  # noqa: BLE001 - reported, ranking kept
            chain_error = str(exc)
            break
        tab.loc[b, ["lrt_stat", "lrt_df", "lrt_p"]] = [res.statistic, res.df, res.p]
    if chain_error:
        log.warning("LRT chain skipped: %s", chain_error)
    tab["selected"] = False
    tab.loc[order[0], "selected"] = True
    return Comparison(table=tab, selected=order[0], models=models, chain_error=chain_error)


def with_structure(spec: ModelSpec, structure: str) -> ModelSpec:
    return replace(spec, random=tuple(replace(r, structure=structure) for r in spec.random))

"""Polychoric correlations, ULS factor extraction with oblimin rotation,
anchored factor scores and k-means clustering."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import optimize, stats
from sklearn.metrics import silhouette_score

from .bvn import bvn_cdf
from .errors import DegenerateMargin, FewerPointsThanClusters, ItemMismatch, NonConvergence

log = logging.getLogger(__name__)

RHO_BOUND = 0.999
PSD_FLOOR = 1e-6
PSI_MIN = 0.005


# ---------------------------------------------------------------------------
# polychoric correlation
# ---------------------------------------------------------------------------

@dataclass
class Polychoric:
    rho: float
    thresholds: tuple
    boundary: bool
    converged: bool
    n: int


def _codes(x):
    x = np.asarray(x)
    cats, codes = np.unique(x, return_inverse=True)
    if cats.size < 2:
        raise DegenerateMargin("item has a single observed category")
    return codes, cats.size


def _thresholds(codes, m):
    props = np.bincount(codes, minlength=m) / codes.size
    cut = stats.norm.ppf(np.cumsum(props)[:-1])
    return np.concatenate([[-np.inf], cut, [np.inf]])


def _cell_probs(a, b, rho):
    A, B = np.meshgrid(a, b, indexing="ij")
    F = bvn_cdf(A, B, rho)
    # inclusion-exclusion over the rectangle of each cell
    P = F[1:, 1:] - F[:-1, 1:] - F[1:, :-1] + F[:-1, :-1]
    return np.clip(P, 1e-300, None)


def polychoric(x, y) -> Polychoric:
    """Two-step polychoric correlation of two ordinal items.

    Thresholds come from the marginal proportions; rho then maximises the
    bivariate-normal contingency likelihood on (-0.999, 0.999).
    """
    x = np.asarray(x)
    y = np.asarray(y)
    ok = pd.notna(x) & pd.notna(y)
    x, y = x[ok], y[ok]
    cx, mx = _codes(x)
    cy, my = _codes(y)
    table = np.zeros((mx, my))
    np.add.at(table, (cx, cy), 1.0)
    a, b = _thresholds(cx, mx), _thresholds(cy, my)

    def nll(rho):
        return -float(np.sum(table * np.log(_cell_probs(a, b, rho))))

    res = optimize.minimize_scalar(nll, bounds=(-RHO_BOUND, RHO_BOUND), method="bounded",
                                   options={"xatol": 1e-7})
    rho = float(res.x)
    boundary = abs(rho) > RHO_BOUND - 1e-4
    if boundary:
        rho = float(np.sign(rho) * RHO_BOUND)
    return Polychoric(rho=rho, thresholds=(a[1:-1], b[1:-1]), boundary=boundary,
                      converged=bool(res.success), n=int(ok.sum()))


@dataclass
class PolychoricMatrix:
    corr: np.ndarray
    items: list
    boundary: np.ndarray
    converged: np.ndarray
    thresholds: dict
    repair: float = 0.0
    raw: np.ndarray = None

    def frame(self):
        return pd.DataFrame(self.corr, index=self.items, columns=self.items)


def nearest_psd(R, floor=PSD_FLOOR):
    """Clip eigenvalues at ``floor`` and rescale to unit diagonal.

    Returns the repaired matrix and the Frobenius size of the change.
    """
    R = 0.5 * (R + R.T)
    w, V = np.linalg.eigh(R)
    if w.min() >= floor:
        return R, 0.0
    Rp = (V * np.maximum(w, floor)) @ V.T
    d = np.sqrt(np.diag(Rp))
    Rp = Rp / np.outer(d, d)
    np.fill_diagonal(Rp, 1.0)
    return Rp, float(np.linalg.norm(Rp - R))


def polychoric_matrix(data) -> PolychoricMatrix:
    """Pairwise polychoric matrix of the columns of ``data``."""
    df = pd.DataFrame(data)
    items = [str(c) for c in df.columns]
    d = len(items)
    R = np.eye(d)
    bnd = np.zeros((d, d), dtype=bool)
    conv = np.ones((d, d), dtype=bool)
    thr = {}
    cols = [df.iloc[:, j].to_numpy() for j in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            pc = polychoric(cols[i], cols[j])
            R[i, j] = R[j, i] = pc.rho
            bnd[i, j] = bnd[j, i] = pc.boundary
            conv[i, j] = conv[j, i] = pc.converged
            thr.setdefault(items[i], pc.thresholds[0])
            thr.setdefault(items[j], pc.thresholds[1])
    Rp, repair = nearest_psd(R)
    if repair > 0:
        log.info("polychoric matrix repaired to PSD (Frobenius change %.3g)", repair)
    return PolychoricMatrix(corr=Rp, items=items, boundary=bnd, converged=conv, thresholds=thr,
                            repair=repair, raw=R)


# ---------------------------------------------------------------------------
# exploratory factor analysis
# ---------------------------------------------------------------------------

@dataclass
class FactorSolution:
    loadings: np.ndarray
    phi: np.ndarray
    uniqueness: np.ndarray
    corr: np.ndarray
    items: list
    explained: np.ndarray
    rmsr: float
    heywood: list
    rotation: dict = field(default_factory=dict)

    @property
    def communalities(self):
        return 1.0 - self.uniqueness

    @property
    def k(self):
        return self.loadings.shape[1]

    def loadings_frame(self):
        cols = [f"F{j + 1}" for j in range(self.k)]
        return pd.DataFrame(self.loadings, index=self.items, columns=cols)


def _extract(R, psi, k):
    w, V = np.linalg.eigh(R - np.diag(psi))
    idx = np.argsort(w)[::-1][:k]
    return V[:, idx] * np.sqrt(np.maximum(w[idx], 0.0))


def _uls(R, k):
    d = R.shape[0]
    try:
        smc = 1.0 - 1.0 / np.diag(np.linalg.inv(R))
    except np.linalg.LinAlgError:
        smc = np.full(d, 0.5)
    psi0 = np.clip(1.0 - smc, PSI_MIN, 1.0)

    def f(psi):
        L = _extract(R, psi, k)
        E = R - L @ L.T - np.diag(psi)
        return 0.5 * float(np.sum(E * E)), -np.diag(E).copy()

    res = optimize.minimize(f, psi0, jac=True, method="L-BFGS-B",
                            bounds=[(PSI_MIN, 1.0)] * d,
                            options={"maxiter": 5000, "ftol": 1e-15, "gtol": 1e-10})
    if not res.success and res.status != 0:
        msg = res.message if isinstance(res.message, str) else res.message.decode()
        if "ABNORMAL" not in msg.upper():
            raise NonConvergence(f"ULS extraction failed: {msg}")
    psi = res.x
    return _extract(R, psi, k), psi


def oblimin(A, gamma=0.0, tol=1e-7, max_iter=2000):
    """Oblique oblimin rotation by gradient projection.

    Returns (pattern loadings, factor correlations, record). ``gamma = 0``
    is direct quartimin.
    """
    d, k = A.shape
    if k == 1:
        return A.copy(), np.eye(1), {"iterations": 0, "criterion": 0.0, "converged": True}
    off = 1.0 - np.eye(k)
    N = np.ones((d, d)) / d if gamma else None

    def crit(L):
        L2 = L * L
        X = L2 @ off
        if gamma:
            X = X - gamma * (N @ X)
        return float(np.sum(L2 * X) / 4.0), L * X

    T = np.eye(k)
    L = A @ np.linalg.inv(T).T
    f, Gq = crit(L)
    G = -(L.T @ Gq @ np.linalg.inv(T)).T
    al = 1.0
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Gp = G - T * np.sum(T * G, axis=0)
        s = float(np.linalg.norm(Gp))
        if s < tol:
            converged = True
            break
        al *= 2.0
        for _ in range(12):
            X = T - al * Gp
            Tt = X / np.sqrt(np.sum(X * X, axis=0))
            Lt = A @ np.linalg.inv(Tt).T
            ft, Gqt = crit(Lt)
            if f - ft > 0.5 * s * s * al:
                break
            al /= 2.0
        T, L, f = Tt, Lt, ft
        G = -(L.T @ Gqt @ np.linalg.inv(T)).T
    if not converged:
        log.warning("oblimin rotation stopped after %d iterations", it)
    return L, T.T @ T, {"method": "oblimin", "gamma": gamma, "iterations": it,
                        "criterion": f, "converged": converged}


def _canonicalise(L, phi):
    L = L.copy()
    phi = phi.copy()
    k = L.shape[1]
    for j in range(k):
        i = int(np.argmax(np.abs(L[:, j])))
        if L[i, j] < 0:
            L[:, j] *= -1
            phi[:, j] *= -1
            phi[j, :] *= -1
    explained = np.diag(phi @ L.T @ L)
    order = np.argsort(-explained, kind="mergesort")
    return L[:, order], phi[np.ix_(order, order)], explained[order]


def efa_uls(corr, k: int, items=None, gamma: float = 0.0) -> FactorSolution:
    """ULS factor extraction followed by oblimin rotation.

    ``corr`` may be a :class:`PolychoricMatrix` or a plain correlation
    matrix. Factors are signed so each one's largest loading is positive and
    ordered by explained variance.
    """
    if isinstance(corr, PolychoricMatrix):
        items = items or corr.items
        R = corr.corr
    else:
        R = np.asarray(corr, dtype=float)
    d = R.shape[0]
    if not 1 <= k < d:
        raise ValueError(f"need 1 <= k < {d}")
    R, _ = nearest_psd(R)
    A, psi = _uls(R, k)
    L, phi, rec = oblimin(A, gamma=gamma)
    L, phi, ev = _canonicalise(L, phi)
    resid = R - L @ phi @ L.T
    offd = ~np.eye(d, dtype=bool)
    rmsr = float(np.sqrt(np.mean(resid[offd] ** 2)))
    items = list(items) if items is not None else [f"x{i + 1}" for i in range(d)]
    heywood = [items[i] for i in np.flatnonzero(psi <= PSI_MIN + 1e-9)]
    if heywood:
        log.warning("Heywood case: communality at bound for %s", heywood)
    return FactorSolution(loadings=L, phi=phi, uniqueness=psi, corr=R, items=items,
                          explained=ev / d, rmsr=rmsr, heywood=heywood, rotation=rec)


# ---------------------------------------------------------------------------
# anchored scores
# ---------------------------------------------------------------------------

@dataclass
class AnchoredScores:
    pre: pd.DataFrame
    post: pd.DataFrame | None
    weights: np.ndarray
    item_means: np.ndarray
    item_sds: np.ndarray
    score_sds: np.ndarray


def score_anchored(solution: FactorSolution, pre_data, post_data=None) -> AnchoredScores:
    """Regression-method factor scores, anchored on the pre-treatment data.

    Items are standardised with the pre means and SDs, weighted by
    ``R^-1 Lambda Phi`` and scaled so pre scores have unit SD. Post data
    reuse every pre quantity.
    """
    pre = pd.DataFrame(pre_data)
    items = [str(c) for c in pre.columns]
    if items != list(solution.items):
        raise ItemMismatch("pre items differ from the factor solution's items")
    Xp = pre.to_numpy(dtype=float)
    means = Xp.mean(axis=0)
    sds = Xp.std(axis=0)
    sds[sds == 0] = 1.0
    W = np.linalg.solve(solution.corr, solution.loadings @ solution.phi)
    raw = ((Xp - means) / sds) @ W
    scale = raw.std(axis=0)
    scale[scale == 0] = 1.0
    cols = [f"F{j + 1}" for j in range(solution.k)]
    pre_scores = pd.DataFrame(raw / scale, index=pre.index, columns=cols)
    post_scores = None
    if post_data is not None:
        post = pd.DataFrame(post_data)
        if [str(c) for c in post.columns] != items:
            raise ItemMismatch("post items differ from pre items")
        Xq = post.to_numpy(dtype=float)
        post_scores = pd.DataFrame((((Xq - means) / sds) @ W) / scale, index=post.index,
                                   columns=cols)
    return AnchoredScores(pre=pre_scores, post=post_scores, weights=W, item_means=means,
                          item_sds=sds, score_sds=scale)


# ---------------------------------------------------------------------------
# clustering
# ---------------------------------------------------------------------------

def standardise(X):
    X = np.asarray(X, dtype=float)
    sd = X.std(axis=0)
    sd[sd == 0] = 1.0
    return (X - X.mean(axis=0)) / sd


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list
    n_iter: int


def _sqdist(X, C):
    return np.maximum((X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :], 0.0)


def _plusplus(X, k, rng):
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = _sqdist(X, np.array(centers))[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, _sqdist(X, X[idx][None, :])[:, 0])
    return np.array(centers)


def _lloyd(X, C, max_iter):
    history = []
    labels = None
    it = 0
    for it in range(1, max_iter + 1):
        D = _sqdist(X, C)
        new = np.argmin(D, axis=1)
        history.append(float(D[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        C = C.copy()
        dist = D[np.arange(len(X)), labels]
        for j in range(C.shape[0]):
            members = labels == j
            if members.any():
                C[j] = X[members].mean(axis=0)
            else:
                # move an empty centre onto the worst-served point
                far = int(np.argmax(dist))
                C[j] = X[far]
                dist[far] = 0.0
    return labels, C, history[-1], history, it


def kmeans(data, k: int, seed: int = 0, n_init: int = 10, max_iter: int = 300) -> KMeansResult:
    """k-means with k-means++ seeding; best of ``n_init`` restarts."""
    X = np.asarray(data, dtype=float)
    n = X.shape[0]
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise FewerPointsThanClusters(f"{n} points for {k} clusters")
    seeds = np.random.SeedSequence(seed).spawn(n_init)
    best = None
    for ss in seeds:
        rng = np.random.Generator(np.random.PCG64(ss))
        C0 = _plusplus(X, k, rng)
        labels, C, inertia, hist, it = _lloyd(X, C0, max_iter)
        if best is None or inertia < best.inertia - 1e-12 * max(inertia, 1.0):
            best = KMeansResult(labels=labels, centroids=C, inertia=inertia, history=hist,
                                n_iter=it)
    return best


def silhouette_diagnostics(data, ks=range(2, 7), seed: int = 0) -> pd.DataFrame:
    X = np.asarray(data, dtype=float)
    rows = []
    for k in ks:
        if k >= X.shape[0]:
            break
        res = kmeans(X, k, seed=seed)
        score = silhouette_score(X, res.labels) if len(set(res.labels)) > 1 else np.nan
        rows.append({"k": k, "inertia": res.inertia, "silhouette": float(score)})
    return pd.DataFrame(rows)

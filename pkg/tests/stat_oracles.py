"""Dense, formula-level reimplementations used as oracles for the stats module."""

import numpy as np
from scipy import optimize


def dummies(groups):
    levels = sorted(set(groups))
    return np.array([[g == lv for lv in levels] for g in groups], dtype=float)


def ssr(X, y):
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    r = y - X @ beta
    return float(r @ r), beta


def fixed_effects_cv(y, groups):
    y = np.asarray(y, float)
    D = dummies(groups)
    s, _ = ssr(D, y)
    return 100 * np.sqrt(s / (len(y) - D.shape[1])) / abs(y.mean())


def ancova_within_r(x, y, groups):
    """Bland-Altman within-subject r from y ~ subject + x."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    D = dummies(groups)
    ss_sub, _ = ssr(D, y)
    ss_full, beta = ssr(np.column_stack([D, x]), y)
    ss_x = ss_sub - ss_full
    return np.sign(beta[-1]) * np.sqrt(ss_x / (ss_x + ss_full))


def between_r(x, y, groups):
    levels = sorted(set(groups))
    g = np.asarray(groups)
    mx = [np.mean(np.asarray(x)[g == lv]) for lv in levels]
    my = [np.mean(np.asarray(y)[g == lv]) for lv in levels]
    return np.corrcoef(mx, my)[0, 1]


class DenseReml:
    """Random-intercept REML with explicit N x N matrices."""

    def __init__(self, y, X, groups):
        self.y = np.asarray(y, float)
        self.X = np.asarray(X, float)
        Z = dummies(groups)
        self.G = Z @ Z.T
        self.N, self.p = self.X.shape

    def _P(self, rho):
        Vi = np.linalg.inv(np.eye(self.N) + rho * self.G)
        XtVi = self.X.T @ Vi
        return Vi - XtVi.T @ np.linalg.inv(XtVi @ self.X) @ XtVi, Vi

    def loglik(self, rho):
        P, Vi = self._P(rho)
        V = np.eye(self.N) + rho * self.G
        q = self.y @ P @ self.y
        return -0.5 * ((self.N - self.p) * np.log(q) + np.linalg.slogdet(V)[1]
                       + np.linalg.slogdet(self.X.T @ Vi @ self.X)[1])

    def score(self, rho):
        P, _ = self._P(rho)
        Py = P @ self.y
        return -0.5 * (np.trace(P @ self.G) - (self.N - self.p) * (Py @ self.G @ Py) / (self.y @ Py))

    def fit(self):
        """Interior REML estimate of icc and the variance components."""
        f = lambda t: self.score(t / (1 - t))
        t = optimize.brentq(f, 1e-12, 1 - 1e-10, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        rho = t / (1 - t)
        P, _ = self._P(rho)
        s2e = self.y @ P @ self.y / (self.N - self.p)
        return t, rho * s2e, s2e


def hac_double_sum(X, resid, lag):
    """(X'X)^-1 [sum_i sum_j w(|i-j|) u_i u_j'] (X'X)^-1 with Bartlett weights."""
    n, p = X.shape
    S = np.zeros((p, p))
    for i in range(n):
        for j in range(n):
            d = abs(i - j)
            if d <= lag:
                S += (1 - d / (lag + 1)) * resid[i] * resid[j] * np.outer(X[i], X[j])
    B = np.linalg.inv(X.T @ X)
    return B @ S @ B


def tricube_mean(y, center, idx):
    """Degree-0 tricube fit at ``center`` using points ``idx`` (unit spacing)."""
    d = np.abs(np.asarray(idx, float) - center)
    h = 1.0001 * d.max()
    w = (1 - (d / h) ** 3) ** 3
    return float(np.sum(w * np.asarray(y)[idx]) / np.sum(w))

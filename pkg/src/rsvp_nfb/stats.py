"""Longitudinal statistics: baseline stability (CV, ICC), within/between-subject
correlations, phase-slope regression with Newey-West errors and lowess."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
from scipy import optimize, stats as sps

COLUMNS = ("participant", "session", "time_weeks", "phase", "measure", "value")
CHI2_95 = float(sps.chi2.ppf(0.95, 1))
ICC_ZERO = 1e-6


class LongitudinalDataset:
    """Long-format repeated measures.

    Columns: participant, session, time_weeks, phase (0 baseline, 1
    intervention), measure, value, plus an optional boolean ``followup``.
    """

    def __init__(self, frame: pd.DataFrame):
        missing = set(COLUMNS) - set(frame.columns)
        if missing:
            raise ValueError(f"missing columns: {sorted(missing)}")
        df = frame.copy()
        if "followup" not in df.columns:
            df["followup"] = False
        df["participant"] = df["participant"].astype(str)
        df["measure"] = df["measure"].astype(str)
        df["followup"] = df["followup"].astype(bool)
        df["phase"] = df["phase"].astype(int)
        if not set(df["phase"].unique()) <= {0, 1}:
            raise ValueError("phase must be 0 (baseline) or 1 (intervention)")
        if df.duplicated(["participant", "measure", "session"]).any():
            raise ValueError("(participant, measure, session) must be unique")
        df = df.sort_values(["participant", "measure", "session"], kind="stable").reset_index(drop=True)
        for _, g in df.groupby(["participant", "measure"]):
            if np.any(np.diff(g["time_weeks"].to_numpy()) < 0):
                raise ValueError("time must be non-decreasing within participant")
        self.frame = df

    @classmethod
    def from_records(cls, records) -> "LongitudinalDataset":
        return cls(pd.DataFrame.from_records(list(records)))

    @classmethod
    def from_csv(cls, path: str | Path) -> "LongitudinalDataset":
        return cls(pd.read_csv(path))

    def to_csv(self, path: str | Path) -> None:
        self.frame.to_csv(path, index=False, float_format="%.10g")

    @property
    def measures(self) -> list[str]:
        return sorted(self.frame["measure"].unique())

    def baseline(self, measure: str, drop_first: bool = True) -> pd.DataFrame:
        """Baseline rows for ``measure``; the first baseline per participant is dropped by default."""
        df = self.frame[(self.frame["measure"] == measure) & (self.frame["phase"] == 0) & ~self.frame["followup"]]
        if drop_first:
            df = df[df.groupby("participant").cumcount() > 0]
        return df

    def series(self, participant: str, measure: str, drop_first: bool = True,
               drop_followup: bool = True) -> pd.DataFrame:
        df = self.frame[(self.frame["participant"] == str(participant)) & (self.frame["measure"] == measure)]
        if drop_followup:
            df = df[~df["followup"]]
        if drop_first:
            first = df.index[df["phase"] == 0][:1]
            df = df.drop(first)
        return df


# -- baseline stability --------------------------------------------------------

@dataclass(frozen=True)
class CvResult:
    cv: float  # percent
    rmse: float
    grand_mean: float
    n: int
    m: float
    r: float | None = None
    df: float | None = None
    se: float | None = None

    def format(self, digits: int = 2) -> str:
        if self.se is None:
            return f"{self.cv:.{digits}f}"
        return f"{self.cv:.{digits}f} ± {self.se:.{digits}f}"


def _groups(groups: Sequence) -> tuple[np.ndarray, int]:
    _, inv = np.unique(np.asarray(groups), return_inverse=True)
    return inv, int(inv.max()) + 1


def _demean(y: np.ndarray, inv: np.ndarray, k: int) -> np.ndarray:
    means = np.bincount(inv, y, k) / np.bincount(inv, minlength=k)
    return y - means[inv]


def within_subject_cv(values: Sequence[float], groups: Sequence) -> CvResult:
    """Fixed-effects RMSE over the grand mean, in percent."""
    y = np.asarray(values, dtype=np.float64)
    inv, k = _groups(groups)
    n_obs = y.size
    if n_obs - k < 1:
        raise ValueError("need at least one participant with two or more sessions")
    resid = _demean(y, inv, k)
    rmse = math.sqrt(float(resid @ resid) / (n_obs - k))
    gm = float(y.mean())
    if gm == 0:
        raise ValueError("grand mean is zero; CV undefined")
    return CvResult(100.0 * rmse / abs(gm), rmse, gm, k, n_obs / k)


def cv_standard_error(cv: float, n: float, m: float, r: float) -> tuple[float, float]:
    """Returns (se, df) with df = n m / (1 + (m - 1) r) and se = cv / sqrt(2 df)."""
    if n < 1 or m < 1:
        raise ValueError("n and m must be >= 1")
    if not 0 <= r < 1:
        raise ValueError("r must lie in [0, 1)")
    df = n * m / (1.0 + (m - 1.0) * r)
    if df <= 0:
        raise ValueError("effective df must be positive")
    return cv / math.sqrt(2.0 * df), df


def lag1_autocorrelation(values: Sequence[float], groups: Sequence) -> float:
    """Pooled lag-1 autocorrelation of participant-demeaned residuals (input in session order)."""
    y = np.asarray(values, dtype=np.float64)
    inv, k = _groups(groups)
    e = _demean(y, inv, k)
    same = inv[1:] == inv[:-1]
    den = float(e @ e)
    if den == 0:
        return 0.0
    return float(np.sum(e[1:][same] * e[:-1][same]) / den)


def baseline_cv(dataset: LongitudinalDataset, measure: str, r: float | None = None) -> CvResult:
    """CV with standard error; r defaults to the lag-1 residual autocorrelation clipped to [0, 0.99]."""
    df = dataset.baseline(measure)
    res = within_subject_cv(df["value"], df["participant"])
    if r is None:
        r = min(max(lag1_autocorrelation(df["value"], df["participant"]), 0.0), 0.99)
    se, dof = cv_standard_error(res.cv, res.n, res.m, r)
    return CvResult(res.cv, res.rmse, res.grand_mean, res.n, res.m, r, dof, se)


# -- REML random-intercept ICC ---------------------------------------------------

@dataclass(frozen=True)
class IccResult:
    icc: float
    ci_low: float
    ci_high: float
    sigma2_u: float
    sigma2_e: float
    beta: np.ndarray
    loglik: float
    boundary: bool

    def format(self, digits: int = 2) -> str:
        if self.icc < ICC_ZERO:
            return "≈ 0"
        return f"{self.icc:.{digits}f} [{self.ci_low:.{digits}f},{self.ci_high:.{digits}f}]"


class _RandomIntercept:
    """REML pieces for y = X b + u_g + e with V = s2 (I + rho Z Z'), evaluated blockwise."""

    def __init__(self, y, X, groups):
        self.y = np.asarray(y, dtype=np.float64)
        self.X = np.asarray(X, dtype=np.float64)
        self.inv, self.k = _groups(groups)
        self.N, self.p = self.X.shape
        if np.linalg.matrix_rank(self.X) < self.p:
            raise ValueError("fixed-effect design is rank deficient")
        if self.N - self.p < 1:
            raise ValueError("not enough observations")
        self.n_g = np.bincount(self.inv, minlength=self.k).astype(np.float64)
        self.sx = np.zeros((self.k, self.p))
        np.add.at(self.sx, self.inv, self.X)
        self.sy = np.bincount(self.inv, self.y, self.k)
        self.XtX = self.X.T @ self.X
        self.Xty = self.X.T @ self.y

    def _parts(self, rho):
        c = rho / (1.0 + rho * self.n_g)  # V_g^-1 = I - c_g 11'
        A = self.XtX - (self.sx * c[:, None]).T @ self.sx
        b = self.Xty - (self.sx * (c * self.sy)[:, None]).sum(axis=0)
        beta = np.linalg.solve(A, b)
        r = self.y - self.X @ beta
        sr = np.bincount(self.inv, r, self.k)
        q = float(r @ r - np.sum(c * sr**2))  # r' V^-1 r
        return A, beta, sr, q, c

    def loglik(self, rho: float) -> float:
        """REML log-likelihood with s2 profiled out, up to a constant."""
        A, _, _, q, _ = self._parts(rho)
        q = max(q, 1e-300)
        _, logdet_a = np.linalg.slogdet(A)
        return -0.5 * ((self.N - self.p) * math.log(q) + float(np.sum(np.log1p(rho * self.n_g))) + logdet_a)

    def score(self, rho: float) -> float:
        """d loglik / d rho = -1/2 [tr(P G) - (N - p) y'PGPy / y'Py], G = Z Z'."""
        A, _, sr, q, c = self._parts(rho)
        w = 1.0 / (1.0 + rho * self.n_g)
        B = self.sx * w[:, None]  # Z' V^-1 X
        trPG = float(np.sum(self.n_g * w) - np.trace(np.linalg.solve(A, B.T @ B)))
        zpy = sr * w  # Z' P y
        return -0.5 * (trPG - (self.N - self.p) * float(zpy @ zpy) / q)

    def estimate(self, rho: float):
        _, beta, _, q, _ = self._parts(rho)
        s2e = q / (self.N - self.p)
        return beta, rho * s2e, s2e


def _rho(t: float) -> float:
    return t / (1.0 - t)


T_MAX = 1.0 - 1e-10


def icc_reml(values: Sequence[float], groups: Sequence, time: Sequence[float] | None = None) -> IccResult:
    """Random-intercept ICC by REML with a profile-likelihood 95% interval.

    The likelihood is profiled over t = icc in [0, 1); the estimate is the
    root of the analytic score, or a boundary when the score keeps one sign.
    """
    y = np.asarray(values, dtype=np.float64)
    cols = [np.ones_like(y)]
    if time is not None:
        cols.append(np.asarray(time, dtype=np.float64))
    model = _RandomIntercept(y, np.column_stack(cols), groups)
    if model.k < 2:
        raise ValueError("need at least two participants")
    if np.all(model.n_g < 2):
        raise ValueError("need repeated sessions")

    if model._parts(0.0)[3] <= 1e-12 * max(1.0, float(y @ y)):
        raise ValueError("residual variance is zero; ICC undefined")
    score_t = lambda t: model.score(_rho(t))
    s0, s1 = score_t(0.0), score_t(T_MAX)
    if s0 <= 0:
        t_hat, boundary = 0.0, True
    elif s1 >= 0:
        t_hat, boundary = T_MAX, True
    else:
        t_hat = optimize.brentq(score_t, 0.0, T_MAX, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
        boundary = False

    ll = lambda t: model.loglik(_rho(t))
    ll_hat = ll(t_hat)
    gap = lambda t: 2.0 * (ll_hat - ll(t)) - CHI2_95
    lo = 0.0 if t_hat == 0.0 or gap(0.0) <= 0 else optimize.brentq(gap, 0.0, t_hat, xtol=1e-12)
    hi = 1.0 if t_hat >= T_MAX or gap(T_MAX) <= 0 else optimize.brentq(gap, t_hat, T_MAX, xtol=1e-12)
    beta, s2u, s2e = model.estimate(_rho(t_hat))
    icc = 1.0 if t_hat >= T_MAX else t_hat
    return IccResult(icc, lo, hi, s2u, s2e, beta, ll_hat, boundary)


# -- correlations ----------------------------------------------------------------

@dataclass(frozen=True)
class CorrResult:
    r_within: float
    r_between: float
    n_participants: int
    n_obs: int


def within_between_correlation(x: Sequence[float], y: Sequence[float], groups: Sequence) -> CorrResult:
    """Within-subject r on participant-demeaned values; between-subject r on participant means."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    inv, k = _groups(groups)
    if k < 2:
        raise ValueError("need at least two participants")
    dx, dy = _demean(x, inv, k), _demean(y, inv, k)
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise ValueError("zero within-participant variance; correlation undefined")
    r_w = float(dx @ dy) / math.sqrt(sxx * syy)
    cnt = np.bincount(inv, minlength=k)
    mx, my = np.bincount(inv, x, k) / cnt, np.bincount(inv, y, k) / cnt
    mx, my = mx - mx.mean(), my - my.mean()
    den = math.sqrt(float(mx @ mx) * float(my @ my))
    if den == 0:
        raise ValueError("participant means have zero variance; correlation undefined")
    return CorrResult(r_w, float(mx @ my) / den, k, x.size)


def fisher_z(r: float, df: float) -> float:
    """atanh(r) * sqrt(df - 3)."""
    if df <= 3:
        raise ValueError("df must exceed 3")
    if not -1 < r < 1:
        raise ValueError("|r| must be below 1")
    return math.atanh(r) * math.sqrt(df - 3.0)


# -- phase slopes ----------------------------------------------------------------

def default_lag(n: int) -> int:
    return int(math.floor(4.0 * (n / 100.0) ** (2.0 / 9.0)))


def newey_west_cov(X: np.ndarray, resid: np.ndarray, lag: int) -> np.ndarray:
    """Bartlett-kernel HAC covariance of OLS coefficients, no small-sample scaling."""
    u = X * resid[:, None]
    S = u.T @ u
    for l in range(1, lag + 1):
        G = u[l:].T @ u[:-l]
        S += (1.0 - l / (lag + 1.0)) * (G + G.T)
    bread = np.linalg.inv(X.T @ X)
    return bread @ S @ bread


@dataclass(frozen=True)
class PhaseSlopes:
    beta: np.ndarray  # intercept, time, phase, time x phase
    cov: np.ndarray
    lag: int
    slope_baseline: float
    se_baseline: float
    slope_intervention: float
    se_intervention: float
    mean_baseline: float
    se_mean_baseline: float
    mean_intervention: float
    se_mean_intervention: float
    change: float
    se_change: float

    def rows(self, digits: int = 1) -> list[tuple[str, str, str]]:
        f = lambda v, s: f"{v:.{digits}f} ± {s:.{digits}f}"
        return [("Baseline", f(self.slope_baseline, self.se_baseline), f(self.mean_baseline, self.se_mean_baseline)),
                ("Intervention", f(self.slope_intervention, self.se_intervention),
                 f(self.mean_intervention, self.se_mean_intervention)),
                ("Change", "", f(self.change, self.se_change))]


def phase_slopes_newey_west(time: Sequence[float], phase: Sequence[int], y: Sequence[float],
                            lag: int | None = None) -> PhaseSlopes:
    """OLS of y on [1, t, phase, t*phase] with Newey-West covariance.

    Phase means are model-implied values at each phase's mean time.
    """
    t = np.asarray(time, dtype=np.float64)
    ph = np.asarray(phase, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if min(np.sum(ph == 0), np.sum(ph == 1)) < 3:
        raise ValueError("need at least three points per phase")
    X = np.column_stack([np.ones_like(t), t, ph, t * ph])
    if np.linalg.matrix_rank(X) < 4:
        raise ValueError("design is rank deficient (constant time within a phase?)")
    lag = default_lag(len(y)) if lag is None else int(lag)
    if lag < 0:
        raise ValueError("lag must be >= 0")
    beta, *_ = np.linalg.lstsq(X, y, rcond=None)
    cov = newey_west_cov(X, y - X @ beta, lag)

    def lin(c):
        c = np.asarray(c, dtype=np.float64)
        return float(c @ beta), math.sqrt(max(float(c @ cov @ c), 0.0))

    tb, ti = t[ph == 0].mean(), t[ph == 1].mean()
    cb, ci = np.array([1, tb, 0, 0]), np.array([1, ti, 1, ti])
    sb, seb = lin([0, 1, 0, 0])
    si, sei = lin([0, 1, 0, 1])
    mb, semb = lin(cb)
    mi, semi = lin(ci)
    ch, sech = lin(ci - cb)
    return PhaseSlopes(beta, cov, lag, sb, seb, si, sei, mb, semb, mi, semi, ch, sech)


# -- lowess ------------------------------------------------------------------------

def lowess_tricube(y: Sequence[float], x: Sequence[float] | None = None, bandwidth: float = 0.8) -> np.ndarray:
    """Running-mean lowess: tricube-weighted local mean over a symmetric index window.

    The half-width is k = floor((N * bandwidth - 0.5) / 2) points and the
    tricube scale is 1.0001 times the larger distance to the window edges.
    """
    y = np.asarray(y, dtype=np.float64)
    n = y.size
    if n < 2:
        raise ValueError("need at least two points")
    x = np.arange(n, dtype=np.float64) if x is None else np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    xs, ys = x[order], y[order]
    k = max(int(math.floor((n * bandwidth - 0.5) / 2.0)), 0)
    out = np.empty(n)
    for i in range(n):
        lo, hi = max(0, i - k), min(n, i + k + 1)
        d = np.abs(xs[lo:hi] - xs[i])
        delta = 1.0001 * d.max()
        w = np.ones_like(d) if delta == 0 else (1.0 - (d / delta) ** 3) ** 3
        out[i] = float(w @ ys[lo:hi] / w.sum())
    res = np.empty(n)
    res[order] = out
    return res


# -- report tables ------------------------------------------------------------------

def format_table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    cells = [list(map(str, header))] + [list(map(str, r)) for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def stability_table(dataset: LongitudinalDataset, measures: Sequence[str] | None = None) -> str:
    """Per-measure CV ± SE and ICC [95% CI] over the baseline phase."""
    rows = []
    for m in measures or dataset.measures:
        base = dataset.baseline(m)
        try:
            cv = baseline_cv(dataset, m).format()
        except ValueError as exc:
            cv = f"n/a ({exc})"
        try:
            icc = icc_reml(base["value"], base["participant"], base["time_weeks"]).format()
        except ValueError as exc:
            icc = f"n/a ({exc})"
        rows.append((m, cv, icc))
    return format_table(("Measure", "CV % (± SE)", "ICC [95% CI]"), rows)


def slopes_table(dataset: LongitudinalDataset, measure: str, lag: int | None = None,
                 digits: int | None = None) -> str:
    """Per-participant phase slopes and model-implied means (± Newey-West SE).

    ``digits`` defaults to 1, or 3 for measures bounded by one (AUC, rates).
    """
    if digits is None:
        vals = dataset.frame.loc[dataset.frame["measure"] == measure, "value"].abs()
        digits = 3 if vals.max() <= 1 else 1
    rows = []
    for pid in sorted(dataset.frame["participant"].unique()):
        s = dataset.series(pid, measure)
        try:
            res = phase_slopes_newey_west(s["time_weeks"], s["phase"], s["value"], lag)
        except ValueError as exc:
            rows.append((pid, "n/a", str(exc), ""))
            continue
        for label, slope, mean in res.rows(digits):
            rows.append((pid, label, slope, mean))
    return format_table(("Participant", "Phase", "Slope / week", "Mean"), rows)

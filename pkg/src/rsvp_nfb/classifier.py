"""Target/non-target classification of post-stimulus EEG epochs.

Epochs are the 500 ms after each letter at 150 Hz (2-45 Hz). Features are
7 channels x 25 three-sample means, z-scored with training statistics, and
scored by a regularized discriminant analysis (class covariances shrunk
toward the pooled covariance by ``lam`` and then toward a scaled identity by
``gam``). A Gaussian KDE per class turns scores into likelihood ratios.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import product
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg, stats

from .signalcore import EegBlock, bandpass_filter, downsample

logger = logging.getLogger(__name__)

EPOCH_RATE = 150.0
EPOCH_SECONDS = 0.5
EPOCH_SAMPLES = int(round(EPOCH_SECONDS * EPOCH_RATE))
FEATURE_DECIMATION = 3
CLASSIFIER_BAND = (2.0, 45.0)
DEFAULT_GRID = tuple(product((0.0, 0.25, 0.5, 0.75, 1.0), repeat=2))
LR_CLAMP = (1e-3, 1e3)
FORMAT_VERSION = 1


@dataclass
class EpochSet:
    epochs: np.ndarray  # (n_epochs, n_channels, EPOCH_SAMPLES)
    labels: np.ndarray  # bool, True = target
    event_ids: np.ndarray
    channels: tuple[str, ...] = ()
    dropped: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.epochs = np.asarray(self.epochs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=bool)
        self.event_ids = np.asarray(self.event_ids, dtype=np.int64)
        if not (len(self.epochs) == len(self.labels) == len(self.event_ids)):
            raise ValueError("epochs, labels and event ids differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "EpochSet":
        return EpochSet(self.epochs[idx], self.labels[idx], self.event_ids[idx], self.channels)


def preprocess_for_classifier(eeg: EegBlock) -> EegBlock:
    """Decimate to 150 Hz and apply the 2-45 Hz zero-phase bandpass."""
    if eeg.sample_rate != EPOCH_RATE:
        eeg = downsample(eeg, EPOCH_RATE)
    return bandpass_filter(eeg, *CLASSIFIER_BAND, mode="zero_phase")


def extract_epochs(eeg: EegBlock, log, preprocess: bool = True) -> EpochSet:
    """One 0-500 ms epoch per letter event; events running past the end are dropped."""
    if preprocess:
        eeg = preprocess_for_classifier(eeg)
    elif eeg.sample_rate != EPOCH_RATE:
        raise ValueError(f"epochs are cut at {EPOCH_RATE} Hz, got {eeg.sample_rate} Hz")
    letters = log.letters if hasattr(log, "letters") else list(log)
    rows, labels, ids, dropped = [], [], [], []
    for k, e in enumerate(letters):
        i0 = eeg.sample_index(e.t)
        if i0 < 0 or i0 + EPOCH_SAMPLES > eeg.n_samples:
            dropped.append(k)
            continue
        rows.append(eeg.data[:, i0:i0 + EPOCH_SAMPLES])
        labels.append(bool(e.is_target))
        ids.append(k)
    if dropped:
        logger.info("dropped %d epoch(s) too close to the recording edge: %s", len(dropped), dropped)
    shape = (0, len(eeg.channels), EPOCH_SAMPLES)
    epochs = np.stack(rows) if rows else np.empty(shape)
    return EpochSet(epochs, np.array(labels, bool), np.array(ids, np.int64), eeg.channels, dropped)


def epoch_features(epochs: np.ndarray) -> np.ndarray:
    n, c, s = epochs.shape
    usable = s - s % FEATURE_DECIMATION
    binned = epochs[:, :, :usable].reshape(n, c, usable // FEATURE_DECIMATION, FEATURE_DECIMATION)
    return binned.mean(axis=3).reshape(n, -1)


def auc(scores_target: Sequence[float], scores_nontarget: Sequence[float]) -> float:
    """Mann-Whitney AUC; ties count one half."""
    st = np.asarray(scores_target, dtype=np.float64).ravel()
    sn = np.asarray(scores_nontarget, dtype=np.float64).ravel()
    if st.size == 0 or sn.size == 0:
        raise ValueError("auc needs at least one score per class")
    ranks = stats.rankdata(np.concatenate([st, sn]))
    u = ranks[: st.size].sum() - st.size * (st.size + 1) / 2.0
    return float(u / (st.size * sn.size))


# -- RDA ---------------------------------------------------------------------

@dataclass
class _Scatter:
    means: np.ndarray  # (2, p): [non-target, target]
    scatters: np.ndarray  # (2, p, p)
    counts: np.ndarray  # (2,)


def _scatter(X: np.ndarray, y: np.ndarray) -> _Scatter:
    means, scatters, counts = [], [], []
    for cls in (False, True):
        Xk = X[y == cls]
        mu = Xk.mean(axis=0)
        D = Xk - mu
        means.append(mu)
        scatters.append(D.T @ D)
        counts.append(len(Xk))
    return _Scatter(np.array(means), np.array(scatters), np.array(counts, dtype=np.float64))


def regularized_covariances(sc: _Scatter, lam: float, gam: float) -> np.ndarray:
    p = sc.means.shape[1]
    pooled = sc.scatters.sum(axis=0)
    n = sc.counts.sum()
    covs = []
    for k in range(2):
        cov = ((1 - lam) * sc.scatters[k] + lam * pooled) / ((1 - lam) * sc.counts[k] + lam * n)
        cov = (1 - gam) * cov + gam * np.trace(cov) / p * np.eye(p)
        covs.append(cov)
    return np.array(covs)


def _cholesky(covs: np.ndarray, gam: float) -> np.ndarray:
    factors = []
    for cov in covs:
        try:
            L = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            L = None
        if L is None or np.min(np.diag(L)) <= 1e-8 * np.sqrt(np.max(np.diag(cov)) + 1e-300):
            hint = " raise gamma above 0" if gam == 0 else ""
            raise ValueError(f"regularized covariance is singular;{hint}")
        factors.append(L)
    return np.array(factors)


def _llr(Z: np.ndarray, means: np.ndarray, chol: np.ndarray) -> np.ndarray:
    out = np.zeros(len(Z))
    for k, sign in ((1, 1.0), (0, -1.0)):
        W = linalg.solve_triangular(chol[k], (Z - means[k]).T, lower=True)
        logdet = 2.0 * np.log(np.diag(chol[k])).sum()
        out += sign * -0.5 * ((W ** 2).sum(axis=0) + logdet)
    return out


@dataclass
class ClassifierModel:
    lam: float
    gam: float
    feature_mean: np.ndarray
    feature_scale: np.ndarray
    means: np.ndarray  # (2, p): [non-target, target] in z-scored feature space
    chol: np.ndarray  # (2, p, p) lower Cholesky factors of the class covariances
    channels: tuple[str, ...] = ()
    cv_auc: float | None = None
    kde_target: np.ndarray | None = None
    kde_nontarget: np.ndarray | None = None
    kde_bw: tuple[float, float] | None = None

    @property
    def covariances(self) -> np.ndarray:
        return np.einsum("kij,klj->kil", self.chol, self.chol)

    def score_features(self, F: np.ndarray) -> np.ndarray:
        """Log-likelihood ratio (target vs non-target) of raw feature rows."""
        Z = (np.atleast_2d(F) - self.feature_mean) / self.feature_scale
        return _llr(Z, self.means, self.chol)

    def score(self, epochs) -> np.ndarray:
        data = epochs.epochs if isinstance(epochs, EpochSet) else np.asarray(epochs)
        return self.score_features(epoch_features(data))

    @property
    def calibrated(self) -> bool:
        return self.kde_target is not None

    def likelihood_ratio(self, scores) -> np.ndarray:
        """Score-density ratio p_target / p_nontarget, clamped to [1e-3, 1e3]."""
        s = np.atleast_1d(np.asarray(scores, dtype=np.float64))
        if not self.calibrated:
            raise RuntimeError("model has no score-density calibration")
        if self.kde_bw is None:
            return np.ones_like(s)
        kt = stats.gaussian_kde(self.kde_target, bw_method=self.kde_bw[0])
        kn = stats.gaussian_kde(self.kde_nontarget, bw_method=self.kde_bw[1])
        log_lr = kt.logpdf(s) - kn.logpdf(s)
        lo, hi = np.log(LR_CLAMP[0]), np.log(LR_CLAMP[1])
        log_lr = np.where(np.isnan(log_lr), 0.0, log_lr)
        return np.exp(np.clip(log_lr, lo, hi))

    def to_dict(self) -> dict:
        arr = lambda a: None if a is None else np.asarray(a).tolist()  # noqa: E731
        return {
            "format_version": FORMAT_VERSION,
            "lam": self.lam, "gam": self.gam,
            "feature_mean": arr(self.feature_mean), "feature_scale": arr(self.feature_scale),
            "means": arr(self.means), "chol": arr(self.chol),
            "channels": list(self.channels), "cv_auc": self.cv_auc,
            "kde_target": arr(self.kde_target), "kde_nontarget": arr(self.kde_nontarget),
            "kde_bw": None if self.kde_bw is None else list(self.kde_bw),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model format {d.get('format_version')!r}")
        arr = lambda a: None if a is None else np.asarray(a, dtype=np.float64)  # noqa: E731
        return cls(
            d["lam"], d["gam"], arr(d["feature_mean"]), arr(d["feature_scale"]), arr(d["means"]),
            arr(d["chol"]), tuple(d["channels"]), d["cv_auc"], arr(d["kde_target"]),
            arr(d["kde_nontarget"]), None if d["kde_bw"] is None else tuple(d["kde_bw"]),
        )

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "ClassifierModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_rda(features: np.ndarray, labels: np.ndarray, lam: float, gam: float,
            channels: Sequence[str] = ()) -> ClassifierModel:
    """RDA on a raw feature matrix (rows = observations)."""
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if not (0 <= lam <= 1 and 0 <= gam <= 1):
        raise ValueError("lam and gam must lie in [0, 1]")
    n_t, n_n = int(y.sum()), int((~y).sum())
    if n_t == 0 or n_n == 0:
        raise ValueError("training data must contain both classes")
    if n_t < 2 or n_n < 2:
        raise ValueError("need at least two epochs per class")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    sc = _scatter(Z, y)
    chol = _cholesky(regularized_covariances(sc, lam, gam), gam)
    return ClassifierModel(lam, gam, mean, scale, sc.means, chol, tuple(channels))


def train_rda(train: EpochSet, lam: float, gam: float) -> ClassifierModel:
    return fit_rda(epoch_features(train.epochs), train.labels, lam, gam, train.channels)


def fold_assignment(labels: np.ndarray, event_ids: np.ndarray, folds: int, seed: int) -> np.ndarray:
    """Stratified folds that depend only on (event id, label, seed), not on row order."""
    labels = np.asarray(labels, dtype=bool)
    event_ids = np.asarray(event_ids)
    rng = np.random.default_rng([seed, 0xF01D])
    out = np.empty(len(labels), dtype=np.int64)
    for cls in (True, False):
        rows = np.flatnonzero(labels == cls)
        rows = rows[np.argsort(event_ids[rows], kind="stable")]
        perm = rng.permutation(len(rows))
        out[rows[perm]] = np.arange(len(rows)) % folds
    return out


@dataclass
class CrossValResult:
    lam: float
    gam: float
    cv_auc: float
    scores: np.ndarray  # held-out scores at the best grid point, sorted by event id
    labels: np.ndarray
    event_ids: np.ndarray
    grid_auc: dict = field(default_factory=dict)  # (lam, gam) -> mean held-out fold AUC


def crossval_auc(epochs: EpochSet, folds: int = 10, grid: Sequence[tuple[float, float]] = DEFAULT_GRID,
                 seed: int = 0) -> CrossValResult:
    """Grid search over (lam, gam) by mean held-out AUC; reports pooled held-out AUC."""
    order = np.argsort(epochs.event_ids, kind="stable")
    X = epoch_features(epochs.epochs[order])
    y = epochs.labels[order]
    ids = epochs.event_ids[order]
    if min(int(y.sum()), int((~y).sum())) < folds:
        raise ValueError(f"need at least {folds} epochs per class for {folds}-fold CV")
    fold = fold_assignment(y, ids, folds, seed)
    grid = [tuple(map(float, g)) for g in grid]
    held = {g: np.full(len(y), np.nan) for g in grid}
    for f in range(folds):
        tr, te = fold != f, fold == f
        mean = X[tr].mean(axis=0)
        scale = X[tr].std(axis=0)
        scale[scale == 0] = 1.0
        Ztr, Zte = (X[tr] - mean) / scale, (X[te] - mean) / scale
        sc = _scatter(Ztr, y[tr])
        for g in grid:
            try:
                chol = _cholesky(regularized_covariances(sc, *g), g[1])
            except ValueError:
                continue
            held[g][te] = _llr(Zte, sc.means, chol)
    grid_auc = {}
    for g in grid:
        s = held[g]
        if np.isnan(s).any():
            continue
        grid_auc[g] = float(np.mean([auc(s[(fold == f) & y], s[(fold == f) & ~y]) for f in range(folds)]))
    if not grid_auc:
        raise ValueError("every grid point produced a singular covariance")
    best = max(grid, key=lambda g: grid_auc.get(g, -np.inf))
    s = held[best]
    return CrossValResult(best[0], best[1], auc(s[y], s[~y]), s, y, ids, grid_auc)


def calibrate_from_scores(model: ClassifierModel, target_scores, nontarget_scores) -> ClassifierModel:
    st = np.asarray(target_scores, dtype=np.float64)
    sn = np.asarray(nontarget_scores, dtype=np.float64)
    model.kde_target, model.kde_nontarget = st.copy(), sn.copy()
    try:
        kt = stats.gaussian_kde(st, bw_method="silverman")
        kn = stats.gaussian_kde(sn, bw_method="silverman")
        model.kde_bw = (float(kt.factor), float(kn.factor))
    except (np.linalg.LinAlgError, ValueError):
        logger.warning("degenerate score distribution; likelihood ratio fixed at 1")
        model.kde_bw = None
    return model


def calibrate_score_densities(model: ClassifierModel, epochs: EpochSet) -> ClassifierModel:
    scores = model.score(epochs)
    return calibrate_from_scores(model, scores[epochs.labels], scores[~epochs.labels])


def fit_classifier(epochs: EpochSet, folds: int = 10, grid=DEFAULT_GRID, seed: int = 0) -> ClassifierModel:
    """Cross-validate, refit on all epochs, calibrate on the held-out scores."""
    cv = crossval_auc(epochs, folds, grid, seed)
    model = train_rda(epochs, cv.lam, cv.gam)
    model.cv_auc = cv.cv_auc
    return calibrate_from_scores(model, cv.scores[cv.labels], cv.scores[~cv.labels])

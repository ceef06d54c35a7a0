import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsvp_nfb.classifier import (EPOCH_SAMPLES, ClassifierModel, EpochSet, auc, calibrate_from_scores,
                                 crossval_auc, epoch_features, extract_epochs, fit_classifier, fit_rda,
                                 train_rda)
from rsvp_nfb.rsvp_task import Event, SessionLog
from rsvp_nfb.signalcore import DEFAULT_CHANNELS, EegBlock


def brute_auc(t, n):
    """Pairwise Mann-Whitney count, ties one half."""
    wins = sum((a > b) + 0.5 * (a == b) for a in t for b in n)
    return wins / (len(t) * len(n))


def synthetic_epochs(n=300, shift=0.0, seed=0, p_target=0.2):
    rng = np.random.default_rng(seed)
    labels = rng.random(n) < p_target
    labels[:10] = True
    labels[10:20] = False
    x = rng.standard_normal((n, 7, EPOCH_SAMPLES))
    bump = np.exp(-0.5 * ((np.arange(EPOCH_SAMPLES) - 45) / 6) ** 2)
    x[labels, 2:4, :] += shift * bump
    return EpochSet(x, labels, np.arange(n), DEFAULT_CHANNELS)


# -- auc ------------------------------------------------------------------------------

def test_auc_examples():
    assert auc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auc([0.3, 0.3, 0.1], [0.3, 0.3, 0.1]) == 0.5
    with pytest.raises(ValueError):
        auc([], [1.0])


def test_auc_matches_bruteforce_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = rng.integers(0, 6, rng.integers(1, 30)).astype(float)
        n = rng.integers(0, 6, rng.integers(1, 30)).astype(float)
        assert auc(t, n) == brute_auc(t, n)


score_lists = st.lists(st.integers(-20, 20).map(float), min_size=1, max_size=40)


@settings(max_examples=100, deadline=None)
@given(score_lists, score_lists)
def test_auc_properties(t, n):
    a = auc(t, n)
    assert a == brute_auc(t, n)
    assert auc(n, t) == pytest.approx(1 - a, abs=1e-12)
    # strictly monotone transform
    f = lambda v: np.exp(np.asarray(v) / 7.0) * 3 - 1  # noqa: E731
    assert auc(f(t), f(n)) == a


# -- RDA ------------------------------------------------------------------------------

def test_rda_separable_resubstitution():
    rng = np.random.default_rng(1)
    X = np.vstack([rng.standard_normal((100, 5)), rng.standard_normal((100, 5)) + 6])
    y = np.r_[np.zeros(100, bool), np.ones(100, bool)]
    m = fit_rda(X, y, 0.5, 0.1)
    s = m.score_features(X)
    assert auc(s[y], s[~y]) > 0.99
    assert np.allclose(m.covariances, m.covariances.transpose(0, 2, 1))
    assert np.all(np.linalg.eigvalsh(m.covariances) > 0)


def test_rda_chance_when_classes_identical():
    cv = crossval_auc(synthetic_epochs(400, shift=0.0, seed=2), folds=10, seed=0)
    assert abs(cv.cv_auc - 0.5) <= 0.08


def test_rda_fully_shrunk_is_nearest_mean():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((60, 4)) * [1, 2, 3, 4]
    y = np.arange(60) % 3 == 0
    X[y] += 1.5
    m = fit_rda(X, y, 1.0, 1.0)
    Z = (X - X.mean(0)) / X.std(0)
    mu0, mu1 = Z[~y].mean(0), Z[y].mean(0)
    pooled = ((Z[~y] - mu0).T @ (Z[~y] - mu0) + (Z[y] - mu1).T @ (Z[y] - mu1)) / len(Z)
    s2 = np.trace(pooled) / 4
    expected = -0.5 * (((Z - mu1) ** 2).sum(1) - ((Z - mu0) ** 2).sum(1)) / s2
    assert np.allclose(m.score_features(X), expected, rtol=1e-10, atol=1e-10)
    nearest_target = ((Z - mu1) ** 2).sum(1) < ((Z - mu0) ** 2).sum(1)
    assert np.array_equal(m.score_features(X) > 0, nearest_target)


def test_rda_errors():
    X = np.random.default_rng(0).standard_normal((10, 40))
    with pytest.raises(ValueError, match="both classes"):
        fit_rda(X, np.ones(10, bool), 0.5, 0.5)
    y = np.arange(10) < 5
    with pytest.raises(ValueError, match="raise gamma"):
        fit_rda(X, y, 0.0, 0.0)
    with pytest.raises(ValueError, match="two epochs"):
        fit_rda(X, np.arange(10) < 1, 0.5, 0.5)


def test_rda_duplicated_training_set_identical():
    ep = synthetic_epochs(120, shift=1.0, seed=4)
    dup = EpochSet(np.concatenate([ep.epochs, ep.epochs]), np.r_[ep.labels, ep.labels],
                   np.arange(240), ep.channels)
    a, b = train_rda(ep, 0.25, 0.5), train_rda(dup, 0.25, 0.5)
    for attr in ("feature_mean", "feature_scale", "means", "chol"):
        assert np.allclose(getattr(a, attr), getattr(b, attr), rtol=1e-10, atol=1e-12)


# -- cross-validation ------------------------------------------------------------------

def test_crossval_detects_signal_and_is_deterministic():
    ep = synthetic_epochs(300, shift=1.5, seed=5)
    a = crossval_auc(ep, folds=10, seed=3)
    b = crossval_auc(ep, folds=10, seed=3)
    assert a.cv_auc > 0.85
    assert a.cv_auc == b.cv_auc and (a.lam, a.gam) == (b.lam, b.gam)


def test_crossval_permutation_stable():
    ep = synthetic_epochs(250, shift=1.0, seed=6)
    perm = np.random.default_rng(0).permutation(len(ep))
    a = crossval_auc(ep, folds=10, seed=1)
    b = crossval_auc(ep.subset(perm), folds=10, seed=1)
    assert a.cv_auc == b.cv_auc
    assert np.array_equal(a.scores, b.scores)


def test_crossval_too_few():
    with pytest.raises(ValueError, match="at least"):
        crossval_auc(synthetic_epochs(40, seed=0, p_target=0.0), folds=15)


# -- epochs -----------------------------------------------------------------------------

def _impulse_session(n_events=5, onset0=1.0, spacing=1.0, total=None):
    fs = 300.0
    total = total or onset0 + n_events * spacing + 1.0
    n = int(total * fs)
    data = np.zeros((7, n))
    log = SessionLog()
    t = np.arange(n) / fs
    for k in range(n_events):
        on = onset0 + k * spacing
        log.append(Event("letter", on, symbol="A", is_target=k % 2 == 0, sequence=0))
        data += np.exp(-0.5 * ((t - on - 0.1) / 0.01) ** 2)
    return EegBlock(fs, DEFAULT_CHANNELS, data), log


def test_extract_epochs_impulse_index():
    eeg, log = _impulse_session()
    ep = extract_epochs(eeg, log)
    assert ep.epochs.shape == (5, 7, EPOCH_SAMPLES)
    assert np.all(np.argmax(ep.epochs[:, 2], axis=1) == 15)
    assert list(ep.labels) == [True, False, True, False, True]


def test_extract_epochs_drops_edge(caplog):
    eeg, log = _impulse_session(n_events=3, total=3.0 + 0.2)
    with caplog.at_level(logging.INFO):
        ep = extract_epochs(eeg, log)
    assert len(ep) == 2 and ep.dropped == [2]


def test_feature_shape():
    assert epoch_features(np.zeros((3, 7, EPOCH_SAMPLES))).shape == (3, 175)


# -- calibration ------------------------------------------------------------------------

def _dummy_model():
    ep = synthetic_epochs(100, shift=1.0, seed=7)
    return train_rda(ep, 0.5, 0.5)


def test_likelihood_ratio_direction_and_crossing():
    rng = np.random.default_rng(0)
    target = rng.normal(2, 1, 3000)
    m = calibrate_from_scores(_dummy_model(), target, -target)
    assert m.likelihood_ratio(4.0)[0] > 1
    assert m.likelihood_ratio(-4.0)[0] < 1
    # mirrored densities cross at zero
    assert m.likelihood_ratio(0.0)[0] == pytest.approx(1.0, abs=1e-9)
    lr = m.likelihood_ratio(np.linspace(-50, 50, 11))
    assert lr.min() >= 1e-3 and lr.max() <= 1e3


def test_likelihood_ratio_importance_identity():
    rng = np.random.default_rng(1)
    m = calibrate_from_scores(_dummy_model(), rng.normal(1, 1, 1500), rng.normal(0, 1, 1500))
    draws = rng.normal(0, 1, 5000)
    assert abs(m.likelihood_ratio(draws).mean() - 1) < 0.1


def test_degenerate_scores_give_unit_lr(caplog):
    with caplog.at_level(logging.WARNING):
        m = calibrate_from_scores(_dummy_model(), np.ones(20), np.ones(30))
    assert "degenerate" in caplog.text
    assert np.all(m.likelihood_ratio([0.0, 5.0]) == 1.0)


def test_model_json_roundtrip(tmp_path):
    ep = synthetic_epochs(200, shift=1.0, seed=8)
    m = fit_classifier(ep, folds=5, seed=0)
    m.write(tmp_path / "model.json")
    back = ClassifierModel.read(tmp_path / "model.json")
    assert back.cv_auc == m.cv_auc
    assert np.array_equal(back.score(ep), m.score(ep))
    assert np.array_equal(back.likelihood_ratio([0.1, 1.0]), m.likelihood_ratio([0.1, 1.0]))

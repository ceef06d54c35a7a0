import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from helpers import erp_recovery_run, low_activity_range_epoch, recovery_truth, rule_epoch
from rsvp_nfb.erp import (RULES, ErpEpoch, Segmentation, analyze_session, average_erp, detect_peaks,
                          epoch_times_ms, preprocess_offline, reject_artifacts, remove_blinks, rule_flags,
                          segment_and_baseline, write_average_csv, write_peak_table)
from rsvp_nfb.rsvp_task import Event, SessionLog
from rsvp_nfb.signalcore import DEFAULT_CHANNELS, EegBlock, welch_psd
from rsvp_nfb.simsubject import SubjectProfile, erp_template, generate_sequence_eeg

FS = 300.0


def _log(onsets, targets=None):
    log = SessionLog()
    for k, t in enumerate(onsets):
        log.append(Event("letter", t, symbol="A", is_target=True if targets is None else targets[k], sequence=k))
    return log


# -- preprocessing ------------------------------------------------------------------------------

def test_preprocess_notch_rate_and_passband():
    t = np.arange(int(20 * FS)) / FS
    x = np.sin(2 * np.pi * 9 * t) + np.sin(2 * np.pi * 60 * t)
    out = preprocess_offline(EegBlock(FS, ("Pz",), x))
    assert out.sample_rate == 150
    f_in, p_in = welch_psd(x, FS)
    f_out, p_out = welch_psd(out.data[0][300:-300], 150)
    i60_in, i60_out = np.argmin(abs(f_in - 60)), np.argmin(abs(f_out - 60))
    assert 10 * np.log10(p_out[i60_out] / p_in[i60_in]) <= -20
    core = out.data[0][300:-300]
    assert abs(np.sqrt(2) * core.std() - 1) < 0.05


# -- blink removal -------------------------------------------------------------------------------

def _blink_pair(seed, duration=120.0):
    base = SubjectProfile(blink_rate=0, noise_scale=10)
    blinky = SubjectProfile(blink_rate=20, blink_amp=150, blink_bleed=0.2, noise_scale=10)
    clean = generate_sequence_eeg(base, 0.6, [], duration, rng=seed)
    dirty = generate_sequence_eeg(blinky, 0.6, [], duration, rng=seed)
    return clean, dirty


@pytest.mark.parametrize("seed", range(5))
def test_blink_coefficient_and_residue(seed):
    clean, dirty = _blink_pair(seed)
    r = remove_blinks(dirty)
    assert abs(r.coefficients["FCz"] / 0.2 - 1) <= 0.10
    i = dirty.index("FCz")
    injected = dirty.data[i] - clean.data[i]
    residue = r.eeg.data[i] - clean.data[i]
    assert abs(residue @ injected) / (injected @ injected) < 0.10
    # samples outside the blink segments are untouched
    out = ~r.blink_mask
    assert np.array_equal(r.eeg.data[:, out], dirty.data[:, out])
    assert np.array_equal(r.eeg.channel("F7"), dirty.channel("F7"))


def test_blink_free_is_identity():
    clean, _ = _blink_pair(0, 20.0)
    r = remove_blinks(clean)
    assert r.eeg is clean and r.note == "no blink segments found"


def test_blink_requires_eog_channel():
    with pytest.raises(ValueError):
        remove_blinks(EegBlock(FS, ("Pz",), np.zeros(100)))


# -- segmentation ---------------------------------------------------------------------------------

def test_epoch_length_and_baseline():
    rng = np.random.default_rng(0)
    eeg = EegBlock(150, DEFAULT_CHANNELS, rng.standard_normal((7, 1500)) + 40.0)
    seg = segment_and_baseline(eeg, _log([2.0, 5.0]))
    assert len(seg.epochs) == 2 and seg.epochs[0].data.shape == (7, 181)
    assert np.all(np.abs(seg.epochs[0].data[:, :30].mean(axis=1)) < 1e-9)
    assert seg.times_ms[0] == -200 and seg.times_ms[-1] == 1000


def test_constant_offset_gives_zero_epochs():
    eeg = EegBlock(150, DEFAULT_CHANNELS, np.full((7, 900), 12.5))
    seg = segment_and_baseline(eeg, _log([2.0]))
    assert np.allclose(seg.epochs[0].data, 0, atol=1e-12)


def test_template_index_arithmetic():
    data = np.zeros((7, 900))
    data[:, int(2.0 * 150) + 45] = 1.0  # onset 2 s, +300 ms
    seg = segment_and_baseline(EegBlock(150, DEFAULT_CHANNELS, data), _log([2.0]))
    assert int(np.argmax(seg.epochs[0].data[0])) == 75


def test_boundary_epochs_dropped():
    eeg = EegBlock(150, DEFAULT_CHANNELS, np.zeros((7, 900)))
    seg = segment_and_baseline(eeg, _log([0.1, 2.0, 5.5]))
    assert seg.dropped == [0, 2] and len(seg.epochs) == 1


# -- rejection ------------------------------------------------------------------------------------

@pytest.mark.parametrize("rule", RULES)
def test_rules_fire_just_past_threshold(rule):
    assert rule_flags(rule_epoch(rule, 1.01))[rule]
    assert not rule_flags(rule_epoch(rule, 0.99))[rule]


def test_low_activity_range_threshold():
    assert rule_flags(low_activity_range_epoch(0.99))["low_activity"]
    assert not rule_flags(low_activity_range_epoch(1.01))["low_activity"]


def test_rule_examples():
    x = np.zeros((1, 181))
    x[0, 90:] = 400.0
    assert rule_flags(x)["step"]
    # a 60 uV one-sample step is 9 uV/ms at 150 Hz, under the 50 uV/ms limit
    x[0, 90:] = 60.0
    assert not rule_flags(x)["step"]
    t = np.arange(181) / 150
    alpha = 10 * np.sin(2 * np.pi * 10 * t)
    assert not any(rule_flags(alpha[np.newaxis]).values())
    flat = alpha.copy()
    flat[40:63] = 0.3  # 150 ms
    assert rule_flags(flat[np.newaxis])["low_activity"]
    spike = alpha.copy()
    spike[100] = 80.0
    assert rule_flags(spike[np.newaxis])["amplitude"]


@settings(max_examples=50, deadline=None)
@given(st.sampled_from(RULES), st.floats(0.2, 0.98))
def test_rules_silent_below_threshold(rule, c):
    assert not rule_flags(rule_epoch(rule, c))[rule]


def test_reject_artifacts_channel_subset():
    good = np.tile(10 * np.sin(np.linspace(0, 20, 181)), (7, 1))
    bad = good.copy()
    bad[1, 100] = 200.0  # F7 only
    seg = Segmentation([ErpEpoch(bad, True, 0)], DEFAULT_CHANNELS, 150.0, [])
    assert reject_artifacts(seg).epochs[0].rejected
    chans = [c for c in DEFAULT_CHANNELS if c != "F7"]
    assert not reject_artifacts(seg, chans).epochs[0].rejected


# -- averaging --------------------------------------------------------------------------------------

def _seg(datas, targets=None, flags=None):
    eps = []
    for k, d in enumerate(datas):
        ep = ErpEpoch(np.atleast_2d(d), True if targets is None else targets[k], k)
        if flags and flags[k]:
            ep.flags["amplitude"] = True
        eps.append(ep)
    return Segmentation(eps, ("Pz",), 150.0, [])


def test_average_identical_epochs():
    x = np.random.default_rng(0).standard_normal(181)
    avg = average_erp(_seg([x] * 5))
    assert np.allclose(avg.channel("Pz"), x) and avg.n == 5


def test_average_clt_bound():
    rng = np.random.default_rng(1)
    t = epoch_times_ms()
    tmpl = erp_template(SubjectProfile(p300_amp=8, n200_amp=5), t)
    sigma, n = 5.0, 400
    avg = average_erp(_seg([tmpl + sigma * rng.standard_normal(181) for _ in range(n)]))
    assert np.all(np.abs(avg.channel("Pz") - tmpl) < 4 * sigma / np.sqrt(n))
    assert np.mean(np.abs(avg.channel("Pz") - tmpl) < 3 * sigma / np.sqrt(n)) > 0.99


def test_average_excludes_rejected_and_filters_labels():
    rng = np.random.default_rng(2)
    xs = [rng.standard_normal(181) for _ in range(6)]
    flags = [False, True, False, False, True, False]
    a = average_erp(_seg(xs, flags=flags))
    mutated = [x * (100 if f else 1) for x, f in zip(xs, flags)]
    b = average_erp(_seg(mutated, flags=flags))
    assert np.array_equal(a.waveform, b.waveform) and a.n == 4
    nt = average_erp(_seg(xs, targets=[True, False] * 3), target=False)
    assert np.allclose(nt.channel("Pz"), np.mean(xs[1::2], axis=0))
    with pytest.raises(ValueError):
        average_erp(_seg(xs, flags=[True] * 6))


@settings(max_examples=30, deadline=None)
@given(st.floats(-50, 50))
def test_average_linear(a):
    rng = np.random.default_rng(3)
    xs = [rng.standard_normal(181) for _ in range(4)]
    lhs = average_erp(_seg([a * x for x in xs])).waveform
    assert np.allclose(lhs, a * average_erp(_seg(xs)).waveform, atol=1e-12)


# -- peaks --------------------------------------------------------------------------------------------

def test_noiseless_template_peaks():
    n200, p300 = recovery_truth()
    assert abs(n200.latency_ms - 300) <= 1000 / 150 and abs(p300.latency_ms - 400) <= 1000 / 150
    assert p300.amplitude_uv == pytest.approx(13.0, abs=0.1)
    assert 250 <= n200.latency_ms <= 400 and 350 <= p300.latency_ms <= 500
    assert not n200.low_confidence and not p300.low_confidence


@pytest.mark.parametrize("lat", [270.0, 330.0, 380.0])
def test_latency_within_one_sample(lat):
    t = epoch_times_ms()
    prof = SubjectProfile(n200_latency=lat, p300_latency=lat + 90)
    n200, p300 = detect_peaks(erp_template(prof, t), t)
    assert abs(n200.latency_ms - lat) <= 1000 / 150
    assert abs(p300.latency_ms - lat - 90) <= 1000 / 150


def test_flat_waveform():
    n200, p300 = detect_peaks(np.zeros(181))
    assert n200.amplitude_uv == 0 and p300.amplitude_uv == 0
    assert n200.low_confidence and p300.low_confidence


def test_positive_only_flags_n200():
    t = epoch_times_ms()
    n200, p300 = detect_peaks(erp_template(SubjectProfile(n200_amp=0, p300_amp=8), t), t)
    assert n200.low_confidence
    # nothing negative precedes the P300 either, so it falls back to the window start
    assert p300.latency_ms == 400 and p300.low_confidence


def test_preceding_peak_is_most_recent():
    t = epoch_times_ms()
    # two troughs before the P300: the later, shallower one is the reference
    x = (-6 * np.exp(-0.5 * ((t - 240) / 12) ** 2) - 2 * np.exp(-0.5 * ((t - 320) / 12) ** 2)
         + 8 * np.exp(-0.5 * ((t - 420) / 25) ** 2))
    _, p300 = detect_peaks(x, t)
    j = np.argmin(np.where((t > 280) & (t < 360), x, np.inf))
    assert p300.amplitude_uv == pytest.approx(p300.peak_uv - x[j])


# -- full pipeline ----------------------------------------------------------------------------------------

def test_pipeline_recovers_injected_components():
    truth = recovery_truth()
    res = erp_recovery_run(seed=0)
    assert res.target.n == 300
    for est, tr in zip((res.n200, res.p300), truth):
        assert abs(est.latency_ms - tr.latency_ms) <= 10
    assert abs(res.p300.amplitude_uv / truth[1].amplitude_uv - 1) <= 0.10


def test_tables(tmp_path):
    res = erp_recovery_run(seed=1, n_targets=60)
    write_peak_table([("B01", res)], tmp_path / "peaks.csv")
    rows = list(csv.DictReader(open(tmp_path / "peaks.csv")))
    assert [r["component"] for r in rows] == ["N200", "P300"]
    assert int(rows[0]["n_epochs"]) == res.target.n
    write_average_csv(res.target, tmp_path / "avg.csv")
    lines = open(tmp_path / "avg.csv").read().splitlines()
    assert lines[0].split(",")[0] == "time_ms" and len(lines) == 182


def test_analyze_session_requires_targets():
    eeg = EegBlock(FS, DEFAULT_CHANNELS, np.random.default_rng(0).standard_normal((7, 3000)))
    with pytest.raises(ValueError):
        analyze_session(eeg, _log([2.0, 4.0], [False, False]))

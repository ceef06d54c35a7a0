"""Constructors shared by the unit and acceptance suites."""

import numpy as np

from rsvp_nfb.erp import (CHANGE_INTERVAL_MS, ERP_RATE, LOW_ACTIVITY_MS, LOW_ACTIVITY_UV, MAX_ABS_UV,
                          MAX_CHANGE_UV, MAX_STEP_UV_PER_MS, analyze_session, detect_peaks, epoch_times_ms)
from rsvp_nfb.rsvp_task import Event, SessionLog
from rsvp_nfb.signalcore import DEFAULT_CHANNELS, EegBlock
from rsvp_nfb.simsubject import ERP_CHANNELS, SubjectProfile, erp_template, pink_noise

N_EPOCH = 181
DT_MS = 1000.0 / ERP_RATE


def _alternating(n, amp=5.0):
    return amp * (-1.0) ** np.arange(n)


def rule_epoch(rule: str, c: float) -> np.ndarray:
    """One-channel epoch whose quantity tested by ``rule`` equals ``c`` x its threshold.

    For ``low_activity`` the scaled quantity is the flat run's duration, so
    the rule fires above 1x like the other three.
    """
    x = np.zeros(N_EPOCH)
    if rule == "step":
        x[90:] = c * MAX_STEP_UV_PER_MS * DT_MS
    elif rule == "change":
        # ramp spanning exactly one change window, centred on zero
        n = int(np.ceil(CHANGE_INTERVAL_MS / DT_MS))
        ramp = np.linspace(-0.5, 0.5, n) * c * MAX_CHANGE_UV
        x[:60] = ramp[0]
        x[60:60 + n] = ramp
        x[60 + n:] = ramp[-1]
    elif rule == "amplitude":
        t = np.arange(N_EPOCH) * DT_MS
        x = c * MAX_ABS_UV * np.exp(-0.5 * ((t - 600.0) / 30.0) ** 2)
    elif rule == "low_activity":
        x = _alternating(N_EPOCH)
        n_flat = int(np.floor(c * LOW_ACTIVITY_MS / DT_MS + 1e-9)) + 1
        x[50:50 + n_flat] = 0.3
    else:
        raise ValueError(rule)
    return x[np.newaxis, :]


def low_activity_range_epoch(c: float) -> np.ndarray:
    """Flat run of the critical length whose range is ``c`` x 0.5 uV."""
    x = _alternating(N_EPOCH)
    n = int(np.floor(LOW_ACTIVITY_MS / DT_MS + 1e-9)) + 1
    x[50:50 + n] = 20.0 + np.linspace(0, c * LOW_ACTIVITY_UV, n)
    return x[np.newaxis, :]


RECOVERY_PROFILE = SubjectProfile(p300_amp=8.0, n200_amp=5.0)


def recovery_truth():
    t = epoch_times_ms()
    return detect_peaks(erp_template(RECOVERY_PROFILE, t), t)


def erp_recovery_run(seed: int, n_targets: int = 300, soa: float = 1.5, snr: float = 1.0):
    """Targets every ``soa`` s in pink noise whose raw RMS is P300 peak / ``snr``."""
    fs = 300.0
    rng = np.random.default_rng(seed)
    n = int((n_targets * soa + 2) * fs)
    data = pink_noise(rng, (len(DEFAULT_CHANNELS), n), RECOVERY_PROFILE.p300_amp / snr)
    rows = [DEFAULT_CHANNELS.index(c) for c in ERP_CHANNELS]
    tt = np.arange(int(0.9 * fs)) / fs * 1000
    wave = erp_template(RECOVERY_PROFILE, tt)
    log = SessionLog()
    for k in range(n_targets):
        on = 1.0 + k * soa
        log.append(Event("letter", on, symbol="Z", is_target=True, sequence=k))
        i0 = int(round(on * fs))
        data[rows, i0:i0 + tt.size] += wave
    return analyze_session(EegBlock(fs, DEFAULT_CHANNELS, data), log)


# -- acceptance reporting ------------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def report(number: int, ok: bool, detail: str) -> None:
    """Record a one-line verdict for the terminal summary, then assert it."""
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line

"""Offline ERP pipeline: filtering, blink removal, epoching, artifact rejection,
averaging and N200/P300 peak measurement."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage, signal

from .signalcore import EegBlock, bandpass_filter, downsample, notch_filter

logger = logging.getLogger(__name__)

ERP_RATE = 150.0
OFFLINE_BAND = (1.0, 45.0)
LINE_FREQ = 60.0
EPOCH_WINDOW_MS = (-200.0, 1000.0)

BLINK_THRESHOLD_UV = 75.0
BLINK_MARGIN_S = 0.15

# Rejection thresholds.
MAX_STEP_UV_PER_MS = 50.0
MAX_CHANGE_UV = 125.0
CHANGE_INTERVAL_MS = 50.0
MAX_ABS_UV = 75.0
LOW_ACTIVITY_UV = 0.5
LOW_ACTIVITY_MS = 100.0

N200_WINDOW_MS = (250.0, 400.0)
P300_WINDOW_MS = (350.0, 500.0)
OPPOSITE_PEAK_SEARCH_MS = 200.0

RULES = ("step", "change", "amplitude", "low_activity")


def preprocess_offline(eeg: EegBlock) -> EegBlock:
    """Decimate to 150 Hz, 1-45 Hz zero-phase bandpass, 60 Hz notch."""
    if eeg.sample_rate != ERP_RATE:
        eeg = downsample(eeg, ERP_RATE)
    eeg = bandpass_filter(eeg, *OFFLINE_BAND, mode="zero_phase")
    return notch_filter(eeg, LINE_FREQ)


@dataclass
class BlinkRemoval:
    eeg: EegBlock
    coefficients: dict[str, float]
    blink_mask: np.ndarray
    note: str = ""


def remove_blinks(eeg: EegBlock, eog_channel: str = "F7",
                  threshold: float = BLINK_THRESHOLD_UV, margin: float = BLINK_MARGIN_S) -> BlinkRemoval:
    """EOG-regression blink removal.

    Blink segments are samples where |EOG| exceeds ``threshold``, widened by
    ``margin`` seconds on each side to take in the blink's flanks. For every
    other channel a propagation coefficient b is fitted on those segments and
    b x EOG is subtracted inside them; samples outside blinks are untouched.
    """
    eog = eeg.channel(eog_channel)
    core = np.abs(eog) > threshold
    if not core.any():
        return BlinkRemoval(eeg, {}, core, note="no blink segments found")
    pad = int(round(margin * eeg.sample_rate))
    mask = ndimage.binary_dilation(core, iterations=pad) if pad else core
    # Each segment is linearly detrended before the pooled fit so slow
    # background drift under the blink does not leak into b.
    labels, n_seg = ndimage.label(mask)
    segs = ndimage.find_objects(labels)
    e = np.concatenate([signal.detrend(eog[s]) for s in segs])
    data = eeg.data.copy()
    coefs = {}
    for i, ch in enumerate(eeg.channels):
        if ch == eog_channel:
            continue
        y = np.concatenate([signal.detrend(data[i][s]) for s in segs])
        b = float(np.dot(e, y) / np.dot(e, e))
        coefs[ch] = b
        data[i, mask] -= b * eog[mask]
    return BlinkRemoval(eeg.with_data(data), coefs, mask)


@dataclass
class ErpEpoch:
    data: np.ndarray  # (n_channels, n_samples), baseline corrected
    is_target: bool
    event_index: int
    flags: dict[str, bool] = field(default_factory=lambda: dict.fromkeys(RULES, False))

    @property
    def rejected(self) -> bool:
        return any(self.flags.values())


@dataclass
class Segmentation:
    epochs: list[ErpEpoch]
    channels: tuple[str, ...]
    sample_rate: float
    dropped: list[int]

    @property
    def times_ms(self) -> np.ndarray:
        return epoch_times_ms(self.sample_rate)


def epoch_times_ms(sample_rate: float = ERP_RATE) -> np.ndarray:
    pre = int(round(-EPOCH_WINDOW_MS[0] / 1000 * sample_rate))
    post = int(round(EPOCH_WINDOW_MS[1] / 1000 * sample_rate))
    return np.arange(-pre, post + 1) / sample_rate * 1000.0


def segment_and_baseline(eeg: EegBlock, log) -> Segmentation:
    """-200..+1000 ms epochs around each letter, minus the 200 ms pre-stimulus mean."""
    fs = eeg.sample_rate
    pre = int(round(-EPOCH_WINDOW_MS[0] / 1000 * fs))
    post = int(round(EPOCH_WINDOW_MS[1] / 1000 * fs))
    letters = log.letters if hasattr(log, "letters") else list(log)
    epochs, dropped = [], []
    for k, e in enumerate(letters):
        i0 = eeg.sample_index(e.t)
        if i0 - pre < 0 or i0 + post + 1 > eeg.n_samples:
            dropped.append(k)
            continue
        seg = eeg.data[:, i0 - pre:i0 + post + 1]
        seg = seg - seg[:, :pre].mean(axis=1, keepdims=True)
        epochs.append(ErpEpoch(seg, bool(e.is_target), k))
    if dropped:
        logger.info("dropped %d boundary epoch(s)", len(dropped))
    return Segmentation(epochs, eeg.channels, fs, dropped)


def _window_range(x: np.ndarray, n: int) -> np.ndarray:
    """max - min over every run of ``n`` consecutive samples (per row)."""
    w = np.lib.stride_tricks.sliding_window_view(x, n, axis=-1)
    return w.max(axis=-1) - w.min(axis=-1)


def rule_flags(data: np.ndarray, sample_rate: float = ERP_RATE) -> dict[str, bool]:
    """Evaluate the four rejection rules on one (channels, samples) epoch."""
    x = np.atleast_2d(data)
    dt_ms = 1000.0 / sample_rate
    n_change = max(2, int(np.ceil(CHANGE_INTERVAL_MS / dt_ms - 1e-9)))
    n_low = int(np.floor(LOW_ACTIVITY_MS / dt_ms + 1e-9)) + 1
    flags = {
        "step": bool((np.abs(np.diff(x, axis=1)) / dt_ms > MAX_STEP_UV_PER_MS).any()),
        "change": bool(x.shape[1] >= n_change and (_window_range(x, n_change) > MAX_CHANGE_UV).any()),
        "amplitude": bool((np.abs(x) > MAX_ABS_UV).any()),
        "low_activity": bool(x.shape[1] >= n_low and (_window_range(x, n_low) < LOW_ACTIVITY_UV).any()),
    }
    return flags


def reject_artifacts(seg: Segmentation, channels: Sequence[str] | None = None) -> Segmentation:
    """Set per-rule flags on every epoch, checking ``channels`` (default all)."""
    rows = list(range(len(seg.channels))) if channels is None else [seg.channels.index(c) for c in channels]
    for ep in seg.epochs:
        ep.flags = rule_flags(ep.data[rows], seg.sample_rate)
    return seg


@dataclass
class ErpAverage:
    waveform: np.ndarray  # (n_channels, n_samples)
    n: int
    channels: tuple[str, ...]
    times_ms: np.ndarray

    def channel(self, label: str) -> np.ndarray:
        return self.waveform[self.channels.index(label)]


def average_erp(seg: Segmentation, target: bool | None = True) -> ErpAverage:
    """Mean over accepted epochs, optionally restricted to targets or non-targets."""
    chosen = [ep.data for ep in seg.epochs
              if not ep.rejected and (target is None or ep.is_target == target)]
    if not chosen:
        raise ValueError("no accepted epochs to average")
    return ErpAverage(np.mean(chosen, axis=0), len(chosen), seg.channels, seg.times_ms)


@dataclass
class PeakMeasurement:
    component: str
    latency_ms: float
    peak_uv: float
    amplitude_uv: float  # peak-to-trough
    low_confidence: bool
    notes: list[str] = field(default_factory=list)


def _local_extrema(x: np.ndarray, positive: bool) -> np.ndarray:
    d = np.diff(x)
    if positive:
        return np.flatnonzero((d[:-1] > 0) & (d[1:] <= 0)) + 1
    return np.flatnonzero((d[:-1] < 0) & (d[1:] >= 0)) + 1


def _measure(x: np.ndarray, times: np.ndarray, window: tuple[float, float], positive: bool,
             name: str) -> PeakMeasurement:
    idx = np.flatnonzero((times >= window[0] - 1e-9) & (times <= window[1] + 1e-9))
    if idx.size == 0:
        raise ValueError(f"waveform does not cover the {name} window {window} ms")
    seg = x[idx]
    k = int(idx[np.argmax(seg)] if positive else idx[np.argmin(seg)])
    notes = []
    low = False
    if k in (idx[0], idx[-1]):
        low = True
        notes.append("peak on window boundary")
    # Most recent opposite-polarity peak within the search range before the peak.
    start = int(np.searchsorted(times, times[k] - OPPOSITE_PEAK_SEARCH_MS - 1e-9))
    cand = _local_extrema(x[start:k + 1], not positive)
    if cand.size:
        j = start + int(cand[-1])
    else:
        j = int(idx[0])
        low = True
        notes.append("no preceding opposite peak; used window-start voltage")
    amp = x[k] - x[j] if positive else x[j] - x[k]
    return PeakMeasurement(name, float(times[k]), float(x[k]), float(amp), low, notes)


def detect_peaks(waveform: np.ndarray, times_ms: np.ndarray | None = None
                 ) -> tuple[PeakMeasurement, PeakMeasurement]:
    """N200 = minimum in 250-400 ms, P300 = maximum in 350-500 ms, peak-to-trough amplitudes."""
    x = np.asarray(waveform, dtype=np.float64)
    times = epoch_times_ms() if times_ms is None else np.asarray(times_ms)
    return (_measure(x, times, N200_WINDOW_MS, False, "N200"),
            _measure(x, times, P300_WINDOW_MS, True, "P300"))


@dataclass
class ErpAnalysis:
    target: ErpAverage
    nontarget: ErpAverage | None
    n200: PeakMeasurement
    p300: PeakMeasurement
    channel: str
    n_rejected: int
    blink_note: str = ""


BlinkStage = Callable[[EegBlock], BlinkRemoval]


def analyze_session(eeg: EegBlock, log, channel: str = "Pz", eog_channel: str = "F7",
                    blink_stage: BlinkStage | None = None) -> ErpAnalysis:
    """Full offline chain for one recording; rejection ignores the EOG channel."""
    pre = preprocess_offline(eeg)
    stage = blink_stage or (lambda b: remove_blinks(b, eog_channel))
    cleaned = stage(pre) if eog_channel in pre.channels else BlinkRemoval(pre, {}, np.zeros(0, bool))
    seg = segment_and_baseline(cleaned.eeg, log)
    checked = [c for c in seg.channels if c != eog_channel]
    reject_artifacts(seg, checked)
    target = average_erp(seg, True)
    try:
        nontarget = average_erp(seg, False)
    except ValueError:
        nontarget = None
    n200, p300 = detect_peaks(target.channel(channel), target.times_ms)
    n_rej = sum(ep.rejected for ep in seg.epochs)
    return ErpAnalysis(target, nontarget, n200, p300, channel, n_rej, cleaned.note)


PEAK_COLUMNS = ("session", "channel", "component", "latency_ms", "amplitude_uv", "n_epochs", "flags")


def write_peak_table(rows: Iterable[tuple[str, ErpAnalysis]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PEAK_COLUMNS)
        for session, a in rows:
            for pk in (a.n200, a.p300):
                flags = "low_confidence" if pk.low_confidence else ""
                w.writerow([session, a.channel, pk.component, f"{pk.latency_ms:.2f}",
                            f"{pk.amplitude_uv:.4f}", a.target.n, flags])


def write_average_csv(avg: ErpAverage, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("time_ms",) + avg.channels)
        for i, t in enumerate(avg.times_ms):
            w.writerow([f"{t:.3f}"] + [f"{v:.6f}" for v in avg.waveform[:, i]])

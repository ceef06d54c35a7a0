"""DSP primitives: filtering, decimation, Welch PSD and relative band power.

All arrays are float64 and laid out as (channels, samples).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
from scipy import signal

DEFAULT_CHANNELS = ("FCz", "F7", "Pz", "P4", "PO7", "PO8", "Oz")
POSTERIOR_CHANNELS = ("Pz", "P4", "PO7", "PO8", "Oz")

TARGET_BAND = (8.0, 10.0)
WIDE_BAND = (7.0, 20.0)

FILTER_ORDER = 4
NOTCH_Q = 30.0
WELCH_SEGMENT_S = 2.0
WELCH_OVERLAP = 0.5

FilterMode = Literal["causal", "zero_phase"]


@dataclass(frozen=True)
class EegBlock:
    """Fixed-rate multichannel recording in microvolts.

    ``data`` has shape (n_channels, n_samples); ``t0`` is the time of the
    first sample in seconds.
    """

    sample_rate: float
    channels: tuple[str, ...]
    data: np.ndarray = field(repr=False)
    t0: float = 0.0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2:
            raise ValueError(f"EEG data must be 2-D (channels, samples), got shape {data.shape}")
        channels = tuple(self.channels)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if len(set(channels)) != len(channels):
            raise ValueError(f"channel labels must be unique: {channels}")
        if data.shape[0] != len(channels):
            raise ValueError(f"{len(channels)} channel labels for {data.shape[0]} data rows")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))
        object.__setattr__(self, "t0", float(self.t0))

    @property
    def n_samples(self) -> int:
        return self.data.shape[1]

    @property
    def duration(self) -> float:
        return self.n_samples / self.sample_rate

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sample_rate

    def index(self, channel: str) -> int:
        try:
            return self.channels.index(channel)
        except ValueError:
            raise ValueError(f"unknown channel {channel!r}; have {self.channels}") from None

    def channel(self, label: str) -> np.ndarray:
        return self.data[self.index(label)]

    def sample_index(self, t: float) -> int:
        """Nearest sample index for absolute time ``t``."""
        return int(round((t - self.t0) * self.sample_rate))

    def with_data(self, data: np.ndarray, sample_rate: float | None = None) -> "EegBlock":
        return replace(self, data=data, sample_rate=sample_rate or self.sample_rate)

    def canonical(self, order: Sequence[str] = DEFAULT_CHANNELS) -> "EegBlock":
        """Reorder channels to ``order`` (channels not in ``order`` go last)."""
        ranked = sorted(self.channels, key=lambda c: (order.index(c) if c in order else len(order), c))
        idx = [self.channels.index(c) for c in ranked]
        return replace(self, channels=tuple(ranked), data=self.data[idx])

    @staticmethod
    def concatenate(blocks: Sequence["EegBlock"]) -> "EegBlock":
        if not blocks:
            raise ValueError("nothing to concatenate")
        first = blocks[0]
        for b in blocks[1:]:
            if b.channels != first.channels or b.sample_rate != first.sample_rate:
                raise ValueError("blocks differ in channels or sample rate")
        return replace(first, data=np.concatenate([b.data for b in blocks], axis=1))


def _check_band(lo: float, hi: float, fs: float) -> None:
    nyq = fs / 2.0
    if not (0 < lo < hi < nyq):
        raise ValueError(f"invalid band {lo}-{hi} Hz for sample rate {fs} Hz (need 0 < lo < hi < {nyq})")


def bandpass_sos(lo: float, hi: float, fs: float, order: int = FILTER_ORDER) -> np.ndarray:
    _check_band(lo, hi, fs)
    return signal.butter(order, [lo, hi], btype="bandpass", fs=fs, output="sos")


def bandpass_filter(block: EegBlock, lo: float, hi: float, mode: FilterMode = "zero_phase") -> EegBlock:
    """Butterworth bandpass; ``causal`` for the real-time path, ``zero_phase`` offline."""
    sos = bandpass_sos(lo, hi, block.sample_rate)
    if mode == "causal":
        out = signal.sosfilt(sos, block.data, axis=1)
    elif mode == "zero_phase":
        out = signal.sosfiltfilt(sos, block.data, axis=1)
    else:
        raise ValueError(f"unknown filter mode {mode!r}")
    return block.with_data(out)


def notch_filter(block: EegBlock, center: float = 60.0, q: float = NOTCH_Q) -> EegBlock:
    nyq = block.sample_rate / 2.0
    if not (0 < center < nyq):
        raise ValueError(f"notch center {center} Hz must lie in (0, {nyq}) Hz")
    b, a = signal.iirnotch(center, q, fs=block.sample_rate)
    return block.with_data(signal.filtfilt(b, a, block.data, axis=1))


def downsample(block: EegBlock, target_rate: float) -> EegBlock:
    """Zero-phase anti-alias lowpass followed by integer decimation.

    The lowpass corner sits at 0.9 x the new Nyquist frequency.
    """
    ratio = block.sample_rate / target_rate
    q = int(round(ratio))
    if target_rate <= 0 or q < 1 or abs(ratio - q) > 1e-9:
        raise ValueError(
            f"target rate {target_rate} Hz must divide sample rate {block.sample_rate} Hz evenly"
        )
    if q == 1:
        return block
    cutoff = 0.45 * target_rate
    sos = signal.butter(FILTER_ORDER, cutoff, btype="lowpass", fs=block.sample_rate, output="sos")
    smoothed = signal.sosfiltfilt(sos, block.data, axis=1)
    return block.with_data(smoothed[:, ::q], sample_rate=block.sample_rate / q)


class CausalBandpass:
    """Streaming causal bandpass that carries filter memory between chunks.

    Feeding a recording chunk by chunk gives the same output as one
    ``sosfilt`` call over the whole recording. One instance per stream.
    """

    def __init__(self, lo: float, hi: float, sample_rate: float, n_channels: int = 1):
        self.sos = bandpass_sos(lo, hi, sample_rate)
        self.sample_rate = sample_rate
        self._zi = np.zeros((self.sos.shape[0], n_channels, 2))

    def process(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.atleast_2d(np.asarray(chunk, dtype=np.float64))
        out, self._zi = signal.sosfilt(self.sos, chunk, axis=1, zi=self._zi)
        return out

    def reset(self) -> None:
        self._zi[:] = 0.0


def welch_psd(
    x: np.ndarray,
    sample_rate: float,
    segment_len: int | None = None,
    overlap: float = WELCH_OVERLAP,
    window: str = "hann",
) -> tuple[np.ndarray, np.ndarray]:
    """One-sided Welch PSD in units^2/Hz.

    Returns ``(freqs, psd)``. ``segment_len`` defaults to two seconds of
    samples, capped at the data length.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("welch_psd expects a single channel")
    if segment_len is None:
        segment_len = min(int(round(WELCH_SEGMENT_S * sample_rate)), x.size)
    if segment_len < 2 or segment_len > x.size:
        raise ValueError(f"data of {x.size} samples is shorter than one segment ({segment_len})")
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    noverlap = int(np.floor(overlap * segment_len))
    freqs, psd = signal.welch(
        x,
        fs=sample_rate,
        window=window,
        nperseg=segment_len,
        noverlap=noverlap,
        detrend=False,
        scaling="density",
        average="mean",
    )
    return freqs, np.maximum(psd, 0.0)


def band_power(freqs: np.ndarray, psd: np.ndarray, band: tuple[float, float]) -> float:
    """Trapezoidal integral of the PSD over bins inside ``band`` (inclusive)."""
    lo, hi = band
    mask = (freqs >= lo - 1e-9) & (freqs <= hi + 1e-9)
    if mask.sum() < 2:
        raise ValueError(f"band {lo}-{hi} Hz covers fewer than two frequency bins")
    return float(np.trapezoid(psd[mask], freqs[mask]))


@dataclass(frozen=True)
class BandPowerResult:
    target_power: float
    wide_power: float
    relative_psd: float


def relative_power(
    x: np.ndarray,
    sample_rate: float,
    target: tuple[float, float] = TARGET_BAND,
    wide: tuple[float, float] = WIDE_BAND,
) -> BandPowerResult:
    if not (wide[0] <= target[0] < target[1] <= wide[1]):
        raise ValueError(f"target band {target} must lie inside wide band {wide}")
    freqs, psd = welch_psd(x, sample_rate)
    tp = band_power(freqs, psd, target)
    wp = band_power(freqs, psd, wide)
    rel = tp / wp if wp > 0 else 0.0
    return BandPowerResult(tp, wp, float(min(max(rel, 0.0), 1.0)))


def relative_alpha_power(
    block: EegBlock,
    channel: str,
    window: tuple[float, float] | None = None,
    target: tuple[float, float] = TARGET_BAND,
    wide: tuple[float, float] = WIDE_BAND,
) -> BandPowerResult:
    """Relative PSD (target band over wide band) on one channel.

    ``window`` is an absolute (start, end) time range; the block is assumed
    to be 7-20 Hz filtered already.
    """
    x = block.channel(channel)
    if window is not None:
        start, end = window
        i0 = block.sample_index(start)
        i1 = block.sample_index(end)
        if i0 < 0 or i1 > block.n_samples:
            raise ValueError(f"window {window} lies outside the recording")
        if i1 <= i0:
            raise ValueError(f"empty window {window}")
        x = x[i0:i1]
    if x.size == 0:
        raise ValueError("empty window")
    return relative_power(x, block.sample_rate, target, wide)

"""Synthetic-participant EEG.

Background is 1/f noise. Posterior alpha grows as attention drops, an SSVEP
follows the letter rate, and attended targets evoke an N200/P300 at Pz/P4.
Blinks on F7 (with bleed onto FCz) and posterior EMG bursts are optional.

Every random component draws from its own child stream, so switching a
component's amplitude off never changes the others.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal

from .signalcore import DEFAULT_CHANNELS, POSTERIOR_CHANNELS, EegBlock

ERP_CHANNELS = ("Pz", "P4")
EMG_CHANNELS = ("Oz", "PO7", "PO8")
EOG_CHANNEL = "F7"
BLINK_BLEED_CHANNEL = "FCz"
BLINK_DURATION_S = 0.4

# Template widths span +-2 sigma of each Gaussian deflection.
N200_WIDTH_MS = 60.0
P300_WIDTH_MS = 120.0


@dataclass
class SubjectProfile:
    alpha_peak: float = 9.0
    alpha_base_amp: float = 8.0
    alpha_attention_gain: float = 0.17
    p300_amp: float = 5.0
    p300_latency: float = 400.0
    n200_amp: float = 3.0
    n200_latency: float = 300.0
    emg_level: float = 0.0
    blink_rate: float = 0.0
    blink_amp: float = 150.0
    blink_bleed: float = 0.2
    noise_scale: float = 10.0
    ssvep_amp: float = 1.0
    attention_mean: float = 0.6
    attention_reversion: float = 0.2
    attention_volatility: float = 0.15
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("alpha_base_amp", "p300_amp", "n200_amp", "emg_level", "blink_rate",
                     "blink_amp", "noise_scale", "ssvep_amp", "alpha_attention_gain",
                     "attention_volatility"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("p300_latency", "n200_latency"):
            if not 0 <= getattr(self, name) <= 1000:
                raise ValueError(f"{name} must lie within 0-1000 ms")
        if not 7.0 <= self.alpha_peak <= 13.0:
            raise ValueError("alpha_peak must lie within 7-13 Hz")
        if not 0 <= self.blink_bleed <= 1:
            raise ValueError("blink_bleed must lie in [0, 1]")
        if not 0 <= self.attention_mean <= 1:
            raise ValueError("attention_mean must lie in [0, 1]")
        if not 0 <= self.attention_reversion <= 1:
            raise ValueError("attention_reversion must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SubjectProfile":
        return cls(**d)


PRESETS = {
    "default": SubjectProfile(),
    # Calibration AUC around 0.67-0.80 with 100 sequences.
    "moderate": SubjectProfile(p300_amp=8.0, n200_amp=5.0),
    # AUC around 0.9-1.0; copy-spells reliably.
    "high_snr": SubjectProfile(p300_amp=8.0, n200_amp=5.0, noise_scale=2.5),
    "no_p300": SubjectProfile(p300_amp=0.0, n200_amp=0.0),
}


def attention_trajectory(profile: SubjectProfile, n_sequences: int, seed=None) -> np.ndarray:
    """Mean-reverting random walk clipped to [0, 1], starting at its mean."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    rng = np.random.default_rng(profile.rng_seed if seed is None else seed)
    eps = rng.standard_normal(n_sequences)
    mu, theta, sigma = profile.attention_mean, profile.attention_reversion, profile.attention_volatility
    a = np.empty(n_sequences)
    a[0] = mu
    for t in range(1, n_sequences):
        step = a[t - 1] + theta * (mu - a[t - 1]) + sigma * eps[t]
        a[t] = min(max(step, 0.0), 1.0)
    return a


def pink_noise(rng: np.random.Generator, shape: tuple[int, int], rms: float) -> np.ndarray:
    """1/f noise by spectral shaping of white noise, scaled to ``rms`` per row."""
    n = shape[1]
    white = rng.standard_normal(shape)
    if rms == 0 or n < 2:
        return np.zeros(shape)
    spec = np.fft.rfft(white, axis=1)
    f = np.fft.rfftfreq(n)
    gain = np.zeros_like(f)
    gain[1:] = 1.0 / np.sqrt(f[1:])
    pink = np.fft.irfft(spec * gain, n=n, axis=1)
    pink -= pink.mean(axis=1, keepdims=True)
    sd = pink.std(axis=1, keepdims=True)
    sd[sd == 0] = 1.0
    return pink / sd * rms


def _gauss(t_ms: np.ndarray, center: float, width: float) -> np.ndarray:
    sigma = width / 4.0
    return np.exp(-0.5 * ((t_ms - center) / sigma) ** 2)


def erp_template(profile: SubjectProfile, t_ms: np.ndarray) -> np.ndarray:
    """N200 (negative) plus P300 (positive) at full attention."""
    return (-profile.n200_amp * _gauss(t_ms, profile.n200_latency, N200_WIDTH_MS)
            + profile.p300_amp * _gauss(t_ms, profile.p300_latency, P300_WIDTH_MS))


def blink_waveform(sample_rate: float, amp: float) -> np.ndarray:
    n = int(round(BLINK_DURATION_S * sample_rate))
    return amp * np.sin(np.pi * np.arange(n) / n)


def generate_sequence_eeg(
    profile: SubjectProfile,
    attention: float,
    events: Sequence[tuple[float, bool]],
    duration: float,
    t0: float = 0.0,
    sample_rate: float = 300.0,
    channels: Sequence[str] = DEFAULT_CHANNELS,
    rng=None,
) -> EegBlock:
    """Simulate one block of EEG.

    ``events`` are (absolute onset time, is_target) letter presentations
    which must fall inside [t0, t0 + duration). ``rng`` is a seed or
    Generator; it defaults to the profile seed.
    """
    if not 0 <= attention <= 1:
        raise ValueError(f"attention must lie in [0, 1], got {attention}")
    n = int(round(duration * sample_rate))
    if n < 1:
        raise ValueError("duration must cover at least one sample")
    for t, _ in events:
        if not t0 <= t < t0 + duration:
            raise ValueError(f"event at {t:.3f} s falls outside block [{t0}, {t0 + duration})")
    seed = np.random.SeedSequence(profile.rng_seed if rng is None else rng) \
        if not isinstance(rng, np.random.Generator) else rng.bit_generator.seed_seq
    noise_rng, alpha_rng, blink_rng, emg_rng = (np.random.default_rng(s) for s in seed.spawn(4))

    channels = tuple(channels)
    chan = {c: i for i, c in enumerate(channels)}
    t = np.arange(n) / sample_rate
    data = pink_noise(noise_rng, (len(channels), n), profile.noise_scale)

    posterior = [chan[c] for c in POSTERIOR_CHANNELS if c in chan]
    phase = alpha_rng.uniform(0, 2 * np.pi)
    alpha_amp = profile.alpha_base_amp * (1.0 + profile.alpha_attention_gain * (1.0 - attention))
    data[posterior] += alpha_amp * np.sin(2 * np.pi * profile.alpha_peak * t + phase)

    onsets = sorted(e[0] for e in events)
    if len(onsets) >= 2 and profile.ssvep_amp > 0:
        rate = 1.0 / np.median(np.diff(onsets))
        rel = t - (onsets[0] - t0)
        on = (rel >= 0) & (rel < onsets[-1] - onsets[0] + 1.0 / rate)
        ssvep = profile.ssvep_amp * (np.sin(2 * np.pi * rate * rel) + 0.5 * np.sin(4 * np.pi * rate * rel))
        data[posterior] += np.where(on, ssvep, 0.0)

    erp_rows = [chan[c] for c in ERP_CHANNELS if c in chan]
    for onset, is_target in events:
        if not is_target:
            continue
        t_ms = (t - (onset - t0)) * 1000.0
        data[erp_rows] += attention * erp_template(profile, t_ms)

    n_blinks = blink_rng.poisson(profile.blink_rate / 60.0 * duration) if profile.blink_rate > 0 else 0
    if n_blinks and EOG_CHANNEL in chan:
        wave = blink_waveform(sample_rate, profile.blink_amp)
        for start in blink_rng.integers(0, max(1, n - wave.size), size=n_blinks):
            seg = wave[: n - start]
            data[chan[EOG_CHANNEL], start:start + seg.size] += seg
            if BLINK_BLEED_CHANNEL in chan:
                data[chan[BLINK_BLEED_CHANNEL], start:start + seg.size] += profile.blink_bleed * seg

    if profile.emg_level > 0:
        rows = [chan[c] for c in EMG_CHANNELS if c in chan]
        sos = signal.butter(4, min(20.0, 0.4 * sample_rate), btype="highpass", fs=sample_rate, output="sos")
        raw = signal.sosfilt(sos, emg_rng.standard_normal((len(rows), n)), axis=1)
        raw /= max(raw.std(), 1e-12)
        gate = np.zeros(n)
        for _ in range(emg_rng.poisson(0.5 * duration)):
            start = emg_rng.integers(0, n)
            gate[start:start + int(emg_rng.uniform(0.2, 0.8) * sample_rate)] = 1.0
        data[rows] += profile.emg_level * raw * gate

    return EegBlock(sample_rate, channels, data, t0)


@dataclass
class SimulatedSubject:
    """Subject driver handing out per-sequence EEG with its own RNG stream.

    Sequence ``k`` always draws from the stream seeded by (seed, k), so the
    output does not depend on the order or parallelism of generation.
    """

    profile: SubjectProfile
    seed: int = 0
    attention_override: float | None = None
    _attention: np.ndarray = field(default=None, init=False, repr=False)

    def attention(self, index: int) -> float:
        if self.attention_override is not None:
            return self.attention_override
        if self._attention is None or index >= self._attention.size:
            n = max(index + 1, 128 if self._attention is None else 2 * self._attention.size)
            self._attention = attention_trajectory(self.profile, n, seed=[self.seed, 0xA77])
        return float(self._attention[index])

    def record(self, index: int, events: Sequence[tuple[float, bool]], t0: float,
               duration: float, sample_rate: float = 300.0) -> EegBlock:
        return generate_sequence_eeg(
            self.profile, self.attention(index), events, duration, t0=t0,
            sample_rate=sample_rate, rng=[self.seed, index],
        )

"""Five-level relative-alpha neurofeedback.

Cutoffs are ascending percentiles (30, 55, 70, 85) of a participant's own
relative PSD samples. Lower alpha means better attention, so values below the
30th percentile earn level 5 (dark green) and values at or above the 85th earn
level 1 (dark red); the resulting target split is 30/25/15/15/15 percent.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .signalcore import (TARGET_BAND, WIDE_BAND, BandPowerResult, CausalBandpass, EegBlock,
                         bandpass_filter, relative_power)

logger = logging.getLogger(__name__)

PERCENTILES = (30.0, 55.0, 70.0, 85.0)
MIN_SAMPLES = 20
FORMAT_VERSION = 1

LEVEL_NAMES = {
    5: ("dark-green", "excellent"),
    4: ("light-green", "good"),
    3: ("orange", "medium"),
    2: ("yellow", "poor"),
    1: ("dark-red", "bad"),
}
TARGET_DISTRIBUTION = {5: 0.30, 4: 0.25, 3: 0.15, 2: 0.15, 1: 0.15}


@dataclass(frozen=True)
class ThresholdSet:
    cutoffs: tuple[float, float, float, float]
    n_samples: int
    sessions: tuple[str, ...] = ()
    channel: str = "P4"
    band: tuple[float, float] = TARGET_BAND
    wide_band: tuple[float, float] = WIDE_BAND

    def __post_init__(self):
        c = tuple(float(v) for v in self.cutoffs)
        if len(c) != 4:
            raise ValueError("a threshold set has four cutoffs")
        if any(b < a for a, b in zip(c, c[1:])):
            raise ValueError(f"cutoffs must be non-decreasing: {c}")
        if any(not 0.0 <= v <= 1.0 for v in c):
            raise ValueError(f"cutoffs must lie in [0, 1]: {c}")
        object.__setattr__(self, "cutoffs", c)
        object.__setattr__(self, "sessions", tuple(self.sessions))
        object.__setattr__(self, "band", tuple(self.band))
        object.__setattr__(self, "wide_band", tuple(self.wide_band))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format_version"] = FORMAT_VERSION
        d["percentiles"] = list(PERCENTILES)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSet":
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported thresholds format {d.get('format_version')!r}")
        keys = ("cutoffs", "n_samples", "sessions", "channel", "band", "wide_band")
        return cls(**{k: d[k] for k in keys})

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def read(cls, path: str | Path) -> "ThresholdSet":
        return cls.from_dict(json.loads(Path(path).read_text()))


def compute_thresholds(samples: Sequence[float], sessions: Iterable[str] = (),
                       channel: str = "P4", percentiles: Sequence[float] = PERCENTILES) -> ThresholdSet:
    x = np.asarray(samples, dtype=np.float64)
    if x.size < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} relative-PSD samples, got {x.size}")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise ValueError("relative-PSD samples must be finite and lie in [0, 1]")
    cutoffs = np.percentile(x, list(percentiles), method="linear")
    return ThresholdSet(tuple(cutoffs), int(x.size), tuple(sessions), channel)


def feedback_level(value: float, thresholds: ThresholdSet) -> int:
    """Map a relative PSD to a level; intervals are closed below, open above."""
    t30, t55, t70, t85 = thresholds.cutoffs
    if value < t30:
        return 5
    if value < t55:
        return 4
    if value < t70:
        return 3
    if value < t85:
        return 2
    return 1


def feedback_distribution(levels) -> dict[int, float]:
    """Fraction of feedback events per level (5 = best). Accepts levels or a SessionLog."""
    if hasattr(levels, "feedback"):
        levels = [e.level for e in levels.feedback]
    levels = list(levels)
    if not levels:
        raise ValueError("no feedback events")
    counts = {k: 0 for k in (5, 4, 3, 2, 1)}
    for lv in levels:
        counts[int(lv)] += 1
    return {k: v / len(levels) for k, v in counts.items()}


@dataclass
class SessionSamples:
    """Per-sequence relative-PSD values from one calibration session."""

    session_id: str
    phase: str
    week: int
    values: list[float] = field(default_factory=list)


def update_thresholds_weekly(history: Sequence[SessionSamples], week_index: int,
                             channel: str = "P4") -> ThresholdSet:
    """Thresholds in force during intervention week ``week_index`` (1-based).

    Week 1 uses every baseline session; week k > 1 uses the intervention
    sessions of week k - 1 only. An empty source week keeps the previous
    week's thresholds.
    """
    if week_index < 1:
        raise ValueError("week_index is 1-based")
    if week_index == 1:
        source = [s for s in history if s.phase == "baseline"]
    else:
        source = [s for s in history if s.phase == "intervention" and s.week == week_index - 1]
    values = [v for s in source for v in s.values]
    if not values:
        if week_index == 1:
            raise ValueError("no baseline data to derive first-week thresholds")
        logger.warning("no calibration data for week %d; keeping previous thresholds", week_index - 1)
        return update_thresholds_weekly(history, week_index - 1, channel)
    return compute_thresholds(values, [s.session_id for s in source], channel)


def _repair(x: np.ndarray) -> tuple[np.ndarray, bool]:
    bad = ~np.isfinite(x)
    if not bad.any():
        return x, False
    if bad.all():
        return np.zeros_like(x), True
    idx = np.arange(x.size)
    x = x.copy()
    x[bad] = np.interp(idx[bad], idx[~bad], x[~bad])
    return x, True


@dataclass(frozen=True)
class SequenceFeedback:
    power: BandPowerResult
    level: int
    repaired: bool = False


def sequence_feedback(eeg: EegBlock, window: tuple[float, float], thresholds: ThresholdSet,
                      channel: str | None = None) -> SequenceFeedback:
    """Real-time feedback for one sequence: causal 7-20 Hz filter, Welch, level.

    The block should start before ``window`` so the causal filter has
    settled by the first letter.
    """
    channel = channel or thresholds.channel
    x, repaired = _repair(eeg.channel(channel))
    lo, hi = thresholds.wide_band
    filtered = bandpass_filter(EegBlock(eeg.sample_rate, (channel,), x, eeg.t0), lo, hi, mode="causal")
    i0, i1 = filtered.sample_index(window[0]), filtered.sample_index(window[1])
    if i0 < 0 or i1 > filtered.n_samples or i1 <= i0:
        raise ValueError(f"window {window} does not fit the block")
    power = relative_power(filtered.data[0, i0:i1], eeg.sample_rate, thresholds.band, thresholds.wide_band)
    return SequenceFeedback(power, feedback_level(power.relative_psd, thresholds), repaired)


class FeedbackEngine:
    """Streaming feedback path for one session.

    Sequence blocks must arrive in recording order; filter memory carries
    across blocks so online values match ``session_relative_psd`` offline.
    With ``thresholds=None`` it only measures (baseline sessions).
    """

    def __init__(self, thresholds: ThresholdSet | None, channel: str = "P4",
                 sample_rate: float = 300.0):
        self.thresholds = thresholds
        self.channel = thresholds.channel if thresholds else channel
        lo, hi = thresholds.wide_band if thresholds else WIDE_BAND
        self.band = thresholds.band if thresholds else TARGET_BAND
        self.wide = (lo, hi)
        self._stream = CausalBandpass(lo, hi, sample_rate)
        self.values: list[float] = []
        self.repaired: list[int] = []

    def measure(self, block: EegBlock, window: tuple[float, float]) -> BandPowerResult:
        x, repaired = _repair(block.channel(self.channel))
        if repaired:
            self.repaired.append(len(self.values))
        y = self._stream.process(x)[0]
        i0, i1 = block.sample_index(window[0]), block.sample_index(window[1])
        result = relative_power(y[i0:i1], block.sample_rate, self.band, self.wide)
        self.values.append(result.relative_psd)
        return result

    def feedback(self, block: EegBlock, window: tuple[float, float]) -> tuple[BandPowerResult, int]:
        if self.thresholds is None:
            raise RuntimeError("feedback requires thresholds")
        result = self.measure(block, window)
        return result, feedback_level(result.relative_psd, self.thresholds)


def session_relative_psd(eeg: EegBlock, log, channel: str = "P4",
                         band: tuple[float, float] = TARGET_BAND,
                         wide: tuple[float, float] = WIDE_BAND) -> list[float]:
    """Per-sequence relative PSD recomputed offline with the online (causal) path."""
    x, _ = _repair(eeg.channel(channel))
    y = CausalBandpass(*wide, eeg.sample_rate).process(x)[0]
    out = []
    for _, letters in sorted(log.sequences().items()):
        if not letters:
            continue
        rate = 1.0 / np.median(np.diff([e.t for e in letters])) if len(letters) > 1 else 3.0
        i0 = eeg.sample_index(letters[0].t)
        i1 = eeg.sample_index(letters[-1].t + 1.0 / rate)
        out.append(relative_power(y[i0:i1], eeg.sample_rate, band, wide).relative_psd)
    return out


def level_name(level: int) -> str:
    colour, label = LEVEL_NAMES[level]
    return f"{colour} ({label})"


def distribution_deviation(dist: Mapping[int, float]) -> float:
    """Largest absolute gap between an observed and the target distribution."""
    return max(math.fabs(dist.get(k, 0.0) - v) for k, v in TARGET_DISTRIBUTION.items())

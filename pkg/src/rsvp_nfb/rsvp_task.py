"""RSVP task schedules: practice blocks, calibration sessions and the event log."""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np

from .signalcore import EegBlock

TASK_ALPHABET = tuple(string.ascii_uppercase)
SEQUENCE_LENGTH = 10
VALID_RATES = (1, 2, 3, 4)
FIXATION_LEAD_S = 1.0
FEEDBACK_S = 2.0
INTER_SEQUENCE_GAP_S = 2.0
EEG_RATE = 300.0

EVENT_KINDS = ("fixation", "letter", "feedback", "decision")


@dataclass(frozen=True)
class SequenceSpec:
    target: str
    items: tuple[str, ...]
    rate: float = 3.0
    fixation_lead: float = FIXATION_LEAD_S

    def __post_init__(self):
        if len(self.items) != SEQUENCE_LENGTH:
            raise ValueError(f"a sequence holds {SEQUENCE_LENGTH} items, got {len(self.items)}")
        if self.rate not in VALID_RATES:
            raise ValueError(f"rate must be one of {VALID_RATES} Hz")

    @property
    def target_position(self) -> int | None:
        return self.items.index(self.target) if self.target in self.items else None


@dataclass
class Event:
    kind: str
    t: float
    symbol: str | None = None
    is_target: bool | None = None
    level: int | None = None
    value: float | None = None
    sequence: int | None = None
    forced: bool | None = None

    def to_dict(self) -> dict:
        return {k: v.item() if isinstance(v, np.generic) else v
                for k, v in asdict(self).items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "Event":
        return cls(**d)


@dataclass
class SessionLog:
    """Ordered event stream bound to one EEG recording."""

    events: list[Event] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def append(self, event: Event) -> None:
        if event.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {event.kind!r}")
        if self.events and event.t <= self.events[-1].t:
            raise ValueError(f"event at t={event.t} does not follow t={self.events[-1].t}")
        self.events.append(event)

    def of_kind(self, kind: str) -> list[Event]:
        return [e for e in self.events if e.kind == kind]

    @property
    def letters(self) -> list[Event]:
        return self.of_kind("letter")

    @property
    def feedback(self) -> list[Event]:
        return self.of_kind("feedback")

    def sequences(self) -> dict[int, list[Event]]:
        out: dict[int, list[Event]] = {}
        for e in self.letters:
            out.setdefault(e.sequence, []).append(e)
        return out

    def validate(self) -> None:
        ts = [e.t for e in self.events]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps are not strictly increasing")

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.events)

    @classmethod
    def from_jsonl(cls, text: str, metadata: dict | None = None) -> "SessionLog":
        events = [Event.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        log = cls(events, dict(metadata or {}))
        log.validate()
        return log

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path, metadata: dict | None = None) -> "SessionLog":
        return cls.from_jsonl(Path(path).read_text(), metadata)


def build_calibration_sequence(alphabet: Sequence[str], target: str, rng: np.random.Generator,
                               rate: float = 3.0) -> SequenceSpec:
    """Nine distinct non-targets plus the target at a uniform random slot."""
    alphabet = list(alphabet)
    if len(alphabet) < SEQUENCE_LENGTH:
        raise ValueError(f"alphabet needs at least {SEQUENCE_LENGTH} symbols, got {len(alphabet)}")
    if target not in alphabet:
        raise ValueError(f"target {target!r} not in alphabet")
    pool = [s for s in alphabet if s != target]
    items = [pool[i] for i in rng.choice(len(pool), SEQUENCE_LENGTH - 1, replace=False)]
    items.insert(int(rng.integers(SEQUENCE_LENGTH)), target)
    return SequenceSpec(target, tuple(items), rate)


class SubjectDriver(Protocol):
    def record(self, index: int, events: Sequence[tuple[float, bool]], t0: float,
               duration: float, sample_rate: float = EEG_RATE) -> EegBlock: ...


class FeedbackSource(Protocol):
    def feedback(self, block: EegBlock, window: tuple[float, float]): ...


class SessionError(RuntimeError):
    """A session stopped early; the partial log and EEG are attached."""

    def __init__(self, message: str, log: SessionLog, eeg: EegBlock | None):
        super().__init__(message)
        self.log = log
        self.eeg = eeg


@dataclass
class SequenceTiming:
    """Sample-exact layout of one sequence block."""

    rate: float
    fixation_lead: float = FIXATION_LEAD_S
    tail: float = FEEDBACK_S
    sample_rate: float = EEG_RATE

    @property
    def letter_offsets(self) -> list[int]:
        return [int(round((self.fixation_lead + j / self.rate) * self.sample_rate))
                for j in range(SEQUENCE_LENGTH)]

    @property
    def letters_end(self) -> int:
        return int(round((self.fixation_lead + SEQUENCE_LENGTH / self.rate) * self.sample_rate))

    @property
    def n_samples(self) -> int:
        return self.letters_end + int(round(self.tail * self.sample_rate))


def present_sequence(
    log: SessionLog,
    subject: SubjectDriver,
    index: int,
    start_sample: int,
    target: str | None,
    items: Sequence[str],
    timing: SequenceTiming,
    nfb: FeedbackSource | None = None,
) -> EegBlock:
    """Log one fixation + 10-letter sequence, record its EEG and optional feedback."""
    fs = timing.sample_rate
    t_fix = start_sample / fs
    log.append(Event("fixation", t_fix, symbol=target, sequence=index))
    letter_events = []
    for offset, sym in zip(timing.letter_offsets, items):
        t = (start_sample + offset) / fs
        is_target = target is not None and sym == target
        log.append(Event("letter", t, symbol=sym, is_target=is_target, sequence=index))
        letter_events.append((t, is_target))
    block = subject.record(index, letter_events, t_fix, timing.n_samples / fs, fs)
    if block.n_samples != timing.n_samples:
        raise ValueError(f"subject returned {block.n_samples} samples, expected {timing.n_samples}")
    if nfb is not None:
        t_end = (start_sample + timing.letters_end) / fs
        result, level = nfb.feedback(block, (letter_events[0][0], t_end))
        log.append(Event("feedback", t_end, level=int(level), value=float(result.relative_psd),
                         sequence=index))
    return block


def run_calibration_session(
    n_sequences: int,
    rate: float,
    subject: SubjectDriver,
    nfb: FeedbackSource | None = None,
    seed: int = 0,
    alphabet: Sequence[str] = TASK_ALPHABET,
    fixation_lead: float = FIXATION_LEAD_S,
    metadata: dict | None = None,
) -> tuple[SessionLog, EegBlock]:
    """Run ``n_sequences`` calibration sequences; one feedback event each if ``nfb``."""
    if n_sequences < 1:
        raise ValueError("n_sequences must be >= 1")
    rng = np.random.default_rng([seed, 0xCA1])
    tail = FEEDBACK_S if nfb is not None else INTER_SEQUENCE_GAP_S
    timing = SequenceTiming(rate, fixation_lead, tail)
    log = SessionLog(metadata={**(metadata or {}), "seed": seed, "rate": rate,
                               "n_sequences": n_sequences, "nfb": nfb is not None})
    blocks: list[EegBlock] = []
    for k in range(n_sequences):
        target = alphabet[int(rng.integers(len(alphabet)))]
        spec = build_calibration_sequence(alphabet, target, rng, rate)
        try:
            blocks.append(present_sequence(log, subject, k, k * timing.n_samples, target,
                                           spec.items, timing, nfb))
        except Exception as exc:
            partial = EegBlock.concatenate(blocks) if blocks else None
            raise SessionError(f"session stopped at sequence {k}: {exc}", log, partial) from exc
    return log, EegBlock.concatenate(blocks)


# -- practice task -----------------------------------------------------------

Responder = Callable[[str, tuple[str, ...], float], bool]


def run_practice_block(rate: float, rng: np.random.Generator, responder: Responder,
                       alphabet: Sequence[str] = TASK_ALPHABET) -> int:
    """Ten yes/no trials, five containing the target; returns the number correct."""
    if rate not in VALID_RATES:
        raise ValueError(f"rate must be one of {VALID_RATES} Hz")
    present = rng.permutation([True] * 5 + [False] * 5)
    score = 0
    for has_target in present:
        target = alphabet[int(rng.integers(len(alphabet)))]
        pool = [s for s in alphabet if s != target]
        items = [pool[i] for i in rng.choice(len(pool), SEQUENCE_LENGTH, replace=False)]
        if has_target:
            items[int(rng.integers(SEQUENCE_LENGTH))] = target
        answer = bool(responder(target, tuple(items), rate))
        score += answer == bool(has_target)
    return score


@dataclass
class PracticeResult:
    scores: dict[int, list[int]]
    passed: bool


def practice_progression(responder: Responder, rng: np.random.Generator,
                         criterion: int = 8, max_blocks: int = 4) -> PracticeResult:
    """Train 1 -> 4 Hz; up to ``max_blocks`` tries per rate to reach ``criterion``/10."""
    scores: dict[int, list[int]] = {}
    for rate in VALID_RATES:
        scores[rate] = []
        for _ in range(max_blocks):
            scores[rate].append(run_practice_block(rate, rng, responder))
            if scores[rate][-1] >= criterion:
                break
        if scores[rate][-1] < criterion:
            return PracticeResult(scores, False)
    return PracticeResult(scores, True)


def oracle_responder(target: str, items: tuple[str, ...], rate: float) -> bool:
    return target in items


def noisy_responder(accuracy_by_rate: dict, rng: np.random.Generator) -> Responder:
    """Answers correctly with a rate-dependent probability."""
    def respond(target, items, rate):
        truth = target in items
        return truth if rng.random() < accuracy_by_rate.get(rate, 1.0) else not truth
    return respond


def letter_event_samples(log: SessionLog, eeg: EegBlock) -> Iterable[tuple[Event, int]]:
    for e in log.letters:
        yield e, eeg.sample_index(e.t)

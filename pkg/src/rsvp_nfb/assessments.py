"""Behavioral measures: letter cancellation forms, letter span sets and scoring."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

ROWS, COLS = 15, 10
N_CELLS = ROWS * COLS
N_TARGETS = 20
TARGET = "Z"
MAX_RUN = 3
MAX_TRIES = 10_000

FOILS = {
    "curved": tuple("BCDGJOPQRS"),
    "straight": tuple("KMYAEFHLNV"),
}

CONSONANTS = tuple("BCDFGHJKLMNPQRSTVWXZ")
SPAN_LENGTHS = tuple(range(2, 9))
ITEMS_PER_LENGTH = 2
N_SPAN_VERSIONS = 15
DEFAULT_BANNED = (
    "BRB", "HQ", "RSVP", "FBI", "NFL", "TV", "DVD", "CD", "PC", "DJ", "BBQ", "TTYL",
    "BFF", "DNS", "MD", "PM", "NYC", "DC", "HR", "PR", "CNN", "BBC", "KFC", "MVP",
    "PHD", "GPS", "SMS", "WWW", "HTML", "PDF", "JPG", "XL", "NBC", "CBS", "HBO", "MTV",
)

FORMS = ("A", "B", "C")


@dataclass(frozen=True)
class CancellationForm:
    grid: tuple[str, ...]  # ROWS strings of COLS letters
    style: str
    seed: int
    target: str = TARGET

    @property
    def cells(self) -> str:
        return "".join(self.grid)

    def target_mask(self) -> np.ndarray:
        return np.array([[c == self.target for c in row] for row in self.grid])

    def to_text(self) -> str:
        return "\n".join(" ".join(row) for row in self.grid) + "\n"

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows([list(row) for row in self.grid])


def longest_runs(mask: np.ndarray) -> dict[str, int]:
    """Longest run of True along rows, columns and both diagonal directions."""
    def run(lines):
        best = 0
        for line in lines:
            cur = 0
            for v in line:
                cur = cur + 1 if v else 0
                best = max(best, cur)
        return best

    m = np.asarray(mask, dtype=bool)
    offsets = range(-m.shape[0] + 1, m.shape[1])
    return {
        "row": run(m),
        "column": run(m.T),
        "diagonal": run(np.diagonal(m, k) for k in offsets),
        "anti_diagonal": run(np.diagonal(m[:, ::-1], k) for k in offsets),
    }


def satisfies_adjacency(mask: np.ndarray, max_run: int = MAX_RUN) -> bool:
    return max(longest_runs(mask).values()) <= max_run


def generate_cancellation_form(style: str, seed: int, max_tries: int = MAX_TRIES) -> CancellationForm:
    """Place 20 targets uniformly at random, resampling until no run exceeds three."""
    if style not in FOILS:
        raise ValueError(f"style must be one of {sorted(FOILS)}")
    rng = np.random.default_rng([seed, 0xF0])
    for _ in range(max_tries):
        flat = np.zeros(N_CELLS, dtype=bool)
        flat[rng.choice(N_CELLS, N_TARGETS, replace=False)] = True
        mask = flat.reshape(ROWS, COLS)
        if satisfies_adjacency(mask):
            break
    else:
        raise RuntimeError(f"no valid target layout after {max_tries} tries")
    foils = FOILS[style]
    letters = np.array(foils)[rng.integers(len(foils), size=N_CELLS)].reshape(ROWS, COLS)
    letters[mask] = TARGET
    return CancellationForm(tuple("".join(r) for r in letters), style, seed)


def score_cancellation(completion_time: float, hits: int, false_alarms: int = 0) -> float | None:
    """Completion time divided by accuracy (hits / 20); None when there are no hits."""
    if completion_time <= 0:
        raise ValueError("completion time must be positive")
    if not 0 <= hits <= N_TARGETS:
        raise ValueError(f"hits must lie in [0, {N_TARGETS}]")
    if false_alarms < 0:
        raise ValueError("false alarms cannot be negative")
    if hits == 0:
        return None
    return completion_time / (hits / N_TARGETS)


@dataclass(frozen=True)
class LetterSpanSet:
    version: int
    direction: str
    items: dict[int, tuple[str, str]]

    def sequences(self) -> list[str]:
        return [s for n in SPAN_LENGTHS for s in self.items[n]]

    def to_dict(self) -> dict:
        return {"version": self.version, "direction": self.direction,
                "items": {str(n): list(v) for n, v in self.items.items()}}


def contains_banned(seq: str, banned: Sequence[str]) -> bool:
    return any(b in seq for b in banned)


def _draw_sequence(rng: np.random.Generator, n: int, banned: Sequence[str], max_tries: int) -> str:
    for _ in range(max_tries):
        # No immediate letter repeats; repeats make recall trivially chunkable.
        seq = [CONSONANTS[int(rng.integers(len(CONSONANTS)))]]
        while len(seq) < n:
            c = CONSONANTS[int(rng.integers(len(CONSONANTS)))]
            if c != seq[-1]:
                seq.append(c)
        s = "".join(seq)
        if not contains_banned(s, banned):
            return s
    raise RuntimeError(f"could not draw a length-{n} sequence avoiding banned strings")


def generate_letter_span_sets(n_versions: int = N_SPAN_VERSIONS, banned: Sequence[str] = DEFAULT_BANNED,
                              seed: int = 0, max_tries: int = MAX_TRIES) -> list[LetterSpanSet]:
    """``n_versions`` distinct consonant-only sets with two items per length 2..8.

    Directions alternate forward/backward across versions.
    """
    banned = tuple(b.upper() for b in banned)
    rng = np.random.default_rng([seed, 0x5A])
    out, seen = [], set()
    for v in range(1, n_versions + 1):
        for _ in range(max_tries):
            items = {}
            for n in SPAN_LENGTHS:
                a = _draw_sequence(rng, n, banned, max_tries)
                b = a
                while b == a:
                    b = _draw_sequence(rng, n, banned, max_tries)
                items[n] = (a, b)
            key = tuple(s for n in SPAN_LENGTHS for s in items[n])
            if key not in seen:
                seen.add(key)
                break
        else:
            raise RuntimeError("could not generate distinct letter-span versions")
        out.append(LetterSpanSet(v, "forward" if v % 2 else "backward", items))
    return out


def write_span_sets(sets: Sequence[LetterSpanSet], path: str | Path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in sets], indent=2) + "\n")


def score_letter_span(responses: Sequence[Sequence[bool]], lengths: Sequence[int] = SPAN_LENGTHS) -> int:
    """Longest length with at least one correct item, stopping after a double failure.

    ``responses[i]`` holds the per-item correctness flags for ``lengths[i]``.
    Returns 0 when both shortest items are wrong.
    """
    span = 0
    for n, flags in zip(lengths, responses):
        if not any(flags):
            break
        span = n
    return span


def form_orders(n_sessions: int, seed: int, forms: Sequence[str] = FORMS) -> list[str]:
    """Form letter for each session: successive random permutations of the forms."""
    rng = np.random.default_rng([seed, 0xF0F])
    out: list[str] = []
    for _ in range(math.ceil(n_sessions / len(forms))):
        out.extend(forms[i] for i in rng.permutation(len(forms)))
    return out[:n_sessions]


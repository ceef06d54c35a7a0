"""Copy-spelling: Bayesian fusion of classifier evidence with a character LM."""

from __future__ import annotations

import logging
import string
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.special import logsumexp

from .classifier import extract_epochs
from .signalcore import EegBlock
from .rsvp_task import SessionLog, SequenceTiming, Event, present_sequence, FEEDBACK_S

logger = logging.getLogger(__name__)

SPACE = "_"
SPELL_ALPHABET = tuple(string.ascii_uppercase) + (SPACE,)
DECISION_THRESHOLD = 0.80
MAX_SEQUENCES = 25
STIMULI_PER_SEQUENCE = 10


class LanguageModel(Protocol):
    def distribution(self, history: str) -> np.ndarray: ...


class UniformLM:
    def distribution(self, history: str) -> np.ndarray:
        return np.full(len(SPELL_ALPHABET), 1.0 / len(SPELL_ALPHABET))


def normalize_text(text: str) -> str:
    """Upper-case letters kept; every other run of characters becomes one '_'."""
    out, last_space = [], True
    for ch in text.upper():
        if "A" <= ch <= "Z":
            out.append(ch)
            last_space = False
        elif not last_space:
            out.append(SPACE)
            last_space = True
    return "".join(out)


class NgramLM:
    """Character n-gram model with add-one smoothing, backing off on unseen contexts."""

    def __init__(self, order: int = 3):
        if order < 1:
            raise ValueError("order must be >= 1")
        self.order = order
        self._index = {s: i for i, s in enumerate(SPELL_ALPHABET)}
        self._counts: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(len(SPELL_ALPHABET)))

    @classmethod
    def from_text(cls, text: str, order: int = 3) -> "NgramLM":
        lm = cls(order)
        lm.train(text)
        return lm

    @classmethod
    def from_file(cls, path: str | Path, order: int = 3) -> "NgramLM":
        return cls.from_text(Path(path).read_text(encoding="utf-8", errors="replace"), order)

    def train(self, text: str) -> None:
        padded = SPACE * (self.order - 1) + normalize_text(text)
        for i in range(self.order - 1, len(padded)):
            sym = self._index[padded[i]]
            for n in range(self.order):
                self._counts[padded[i - n:i]][sym] += 1

    def distribution(self, history: str) -> np.ndarray:
        padded = SPACE * (self.order - 1) + history
        for n in range(self.order - 1, -1, -1):
            ctx = padded[len(padded) - n:] if n else ""
            counts = self._counts.get(ctx)
            if counts is not None and counts.sum() > 0:
                return (counts + 1.0) / (counts.sum() + len(SPELL_ALPHABET))
        return UniformLM().distribution(history)


def lm_prior(model: LanguageModel, history: str) -> np.ndarray:
    """The model's next-symbol distribution, or uniform if the model misbehaves."""
    try:
        p = np.asarray(model.distribution(history), dtype=np.float64)
        if p.shape != (len(SPELL_ALPHABET),) or not np.all(np.isfinite(p)) or p.min() < 0 or p.sum() <= 0:
            raise ValueError("language model returned an improper distribution")
        return p / p.sum()
    except Exception as exc:  # noqa: BLE001 - any model failure falls back
        logger.warning("language model failed (%s); using a uniform prior", exc)
        return UniformLM().distribution(history)


@dataclass(frozen=True)
class PosteriorState:
    """Posterior over the spelling alphabet, kept in log space."""

    log_probs: np.ndarray
    history: str = ""
    n_sequences: int = 0
    alphabet: tuple[str, ...] = SPELL_ALPHABET

    @classmethod
    def from_prior(cls, prior: np.ndarray, history: str = "") -> "PosteriorState":
        with np.errstate(divide="ignore"):
            lp = np.log(np.asarray(prior, dtype=np.float64))
        return cls(lp - logsumexp(lp), history)

    @property
    def probabilities(self) -> np.ndarray:
        return np.exp(self.log_probs - logsumexp(self.log_probs))

    def prob(self, symbol: str) -> float:
        return float(self.probabilities[self.alphabet.index(symbol)])


def update_posterior(state: PosteriorState, presented: Sequence[str],
                     likelihood_ratios: Sequence[float]) -> PosteriorState:
    """Multiply presented symbols by their likelihood ratios and renormalize."""
    lrs = np.asarray(likelihood_ratios, dtype=np.float64)
    if len(presented) != lrs.size:
        raise ValueError("one likelihood ratio per presented symbol")
    if not np.all(np.isfinite(lrs)) or np.any(lrs <= 0):
        raise ValueError("likelihood ratios must be finite and positive")
    lp = state.log_probs.copy()
    for sym, lr in zip(presented, lrs):
        try:
            lp[state.alphabet.index(sym)] += np.log(lr)
        except ValueError:
            raise ValueError(f"presented symbol {sym!r} not in alphabet") from None
    return replace(state, log_probs=lp - logsumexp(lp), n_sequences=state.n_sequences + 1)


def select_next_stimuli(state: PosteriorState, rng: np.random.Generator,
                        k: int = STIMULI_PER_SEQUENCE) -> list[str]:
    """The ``k`` most probable symbols (ties in alphabet order), shown in random order."""
    if len(state.alphabet) < k:
        raise ValueError(f"alphabet smaller than {k}")
    top = np.argsort(-state.log_probs, kind="stable")[:k]
    return [state.alphabet[i] for i in rng.permutation(top)]


@dataclass(frozen=True)
class Decision:
    symbol: str | None
    probability: float
    forced: bool = False

    @property
    def typed(self) -> bool:
        return self.symbol is not None


def copy_spell_step(state: PosteriorState, presented: Sequence[str], likelihood_ratios: Sequence[float],
                    lm: LanguageModel, threshold: float = DECISION_THRESHOLD,
                    max_sequences: int = MAX_SEQUENCES) -> tuple[PosteriorState, Decision]:
    """Fuse one sequence of evidence; type the leader once it reaches ``threshold``.

    After ``max_sequences`` sequences without a decision the leader is typed
    anyway and the decision is flagged as forced.
    """
    state = update_posterior(state, presented, likelihood_ratios)
    p = state.probabilities
    best = int(np.argmax(p))
    if p[best] >= threshold or state.n_sequences >= max_sequences:
        sym = state.alphabet[best]
        history = state.history + sym
        decision = Decision(sym, float(p[best]), forced=bool(p[best] < threshold))
        return PosteriorState.from_prior(lm_prior(lm, history), history), decision
    return state, Decision(None, float(p[best]))


@dataclass
class CopyPhraseResult:
    phrase: str
    typed: str
    sequences_per_letter: list[int]
    forced: list[bool]
    log: SessionLog = field(repr=False)
    aborted: str | None = None
    eeg: EegBlock | None = field(default=None, repr=False)

    @property
    def success(self) -> bool:
        return self.aborted is None and self.typed == self.phrase

    @property
    def completed_by_threshold(self) -> bool:
        return self.success and not any(self.forced)


def run_copy_phrase(phrase: str, subject, model, lm: LanguageModel | None = None, seed: int = 0,
                    threshold: float = DECISION_THRESHOLD, max_sequences: int = MAX_SEQUENCES,
                    rate: float = 3.0, sample_rate: float = 300.0) -> CopyPhraseResult:
    """Copy ``phrase`` letter by letter with simulated EEG evidence.

    There is no error correction: a wrong letter makes the attempt a failure,
    but spelling continues to the phrase length.
    """
    if any(ch not in SPELL_ALPHABET for ch in phrase):
        raise ValueError(f"phrase {phrase!r} has symbols outside the alphabet")
    lm = lm or UniformLM()
    rng = np.random.default_rng([seed, 0x5BE11])
    timing = SequenceTiming(rate, tail=FEEDBACK_S, sample_rate=sample_rate)
    log = SessionLog(metadata={"task": "copy_phrase", "phrase": phrase, "seed": seed})
    state = PosteriorState.from_prior(lm_prior(lm, ""))
    typed, counts, forced = "", [], []
    index = 0
    aborted = None
    blocks: list[EegBlock] = []
    try:
        while len(typed) < len(phrase):
            target = phrase[len(typed)]
            presented = select_next_stimuli(state, rng)
            n_before = len(log.letters)
            block = present_sequence(log, subject, index, index * timing.n_samples, target,
                                     presented, timing)
            blocks.append(block)
            epochs = extract_epochs(block, log.letters[n_before:])
            lrs = model.likelihood_ratio(model.score(epochs))
            state, decision = copy_spell_step(state, presented, lrs, lm, threshold, max_sequences)
            t_dec = (index * timing.n_samples + timing.letters_end) / sample_rate
            if decision.typed:
                log.append(Event("decision", t_dec, symbol=decision.symbol, value=decision.probability,
                                 sequence=index, forced=decision.forced))
                counts.append(index + 1 - sum(counts))
                forced.append(decision.forced)
                typed += decision.symbol
            index += 1
    except Exception as exc:  # noqa: BLE001 - record and stop the attempt
        logger.warning("copy-phrase attempt aborted: %s", exc)
        aborted = str(exc)
    eeg = EegBlock.concatenate(blocks) if blocks else None
    return CopyPhraseResult(phrase, typed, counts, forced, log, aborted, eeg)


"""Full single-participant study: practice, baseline, weekly-thresholded NFB
intervention and follow-up, written as a self-describing archive."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import assessments as asm
from .classifier import extract_epochs, fit_classifier
from .erp import analyze_session, write_peak_table
from .neurofeedback import FeedbackEngine, SessionSamples, session_relative_psd, update_thresholds_weekly
from .rsvp_task import SessionError, noisy_responder, practice_progression, run_calibration_session
from .session_io import (SessionArchive, StudyConfig, canonical_json, encode_eeg, quantize, write_session,
                         write_study_manifest)
from .simsubject import SimulatedSubject, SubjectProfile
from .speller import NgramLM, UniformLM, run_copy_phrase
from .stats import LongitudinalDataset, slopes_table, stability_table

logger = logging.getLogger(__name__)

PRACTICE_ACCURACY = {1: 0.98, 2: 0.96, 3: 0.94, 4: 0.92}
BEHAVIOR_MEASURES = ("cancel_curved", "cancel_straight", "span_forward", "span_backward", "srf")


class StudyError(RuntimeError):
    def __init__(self, message: str, root: Path):
        super().__init__(message)
        self.root = root


@dataclass(frozen=True)
class SessionPlan:
    index: int
    session_id: str
    phase: str  # baseline | intervention | followup
    week: int  # intervention week (1-based), 0 in baseline
    time_weeks: float
    behavior: bool


def study_schedule(config: StudyConfig) -> list[SessionPlan]:
    """Weekly baseline sessions, then three intervention sessions per week, then follow-up.

    Behavioral measures run at every baseline session, the third session of
    each intervention week and the follow-up.
    """
    plans = []
    for k in range(config.n_baseline):
        plans.append(SessionPlan(len(plans), f"B{k + 1:02d}", "baseline", 0, float(k), True))
    t0 = float(config.n_baseline)
    spw = config.sessions_per_week
    for j in range(config.n_intervention):
        week, slot = j // spw + 1, j % spw
        last = j == config.n_intervention - 1
        plans.append(SessionPlan(len(plans), f"I{j + 1:02d}", "intervention", week,
                                 t0 + (week - 1) + slot / spw, slot == spw - 1 or last))
    if config.followup_weeks is not None:
        end = t0 + math.ceil(config.n_intervention / spw)
        plans.append(SessionPlan(len(plans), "F01", "followup", 0, end + config.followup_weeks, True))
    return plans


class QuantizedSubject:
    """Subject driver whose EEG is rounded to the archive's float32 precision."""

    def __init__(self, inner):
        self.inner = inner

    def record(self, *args, **kwargs):
        return quantize(self.inner.record(*args, **kwargs))


def _session_seeds(config: StudyConfig, index: int) -> dict[str, int]:
    state = np.random.SeedSequence([config.seed, index]).generate_state(4)
    return dict(zip(("calibration", "copy", "behavior", "cv"), (int(s) for s in state)))


def _weeks_of_training(config: StudyConfig, plan: SessionPlan) -> float:
    if plan.phase == "baseline":
        return 0.0
    if plan.phase == "followup":
        return math.ceil(config.n_intervention / config.sessions_per_week)
    return float(plan.week - 1)


def session_profile(config: StudyConfig, plan: SessionPlan) -> SubjectProfile:
    shift = config.attention_gain_per_week * _weeks_of_training(config, plan)
    return replace(config.subject, attention_mean=float(np.clip(config.subject.attention_mean + shift, 0, 1)))


def simulate_behavior(config: StudyConfig, plan: SessionPlan, seed: int, span_sets, srf_form: str
                      ) -> tuple[dict[str, float], dict]:
    """Scripted responses for cancellation, letter span and reading fluency."""
    b = config.behavior
    rng = np.random.default_rng(seed)
    gain = 1.0 + b.weekly_gain * _weeks_of_training(config, plan)
    out, detail = {}, {}
    for style, base in (("curved", b.cancel_time_curved), ("straight", b.cancel_time_straight)):
        form = asm.generate_cancellation_form(style, seed=seed + (style == "straight"))
        t = max(5.0, float(rng.normal(base / gain, b.cancel_time_sd)))
        hits = int(rng.binomial(asm.N_TARGETS, b.cancel_hit_rate))
        score = asm.score_cancellation(t, hits)
        out[f"cancel_{style}"] = float("nan") if score is None else score
        detail[f"cancel_{style}"] = {"time_s": t, "hits": hits, "form": form.to_text()}
    for direction, ability in (("forward", b.span_forward), ("backward", b.span_backward)):
        sset = span_sets[direction]
        responses = []
        for n in asm.SPAN_LENGTHS:
            p = 1.0 / (1.0 + math.exp(b.span_steepness * (n - ability * gain)))
            responses.append([bool(rng.random() < p) for _ in sset.items[n]])
        out[f"span_{direction}"] = float(asm.score_letter_span(responses))
        detail[f"span_{direction}"] = {"version": sset.version, "responses": responses}
    out["srf"] = float(round(rng.normal(b.srf_mean * gain, b.srf_sd)))
    detail["srf"] = {"form": srf_form}
    return out, detail


@dataclass
class StudyResult:
    root: Path
    dataset: LongitudinalDataset
    summaries: list[dict]


def run_study(config: StudyConfig, out: str | Path,
              progress: Callable[[str], None] | None = None) -> StudyResult:
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    cfg_hash = config.hash()
    config.write(root / "config.json")
    say = progress or (lambda msg: logger.info(msg))
    records: list[dict] = []
    summaries: list[dict] = []

    def flush_dataset():
        if records:
            LongitudinalDataset.from_records(records).to_csv(root / "dataset.csv")

    try:
        prng = np.random.default_rng([config.seed, 0x9A])
        practice = practice_progression(noisy_responder(PRACTICE_ACCURACY, prng), prng)
        (root / "practice.json").write_text(canonical_json(
            {"passed": practice.passed, "scores": {str(k): v for k, v in practice.scores.items()}}))
        if not practice.passed:
            logger.warning("simulated participant did not reach the 4 Hz practice criterion")

        lm = NgramLM.from_text(config.lm_corpus) if config.lm_corpus else UniformLM()
        plans = study_schedule(config)
        n_behavior = sum(p.behavior for p in plans)
        forward = asm.generate_letter_span_sets(seed=config.seed)
        backward = asm.generate_letter_span_sets(seed=config.seed + 1)
        version_order = np.random.default_rng([config.seed, 0x5B]).permutation(asm.N_SPAN_VERSIONS)
        srf_forms = asm.form_orders(n_behavior, config.seed)
        history: list[SessionSamples] = []
        thresholds, thresholds_week = None, 0
        behavior_count = 0

        for plan in plans:
            say(f"session {plan.session_id} ({plan.phase}, t={plan.time_weeks:g} wk)")
            seeds = _session_seeds(config, plan.index)
            if plan.phase == "intervention" and plan.week != thresholds_week:
                thresholds_week = plan.week
                thresholds = update_thresholds_weekly(history, plan.week, config.nfb_channel)
                thresholds = replace(thresholds, band=config.nfb_band, wide_band=config.wide_band)
                (root / "thresholds").mkdir(exist_ok=True)
                thresholds.write(root / "thresholds" / f"week_{plan.week:02d}.json")
            session_thr = thresholds if plan.phase == "intervention" else None

            profile = session_profile(config, plan)
            metadata = {"participant": config.participant_id, "session": plan.session_id,
                        "phase": plan.phase, "week": plan.week, "time_weeks": plan.time_weeks}
            subject = QuantizedSubject(SimulatedSubject(profile, seeds["calibration"]))
            nfb = FeedbackEngine(session_thr) if session_thr else None
            try:
                log, eeg = run_calibration_session(config.n_sequences, config.rate, subject, nfb,
                                                   seed=seeds["calibration"], metadata=metadata)
            except SessionError as exc:
                if exc.eeg is not None:
                    write_session(SessionArchive(exc.log, exc.eeg), root / "sessions" / plan.session_id, cfg_hash)
                raise

            if nfb is not None:
                values = [e.value for e in log.feedback]
            else:
                values = session_relative_psd(eeg, log, config.nfb_channel, config.nfb_band, config.wide_band)
            history.append(SessionSamples(plan.session_id, plan.phase, plan.week, values))

            model = fit_classifier(extract_epochs(eeg, log), config.cv_folds, config.classifier_grid,
                                   seed=seeds["cv"])
            erp = analyze_session(eeg, log, channel=config.erp_channel)
            copy_subject = QuantizedSubject(SimulatedSubject(profile, seeds["copy"]))
            copy = run_copy_phrase(config.phrase, copy_subject, model, lm, seed=seeds["copy"],
                                   rate=config.rate)

            sess_dir = root / "sessions" / plan.session_id
            sess_dir.mkdir(parents=True, exist_ok=True)
            write_peak_table([(plan.session_id, erp)], sess_dir / "erp_peaks.csv")
            extras = {"copy_events.jsonl": copy.log.to_jsonl(),
                      "copy_summary.json": canonical_json({
                          "phrase": copy.phrase, "typed": copy.typed, "success": copy.success,
                          "completed_by_threshold": copy.completed_by_threshold,
                          "sequences_per_letter": copy.sequences_per_letter, "forced": copy.forced,
                          "aborted": copy.aborted})}
            if copy.eeg is not None:
                extras["copy_eeg.bin"] = encode_eeg(copy.eeg)

            measures = {
                "auc": model.cv_auc,
                "p300_amp": erp.p300.amplitude_uv,
                "n200_amp": erp.n200.amplitude_uv,
                "p300_latency": erp.p300.latency_ms,
                "relative_alpha_median": float(np.median(values)),
                "copy_success": float(copy.success),
                "copy_sequences_per_letter": float(np.mean(copy.sequences_per_letter))
                if copy.sequences_per_letter else float("nan"),
            }
            if plan.behavior:
                span_sets = {
                    "forward": forward[int(version_order[behavior_count % asm.N_SPAN_VERSIONS])],
                    "backward": backward[int(version_order[behavior_count % asm.N_SPAN_VERSIONS])],
                }
                scores, detail = simulate_behavior(config, plan, seeds["behavior"], span_sets,
                                                   srf_forms[behavior_count])
                behavior_count += 1
                measures.update(scores)
                extras["behavior.json"] = canonical_json({"scores": scores, "detail": detail})

            write_session(SessionArchive(log, eeg, model, session_thr, extras), sess_dir, cfg_hash)
            for name, value in measures.items():
                records.append({"participant": config.participant_id, "session": plan.index,
                                "time_weeks": plan.time_weeks, "phase": 0 if plan.phase == "baseline" else 1,
                                "measure": name, "value": value, "followup": plan.phase == "followup"})
            summaries.append({"session": plan.session_id, "phase": plan.phase, "auc": model.cv_auc,
                              "copy_success": copy.success, "typed": copy.typed,
                              "feedback_events": len(log.feedback)})
    except Exception as exc:
        flush_dataset()
        write_study_manifest(root, cfg_hash, status="halted", error=str(exc))
        raise StudyError(f"study halted: {exc}", root) from exc

    flush_dataset()
    dataset = LongitudinalDataset.from_records(records)
    reports = root / "reports"
    reports.mkdir(exist_ok=True)
    (reports / "stability.txt").write_text(stability_table(dataset))
    (reports / "slopes.txt").write_text("".join(
        f"{m}\n{slopes_table(dataset, m)}\n" for m in dataset.measures))
    (root / "summary.json").write_text(canonical_json(summaries))
    write_study_manifest(root, cfg_hash)
    return StudyResult(root, dataset, summaries)


def load_dataset(root: str | Path) -> LongitudinalDataset:
    return LongitudinalDataset.from_csv(Path(root) / "dataset.csv")


def load_config(root: str | Path) -> StudyConfig:
    return StudyConfig.from_dict(json.loads((Path(root) / "config.json").read_text()))

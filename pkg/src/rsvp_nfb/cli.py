"""Command-line entry point (``rsvp-nfb``)."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import assessments as asm
from . import stats
from .classifier import ClassifierModel, extract_epochs, fit_classifier
from .erp import analyze_session, write_average_csv, write_peak_table
from .neurofeedback import (FeedbackEngine, ThresholdSet, compute_thresholds, feedback_distribution,
                            session_relative_psd)
from .rsvp_task import run_calibration_session
from .session_io import (ArchiveError, SessionArchive, StudyConfig, canonical_json, read_session,
                         write_session)
from .simsubject import PRESETS, SimulatedSubject, SubjectProfile
from .speller import NgramLM, UniformLM, run_copy_phrase
from .study import QuantizedSubject, StudyError, run_study

logger = logging.getLogger("rsvp_nfb")


def _config(args) -> StudyConfig:
    cfg = StudyConfig.read(args.config) if args.config else StudyConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _profile(args, cfg: StudyConfig) -> SubjectProfile:
    if getattr(args, "profile", None):
        if args.profile in PRESETS:
            return PRESETS[args.profile]
        return SubjectProfile.from_dict(json.loads(Path(args.profile).read_text()))
    return cfg.subject


def _out(args, default: str) -> Path:
    return Path(args.out or default)


def _load(path, args):
    return read_session(path, allow_config_mismatch=True)


def _simulate(args, nfb_thresholds: ThresholdSet | None, default_out: str) -> int:
    cfg = _config(args)
    profile = _profile(args, cfg)
    subject = QuantizedSubject(SimulatedSubject(profile, cfg.seed))
    nfb = FeedbackEngine(nfb_thresholds) if nfb_thresholds else None
    n = args.sequences or cfg.n_sequences
    log, eeg = run_calibration_session(n, cfg.rate, subject, nfb, seed=cfg.seed,
                                       metadata={"participant": cfg.participant_id,
                                                 "phase": "intervention" if nfb else "baseline"})
    out = write_session(SessionArchive(log, eeg, thresholds=nfb_thresholds), _out(args, default_out),
                        cfg.hash())
    print(f"wrote {n} sequences to {out}")
    if nfb is not None:
        dist = feedback_distribution(log)
        print("feedback levels: " + ", ".join(f"{k}: {v:.0%}" for k, v in dist.items()))
    return 0


def cmd_simulate_calibration(args) -> int:
    return _simulate(args, None, "calibration")


def cmd_simulate_intervention(args) -> int:
    return _simulate(args, ThresholdSet.read(args.thresholds), "intervention")


def cmd_train_classifier(args) -> int:
    cfg = _config(args)
    arch = _load(args.session, args)
    model = fit_classifier(extract_epochs(arch.eeg, arch.log), args.folds, cfg.classifier_grid, seed=cfg.seed)
    out = _out(args, str(Path(args.session) / "model.json"))
    model.write(out)
    print(f"cv AUC {model.cv_auc:.3f} (lambda {model.lam:g}, gamma {model.gam:g}); model written to {out}")
    return 0


def cmd_nfb_thresholds(args) -> int:
    values, ids = [], []
    for path in args.sessions:
        arch = _load(path, args)
        if arch.log.feedback:
            values.extend(e.value for e in arch.log.feedback)
        else:
            values.extend(session_relative_psd(arch.eeg, arch.log, args.channel))
        ids.append(Path(path).name)
    thr = compute_thresholds(values, ids, args.channel)
    out = _out(args, "thresholds.json")
    thr.write(out)
    print("cutoffs (30/55/70/85th pct): " + ", ".join(f"{c:.4f}" for c in thr.cutoffs))
    return 0


def cmd_copy_spell(args) -> int:
    cfg = _config(args)
    model = ClassifierModel.read(args.model)
    lm = NgramLM.from_file(args.lm) if args.lm else UniformLM()
    subject = QuantizedSubject(SimulatedSubject(_profile(args, cfg), cfg.seed))
    res = run_copy_phrase(args.phrase, subject, model, lm, seed=cfg.seed, rate=cfg.rate)
    out = _out(args, "copy_spell")
    if res.eeg is not None:
        summary = {"phrase": res.phrase, "typed": res.typed, "success": res.success,
                   "sequences_per_letter": res.sequences_per_letter, "forced": res.forced,
                   "aborted": res.aborted}
        write_session(SessionArchive(res.log, res.eeg, model, extras={"copy_summary.json": canonical_json(summary)}),
                      out, cfg.hash())
    status = "success" if res.success else "failed"
    print(f"typed {res.typed!r} for {res.phrase!r}: {status}; sequences per letter {res.sequences_per_letter}")
    return 0 if res.aborted is None else 1


def cmd_erp_analyze(args) -> int:
    rows = []
    out = _out(args, "erp")
    out.mkdir(parents=True, exist_ok=True)
    for path in args.sessions:
        arch = _load(path, args)
        res = analyze_session(arch.eeg, arch.log, channel=args.channel)
        name = Path(path).name
        rows.append((name, res))
        write_average_csv(res.target, out / f"{name}_target_average.csv")
        if res.nontarget is not None:
            write_average_csv(res.nontarget, out / f"{name}_nontarget_average.csv")
        for pk in (res.n200, res.p300):
            flag = " (low confidence)" if pk.low_confidence else ""
            print(f"{name} {pk.component}: {pk.latency_ms:.0f} ms, {pk.amplitude_uv:.2f} uV{flag}")
    write_peak_table(rows, out / "peaks.csv")
    return 0


def cmd_gen_assessments(args) -> int:
    seed = args.seed or 0
    out = _out(args, "assessments")
    (out / "forms").mkdir(parents=True, exist_ok=True)
    for style in asm.FOILS:
        for i in range(args.forms):
            form = asm.generate_cancellation_form(style, seed=seed * 1000 + i)
            (out / "forms" / f"{style}_{i + 1:02d}.txt").write_text(form.to_text())
            form.write_csv(out / "forms" / f"{style}_{i + 1:02d}.csv")
    asm.write_span_sets(asm.generate_letter_span_sets(seed=seed), out / "letter_span_forward.json")
    asm.write_span_sets(asm.generate_letter_span_sets(seed=seed + 1), out / "letter_span_backward.json")
    (out / "srf_form_order.json").write_text(json.dumps(asm.form_orders(args.sessions, seed)) + "\n")
    print(f"wrote {2 * args.forms} cancellation forms and 2 x {asm.N_SPAN_VERSIONS} span sets to {out}")
    return 0


def cmd_stats(args) -> int:
    ds = stats.LongitudinalDataset.from_csv(args.dataset)
    kind = args.kind
    if kind == "cv":
        res = stats.baseline_cv(ds, args.measure, r=args.r)
        print(f"{args.measure}: CV {res.format()} % (n={res.n}, m={res.m:.2f}, r={res.r:.3f}, df={res.df:.2f})")
    elif kind == "icc":
        base = ds.baseline(args.measure)
        res = stats.icc_reml(base["value"], base["participant"], base["time_weeks"])
        print(f"{args.measure}: ICC {res.format()} (sigma2_u={res.sigma2_u:.4g}, sigma2_e={res.sigma2_e:.4g})")
    elif kind == "corr":
        f = ds.frame
        a = f[f["measure"] == args.measure].set_index(["participant", "session"])["value"]
        b = f[f["measure"] == args.other].set_index(["participant", "session"])["value"]
        joined = a.to_frame("x").join(b.to_frame("y"), how="inner").dropna().reset_index()
        res = stats.within_between_correlation(joined["x"], joined["y"], joined["participant"])
        line = f"r_within {res.r_within:.3f}, r_between {res.r_between:.3f}"
        if res.n_participants > 3:
            line += f", z_between {stats.fisher_z(res.r_between, res.n_participants):.2f}"
        print(line)
    elif kind == "slopes":
        print(stats.slopes_table(ds, args.measure, args.lag), end="")
    elif kind == "lowess":
        for pid in sorted(ds.frame["participant"].unique()):
            s = ds.series(pid, args.measure, drop_first=False, drop_followup=False)
            sm = stats.lowess_tricube(s["value"].to_numpy(), s["time_weeks"].to_numpy(), args.bandwidth)
            for t, v, y in zip(s["time_weeks"], s["value"], sm):
                print(f"{pid},{t:g},{v:.6g},{y:.6g}")
    return 0


def cmd_run_study(args) -> int:
    cfg = _config(args)
    out = _out(args, f"study_{cfg.participant_id}")
    res = run_study(cfg, out, progress=lambda m: print(m, flush=True) if args.verbose else None)
    ok = sum(s["copy_success"] for s in res.summaries)
    print(f"{len(res.summaries)} sessions written to {out}; HELLO_ copied {ok}/{len(res.summaries)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsvp-nfb", description=__doc__)
    parser.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    parser.add_argument("--config", help="study config JSON")
    parser.add_argument("--out", help="output path")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-assessments", help="cancellation forms, letter span sets, SRF form order")
    p.add_argument("--forms", type=int, default=15, help="forms per foil style")
    p.add_argument("--sessions", type=int, default=30, help="sessions to schedule SRF forms for")
    p.set_defaults(func=cmd_gen_assessments)

    profile_help = f"preset ({', '.join(PRESETS)}) or SubjectProfile JSON"
    p = sub.add_parser("simulate-calibration", help="simulate a calibration session without NFB")
    p.add_argument("--sequences", type=int)
    p.add_argument("--profile", help=profile_help)
    p.set_defaults(func=cmd_simulate_calibration)

    p = sub.add_parser("train-classifier", help="cross-validate and fit RDA on a session archive")
    p.add_argument("session")
    p.add_argument("--folds", type=int, default=10)
    p.set_defaults(func=cmd_train_classifier)

    p = sub.add_parser("nfb-thresholds", help="percentile cutoffs from baseline session archives")
    p.add_argument("sessions", nargs="+")
    p.add_argument("--channel", default="P4")
    p.set_defaults(func=cmd_nfb_thresholds)

    p = sub.add_parser("simulate-intervention", help="simulate a calibration session with NFB")
    p.add_argument("--thresholds", required=True)
    p.add_argument("--sequences", type=int)
    p.add_argument("--profile", help=profile_help)
    p.set_defaults(func=cmd_simulate_intervention)

    p = sub.add_parser("copy-spell", help="simulated copy-spelling with a trained model")
    p.add_argument("--phrase", default="HELLO_")
    p.add_argument("--model", required=True)
    p.add_argument("--lm", help="text corpus for a character trigram model")
    p.add_argument("--profile", help=profile_help)
    p.set_defaults(func=cmd_copy_spell)

    p = sub.add_parser("erp-analyze", help="offline ERP averages and N200/P300 peaks")
    p.add_argument("sessions", nargs="+")
    p.add_argument("--channel", default="Pz")
    p.set_defaults(func=cmd_erp_analyze)

    p = sub.add_parser("stats", help="longitudinal statistics on a dataset CSV")
    p.add_argument("kind", choices=("cv", "icc", "corr", "slopes", "lowess"))
    p.add_argument("dataset")
    p.add_argument("--measure", required=True)
    p.add_argument("--other", help="second measure for corr")
    p.add_argument("--r", type=float, help="correlation input for the CV standard error")
    p.add_argument("--lag", type=int, help="Newey-West lag (default automatic)")
    p.add_argument("--bandwidth", type=float, default=0.8)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("run-study", help="run the full simulated study")
    p.set_defaults(func=cmd_run_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "stats" and args.kind == "corr" and not args.other:
        parser.error("stats corr needs --other")
    try:
        return args.func(args)
    except (ArchiveError, StudyError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

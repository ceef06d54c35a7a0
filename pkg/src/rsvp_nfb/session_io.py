"""Study configuration and the on-disk session archive format.

Archive layout (one directory per session)::

    manifest.json     format version, config hash, sha256 of every other file
    events.jsonl      SessionLog, one event per line
    eeg.bin           uint32 LE header length, JSON header, LE float32 frames
    model.json        optional ClassifierModel
    thresholds.json   optional ThresholdSet
    <extra files>     reports, copy-spelling logs, peak tables
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .classifier import DEFAULT_GRID, ClassifierModel
from .neurofeedback import ThresholdSet
from .rsvp_task import VALID_RATES, SessionLog
from .signalcore import TARGET_BAND, WIDE_BAND, EegBlock
from .simsubject import PRESETS, SubjectProfile

FORMAT_VERSION = 1
EEG_DTYPE = "<f4"
MANIFEST = "manifest.json"


class ArchiveError(Exception):
    """Base class for archive read/write failures."""


class FormatVersionError(ArchiveError):
    pass


class ChecksumError(ArchiveError):
    pass


class TruncatedPayloadError(ArchiveError):
    pass


class ConfigMismatchError(ArchiveError):
    pass


# -- configuration ----------------------------------------------------------------

@dataclass
class BehaviorProfile:
    """Scripted responder for the repeated behavioral measures."""

    cancel_time_curved: float = 52.0  # s at perfect accuracy
    cancel_time_straight: float = 60.0
    cancel_time_sd: float = 4.0
    cancel_hit_rate: float = 0.95
    span_forward: float = 5.5  # length at which recall is 50% likely
    span_backward: float = 4.5
    span_steepness: float = 1.5
    srf_mean: float = 60.0
    srf_sd: float = 3.0
    weekly_gain: float = 0.0  # fractional improvement per intervention week

    def __post_init__(self):
        if not 0 < self.cancel_hit_rate <= 1:
            raise ValueError("cancel_hit_rate must lie in (0, 1]")
        for name in ("cancel_time_curved", "cancel_time_straight", "span_steepness"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class StudyConfig:
    participant_id: str = "P1"
    seed: int = 0
    n_baseline: int = 4
    n_intervention: int = 18
    sessions_per_week: int = 3
    followup_weeks: float | None = 4.0
    n_sequences: int = 100
    rate: float = 3.0
    phrase: str = "HELLO_"
    nfb_channel: str = "P4"
    nfb_band: tuple[float, float] = TARGET_BAND
    wide_band: tuple[float, float] = WIDE_BAND
    erp_channel: str = "Pz"
    cv_folds: int = 10
    classifier_grid: tuple[tuple[float, float], ...] = DEFAULT_GRID
    attention_gain_per_week: float = 0.0
    lm_corpus: str = ""
    subject: SubjectProfile = field(default_factory=lambda: replace(PRESETS["moderate"]))
    behavior: BehaviorProfile = field(default_factory=BehaviorProfile)

    MAX_INTERVENTION = 18

    def __post_init__(self):
        if not 4 <= self.n_baseline <= 7:
            raise ValueError("baseline session count must lie in [4, 7]")
        if not 0 <= self.n_intervention <= self.MAX_INTERVENTION:
            raise ValueError(f"intervention sessions must lie in [0, {self.MAX_INTERVENTION}]")
        if self.sessions_per_week != 3:
            raise ValueError("intervention cadence is three sessions per week")
        if self.followup_weeks is not None and not 4 <= self.followup_weeks <= 5:
            raise ValueError("follow-up must fall 4-5 weeks after the intervention")
        if self.rate not in VALID_RATES:
            raise ValueError(f"rate must be one of {VALID_RATES}")
        if self.n_sequences < self.cv_folds:
            raise ValueError("need at least as many sequences as CV folds")
        self.nfb_band = tuple(self.nfb_band)
        self.wide_band = tuple(self.wide_band)
        self.classifier_grid = tuple(tuple(map(float, g)) for g in self.classifier_grid)
        if isinstance(self.subject, dict):
            self.subject = SubjectProfile.from_dict(self.subject)
        if isinstance(self.behavior, dict):
            self.behavior = BehaviorProfile(**self.behavior)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classifier_grid"] = [list(g) for g in self.classifier_grid]
        d["nfb_band"], d["wide_band"] = list(self.nfb_band), list(self.wide_band)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "StudyConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**dict(d))

    @classmethod
    def read(cls, path: str | Path) -> "StudyConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def write(self, path: str | Path) -> None:
        Path(path).write_text(canonical_json(self.to_dict()))

    def hash(self) -> str:
        return config_hash(self.to_dict())


def canonical_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def config_hash(config: Mapping) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# -- EEG payload --------------------------------------------------------------------

def quantize(eeg: EegBlock) -> EegBlock:
    """Round samples to float32 so the stored payload reproduces them exactly."""
    return eeg.with_data(eeg.data.astype(np.float32).astype(np.float64))


def encode_eeg(eeg: EegBlock) -> bytes:
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "sample_rate": eeg.sample_rate,
        "channels": list(eeg.channels),
        "n_samples": eeg.n_samples,
        "t0": eeg.t0,
        "dtype": EEG_DTYPE,
        "layout": "frame-interleaved",
    }, sort_keys=True).encode()
    payload = np.ascontiguousarray(eeg.data.T, dtype=EEG_DTYPE).tobytes()
    return struct.pack("<I", len(header)) + header + payload


def decode_eeg(blob: bytes) -> EegBlock:
    if len(blob) < 4:
        raise TruncatedPayloadError("eeg.bin is shorter than its length prefix")
    (n,) = struct.unpack("<I", blob[:4])
    try:
        header = json.loads(blob[4:4 + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ArchiveError(f"unreadable eeg.bin header: {exc}") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"eeg.bin format {header.get('format_version')!r}, expected {FORMAT_VERSION}")
    n_ch = len(header["channels"])
    payload = blob[4 + n:]
    expected = header["n_samples"]
    frame = 4 * n_ch
    if len(payload) != expected * frame:
        raise TruncatedPayloadError(
            f"eeg.bin holds {len(payload) / frame:g} samples, header declares {expected}")
    data = np.frombuffer(payload, dtype=EEG_DTYPE).reshape(expected, n_ch).T.astype(np.float64)
    return EegBlock(header["sample_rate"], tuple(header["channels"]), data, header["t0"])


def write_eeg(eeg: EegBlock, path: str | Path) -> None:
    Path(path).write_bytes(encode_eeg(eeg))


def read_eeg(path: str | Path) -> EegBlock:
    return decode_eeg(Path(path).read_bytes())


# -- session archive ---------------------------------------------------------------

@dataclass
class SessionArchive:
    log: SessionLog
    eeg: EegBlock
    model: ClassifierModel | None = None
    thresholds: ThresholdSet | None = None
    extras: dict[str, str | bytes] = field(default_factory=dict)


def _write_manifest(root: Path, cfg_hash: str | None, extra: Mapping | None = None) -> None:
    files = sorted(p for p in root.rglob("*") if p.is_file() and p.name != MANIFEST)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_hash": cfg_hash,
        "files": {p.relative_to(root).as_posix(): sha256_file(p) for p in files},
        **(extra or {}),
    }
    (root / MANIFEST).write_text(canonical_json(manifest))


def write_session(archive: SessionArchive, path: str | Path, cfg_hash: str | None = None) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    archive.log.write(root / "events.jsonl")
    write_eeg(archive.eeg, root / "eeg.bin")
    (root / "session.json").write_text(canonical_json(archive.log.metadata))
    if archive.model is not None:
        archive.model.write(root / "model.json")
    if archive.thresholds is not None:
        archive.thresholds.write(root / "thresholds.json")
    for name, content in archive.extras.items():
        target = root / name
        target.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, bytes):
            target.write_bytes(content)
        else:
            target.write_text(content)
    _write_manifest(root, cfg_hash)
    return root


def verify_manifest(root: str | Path, cfg_hash: str | None = None, allow_config_mismatch: bool = False) -> dict:
    """Check version, config hash and checksums; returns the manifest."""
    root = Path(root)
    try:
        manifest = json.loads((root / MANIFEST).read_text())
    except FileNotFoundError:
        raise ArchiveError(f"{root} has no {MANIFEST}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise FormatVersionError(f"archive format {manifest.get('format_version')!r}, expected {FORMAT_VERSION}")
    if cfg_hash is not None and manifest.get("config_hash") != cfg_hash and not allow_config_mismatch:
        raise ConfigMismatchError(
            f"archive was produced with config {manifest.get('config_hash')}, not {cfg_hash}; "
            "pass allow_config_mismatch to override")
    for rel, digest in manifest["files"].items():
        p = root / rel
        if not p.is_file():
            raise ArchiveError(f"missing archived file {rel}")
        if sha256_file(p) != digest:
            raise ChecksumError(f"checksum mismatch for {rel}")
    return manifest


def read_session(path: str | Path, cfg_hash: str | None = None,
                 allow_config_mismatch: bool = False) -> SessionArchive:
    root = Path(path)
    manifest = verify_manifest(root, cfg_hash, allow_config_mismatch)
    metadata = json.loads((root / "session.json").read_text()) if (root / "session.json").is_file() else {}
    log = SessionLog.read(root / "events.jsonl", metadata)
    eeg = read_eeg(root / "eeg.bin")
    model = ClassifierModel.read(root / "model.json") if (root / "model.json").is_file() else None
    thr = ThresholdSet.read(root / "thresholds.json") if (root / "thresholds.json").is_file() else None
    core = {"events.jsonl", "eeg.bin", "session.json", "model.json", "thresholds.json"}
    extras = {rel: (root / rel).read_bytes() for rel in manifest["files"] if rel not in core}
    return SessionArchive(log, eeg, model, thr, extras)


def write_study_manifest(root: str | Path, cfg_hash: str, status: str = "complete",
                         error: str | None = None) -> None:
    extra = {"status": status}
    if error:
        extra["error"] = error
    _write_manifest(Path(root), cfg_hash, extra)

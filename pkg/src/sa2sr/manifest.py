"""JSON-lines manifest ingestion.

Each line describes one utterance: ``audio`` (path, relative to the
manifest), ``split`` (train / validation / test), and, depending on the
corpus, ``transcript``, ``sentiment``, and the ``activation`` /
``valence`` / ``dominance`` annotations on the seven-point scale.
AVD values are rescaled from [1, 7] to [-1, 1] on load.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .metrics import SENTIMENT_CLASSES

SPLITS = ("train", "validation", "test")

AVD_FIELDS = ("activation", "valence", "dominance")


def normalize_avd(value: float) -> float:
    """Linear map from the seven-point scale to [-1, 1]."""
    return (value - 4.0) / 3.0


def denormalize_avd(value: float) -> float:
    return value * 3.0 + 4.0


@dataclass
class UtteranceRecord:
    uid: int
    audio_path: Path
    split: str
    transcript: str | None = None
    sentiment: str | None = None
    avd: tuple[float, float, float] | None = None  # normalized

    @property
    def sentiment_index(self) -> int:
        if self.sentiment is None:
            raise ValueError(f"record {self.audio_path} has no sentiment label")
        return SENTIMENT_CLASSES.index(self.sentiment)


@dataclass
class ManifestSplit:
    train: list[UtteranceRecord]
    validation: list[UtteranceRecord]
    test: list[UtteranceRecord]

    def all_records(self) -> list[UtteranceRecord]:
        return self.train + self.validation + self.test

    def part(self, name: str) -> list[UtteranceRecord]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _parse_record(raw: dict, line_no: int, mode: str, base: Path, uid: int) -> UtteranceRecord:
    if "audio" not in raw:
        raise ValueError(f"line {line_no}: missing 'audio' field")
    split = raw.get("split")
    if split not in SPLITS:
        raise ValueError(f"line {line_no}: split must be one of {SPLITS}, got {split!r}")

    transcript = raw.get("transcript")
    sentiment = raw.get("sentiment")
    if sentiment is not None and sentiment not in SENTIMENT_CLASSES:
        raise ValueError(
            f"line {line_no}: sentiment must be one of {SENTIMENT_CLASSES}, got {sentiment!r}"
        )

    avd_raw = [raw.get(f) for f in AVD_FIELDS]
    has_avd = [v is not None for v in avd_raw]
    if any(has_avd) and not all(has_avd):
        raise ValueError(f"line {line_no}: partial AVD annotation")
    avd = None
    if all(has_avd):
        for f, v in zip(AVD_FIELDS, avd_raw):
            if not 1.0 <= float(v) <= 7.0:
                raise ValueError(
                    f"line {line_no}: {f}={v} outside the seven-point scale [1, 7]"
                )
        avd = tuple(normalize_avd(float(v)) for v in avd_raw)

    if mode == "pretrain":
        if transcript is None:
            raise ValueError(f"line {line_no}: pretrain record missing 'transcript'")
        if sentiment is None:
            raise ValueError(f"line {line_no}: pretrain record missing 'sentiment'")
    elif mode == "finetune":
        if avd is None:
            raise ValueError(f"line {line_no}: finetune record missing AVD annotations")
    elif mode != "any":
        raise ValueError(f"unknown manifest mode {mode!r}")

    return UtteranceRecord(
        uid=uid,
        audio_path=(base / raw["audio"]).resolve(),
        split=split,
        transcript=transcript,
        sentiment=sentiment,
        avd=avd,
    )


def load_manifest(path, mode: str = "any") -> ManifestSplit:
    """Parse and validate a JSON-lines manifest.

    ``mode`` selects the field requirements: pretrain records need a
    transcript and a sentiment label, finetune records need the AVD
    triple, ``any`` only needs audio and split.  Every violating line is
    an error (records are never silently dropped).
    """
    path = Path(path)
    base = path.parent
    out = ManifestSplit([], [], [])
    seen: dict[Path, str] = {}
    any_line = False
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            any_line = True
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValueError(f"line {line_no}: malformed JSON ({e.msg})") from None
            rec = _parse_record(raw, line_no, mode, base, uid=len(seen))
            if rec.audio_path in seen:
                raise ValueError(
                    f"line {line_no}: duplicate audio path {rec.audio_path} "
                    f"(already in split {seen[rec.audio_path]!r})"
                )
            seen[rec.audio_path] = rec.split
            out.part(rec.split).append(rec)
    if not any_line:
        raise ValueError(f"empty manifest: {path}")
    return out

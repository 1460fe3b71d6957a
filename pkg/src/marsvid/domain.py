"""Core records shared by every stage: videos, labels and manifests.

A manifest is a JSON-lines file, one video per line::

    {"id": "v1", "video_path": "clips/v1.mp4", "transcript": "...", "label": "Hate", "lang": "en"}

Exactly one of ``video_path`` / ``frames_dir`` must be given.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

HATEFUL = 1
NON_HATEFUL = 0


class ManifestError(ValueError):
    """Raised for unreadable or inconsistent manifests."""


class UnknownLabelError(ValueError):
    """Raised when a raw label is not in the vocabulary of the chosen scheme."""


# Raw-label vocabularies. Hate and offensive are merged into the hate class.
LABEL_SCHEMES: dict[str, dict[str, int]] = {
    "hatemm": {"hate": HATEFUL, "non hate": NON_HATEFUL},
    "mhc": {"hateful": HATEFUL, "hate": HATEFUL, "offensive": HATEFUL, "normal": NON_HATEFUL},
    "binary": {"1": HATEFUL, "0": NON_HATEFUL, "hateful": HATEFUL, "non hateful": NON_HATEFUL},
}
LABEL_SCHEMES["auto"] = {k: v for vocab in LABEL_SCHEMES.values() for k, v in vocab.items()}

_SEPARATORS = re.compile(r"[\s_\-]+")


def _normalize_label(raw: str) -> str:
    return _SEPARATORS.sub(" ", raw.strip().lower())


def merge_labels(raw: str, scheme: str = "auto") -> int:
    """Map a dataset's raw label string onto the binary hate / non-hate label.

    Matching is case-insensitive and treats ``-``, ``_`` and whitespace alike,
    so ``"Non-Hate"`` and ``"non_hate"`` are the same label.
    """
    try:
        vocab = LABEL_SCHEMES[scheme.lower()]
    except KeyError:
        raise ValueError(f"unknown label scheme {scheme!r}; choose from {sorted(LABEL_SCHEMES)}") from None
    key = _normalize_label(str(raw))
    if key not in vocab:
        raise UnknownLabelError(f"label {raw!r} is not part of the {scheme!r} scheme")
    return vocab[key]


@dataclass(frozen=True)
class VideoRecord:
    id: str
    transcript: str = ""
    gold_label: str = ""
    language: str = "en"
    video_path: str | None = None
    frames_dir: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ManifestError("video id must be non-empty")
        if (self.video_path is None) == (self.frames_dir is None):
            raise ManifestError(f"record {self.id!r}: exactly one of video_path / frames_dir is required")

    @property
    def media(self) -> str:
        return self.video_path if self.video_path is not None else self.frames_dir  # type: ignore[return-value]

    @property
    def media_kind(self) -> str:
        return "video" if self.video_path is not None else "frames"

    def label(self, scheme: str = "auto") -> int:
        return merge_labels(self.gold_label, scheme)

    @classmethod
    def from_dict(cls, data: dict) -> "VideoRecord":
        if not isinstance(data, dict):
            raise ManifestError("record must be a JSON object")
        for required in ("id", "label"):
            if required not in data:
                raise ManifestError(f"missing required field {required!r}")
        return cls(
            id=str(data["id"]),
            transcript=str(data.get("transcript") or ""),
            gold_label=str(data["label"]),
            language=str(data.get("lang", "en")),
            video_path=data.get("video_path"),
            frames_dir=data.get("frames_dir"),
        )

    def to_dict(self) -> dict:
        out: dict = {"id": self.id}
        if self.video_path is not None:
            out["video_path"] = self.video_path
        else:
            out["frames_dir"] = self.frames_dir
        out["transcript"] = self.transcript
        out["label"] = self.gold_label
        out["lang"] = self.language
        return out


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[VideoRecord, ...]
    source_path: Path | None = None
    _by_id: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        index: dict[str, VideoRecord] = {}
        for rec in self.records:
            if rec.id in index:
                raise ManifestError(f"duplicate id {rec.id!r}")
            index[rec.id] = rec
        object.__setattr__(self, "_by_id", index)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[VideoRecord]:
        return iter(self.records)

    def __getitem__(self, video_id: str) -> VideoRecord:
        return self._by_id[video_id]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def gold_labels(self, scheme: str = "auto") -> dict[str, int]:
        return {r.id: r.label(scheme) for r in self.records}

    def resolve_media(self, record: VideoRecord) -> VideoRecord:
        """Make a relative media path absolute against the manifest's directory."""
        if self.source_path is None:
            return record
        base = Path(self.source_path).parent
        media = Path(record.media)
        if media.is_absolute():
            return record
        resolved = str(base / media)
        if record.video_path is not None:
            return VideoRecord(record.id, record.transcript, record.gold_label, record.language, video_path=resolved)
        return VideoRecord(record.id, record.transcript, record.gold_label, record.language, frames_dir=resolved)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Read a JSON-lines manifest, keeping file order.

    Blank lines are skipped. Errors name the offending line number.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records: list[VideoRecord] = []
    seen: dict[str, int] = {}
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = VideoRecord.from_dict(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            if rec.id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate id {rec.id!r} (first seen on line {seen[rec.id]})"
                )
            seen[rec.id] = lineno
            records.append(rec)
    return DatasetManifest(tuple(records), source_path=path)


def write_manifest(records: Iterable[VideoRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")
    return path

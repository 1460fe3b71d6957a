"""On-disk run cache: one JSON file per (condition, video, stage).

Layout under the run root::

    <root>/<strategy>+<ablation>+<model>+f<N>+<prompt hash>/<video id>/<stage>.json
    <root>/index.jsonl          # one line per stored key

Records are written atomically and never overwritten: writing a key that
already holds different content raises :class:`StoreConflict`.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterator
from urllib.parse import quote, unquote


class StoreError(RuntimeError):
    pass


class StoreConflict(StoreError):
    pass


class StoreIntegrityError(StoreError):
    def __init__(self, path: Path, reason: str):
        self.path = Path(path)
        super().__init__(f"corrupted record {self.path}: {reason}")


def _q(value: str) -> str:
    out = quote(str(value), safe="")
    if out in (".", ".."):
        out = out.replace(".", "%2E")
    return out


def condition_dirname(strategy: str, ablation: str, model_id: str, frames_n: int, prompt_hash: str) -> str:
    return "+".join([_q(strategy), _q(ablation), _q(model_id), f"f{frames_n}", _q(prompt_hash)])


@dataclass(frozen=True)
class RunKey:
    video_id: str
    strategy: str
    ablation: str
    stage: str
    model_id: str
    prompt_version_hash: str
    frames_n: int

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value in ("", None):
                raise ValueError(f"RunKey.{name} must be populated")

    def condition_dir(self) -> str:
        return condition_dirname(self.strategy, self.ablation, self.model_id, self.frames_n,
                                 self.prompt_version_hash)

    def relpath(self) -> Path:
        return Path(self.condition_dir()) / _q(self.video_id) / f"{_q(self.stage)}.json"

    def encode(self) -> str:
        fields = [self.video_id, self.strategy, self.ablation, self.stage, self.model_id,
                  self.prompt_version_hash, str(self.frames_n)]
        return "|".join(quote(f, safe="") for f in fields)

    @classmethod
    def decode(cls, text: str) -> "RunKey":
        parts = [unquote(p) for p in text.split("|")]
        if len(parts) != 7:
            raise ValueError(f"not an encoded RunKey: {text!r}")
        *head, frames = parts
        return cls(*head, frames_n=int(frames))


@dataclass(frozen=True)
class StageRecord:
    key: RunKey
    raw_response: str
    parsed: Any
    parse_flags: tuple[str, ...] = ()
    finish_reason: str = "complete"
    attempt_count: int = 1
    latency_ms: float = 0.0
    created_at: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat())

    def content(self) -> dict:
        """The fields that define a record's identity (timing excluded)."""
        return {
            "key": asdict(self.key),
            "raw_response": self.raw_response,
            "parsed": self.parsed,
            "parse_flags": sorted(self.parse_flags),
            "finish_reason": self.finish_reason,
        }

    def to_dict(self) -> dict:
        out = self.content()
        out.update(attempt_count=self.attempt_count, latency_ms=self.latency_ms, created_at=self.created_at)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "StageRecord":
        return cls(
            key=RunKey(**data["key"]),
            raw_response=data["raw_response"],
            parsed=data["parsed"],
            parse_flags=tuple(data["parse_flags"]),
            finish_reason=data["finish_reason"],
            attempt_count=int(data["attempt_count"]),
            latency_ms=float(data.get("latency_ms", 0.0)),
            created_at=data.get("created_at", ""),
        )


class RunStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._index_lock = threading.Lock()

    @property
    def index_path(self) -> Path:
        return self.root / "index.jsonl"

    def path_for(self, key: RunKey) -> Path:
        return self.root / key.relpath()

    def _read(self, path: Path) -> StageRecord:
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            return StageRecord.from_dict(data)
        except (ValueError, KeyError, TypeError) as exc:
            raise StoreIntegrityError(path, f"{type(exc).__name__}: {exc}") from exc

    def get_record(self, key: RunKey) -> StageRecord | None:
        path = self.path_for(key)
        if not path.exists():
            return None
        record = self._read(path)
        if record.key != key:
            raise StoreIntegrityError(path, f"stored key {record.key.encode()} does not match {key.encode()}")
        return record

    def put_record(self, record: StageRecord) -> Path:
        """Write ``record`` atomically; identical rewrites are no-ops, divergent ones raise."""
        path = self.path_for(record.key)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True, indent=2)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(payload)
                fh.flush()
                os.fsync(fh.fileno())
            try:
                # link() refuses to replace an existing file, so racing writers cannot clobber each other
                os.link(tmp, path)
            except FileExistsError:
                existing = self._read(path)
                if existing.content() != record.content():
                    raise StoreConflict(f"{path} already holds different content for key {record.key.encode()}")
                return path
        finally:
            os.unlink(tmp)
        self._append_index(record.key, path)
        return path

    def _append_index(self, key: RunKey, path: Path) -> None:
        line = json.dumps({"key": key.encode(), "path": str(path.relative_to(self.root))}) + "\n"
        with self._index_lock, self.index_path.open("a", encoding="utf-8") as fh:
            fh.write(line)

    def keys(self) -> Iterator[RunKey]:
        if not self.index_path.exists():
            return
        seen = set()
        with self.index_path.open(encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    encoded = json.loads(line)["key"]
                    if encoded not in seen:
                        seen.add(encoded)
                        yield RunKey.decode(encoded)

    def __len__(self) -> int:
        return sum(1 for _ in self.keys())

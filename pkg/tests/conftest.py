from __future__ import annotations

import json
from pathlib import Path

import pytest
from PIL import Image

from marsvid.domain import VideoRecord, write_manifest
from marsvid.provider import MockProvider, MockScript


def write_frames(directory: Path, count: int, size=(32, 24), suffix=".png") -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        Image.new("RGB", size, (i * 7 % 256, 40, 200)).save(directory / f"frame_{i:04d}{suffix}")
    return directory


@pytest.fixture
def frames_dir(tmp_path) -> Path:
    return write_frames(tmp_path / "frames", 16)


def make_records(n: int, frames_dir: Path, labels=None, transcript="speaker talks about the weather") -> list[VideoRecord]:
    labels = labels or ["Non-Hate"] * n
    return [VideoRecord(id=f"v{i:03d}", transcript=transcript, gold_label=labels[i], frames_dir=str(frames_dir))
            for i in range(n)]


@pytest.fixture
def records(frames_dir):
    return make_records(6, frames_dir)


@pytest.fixture
def manifest_path(tmp_path, frames_dir) -> Path:
    labels = ["Hate", "Non-Hate"] * 5
    return write_manifest(make_records(10, frames_dir, labels), tmp_path / "m.jsonl")


@pytest.fixture
def mock_provider() -> MockProvider:
    return MockProvider(MockScript())


def decision_json(label: str, confidence: float = 0.8) -> str:
    return json.dumps({"label": label, "confidence": confidence, "key_factors": ["factor"],
                       "rationale": f"scripted {label}"}, sort_keys=True)

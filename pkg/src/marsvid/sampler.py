"""Uniform frame sampling from video files or pre-extracted frame directories."""

from __future__ import annotations

import io
import logging
import re
import shutil
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from PIL import Image

from .domain import VideoRecord

logger = logging.getLogger(__name__)

DEFAULT_FRAMES = 16
DEFAULT_MAX_EDGE = 768
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")


class SamplingError(RuntimeError):
    """Media could not be read or produced no frames."""


class ExternalToolError(SamplingError):
    def __init__(self, command: list[str], returncode: int, stderr: str):
        self.command = command
        self.returncode = returncode
        self.stderr = stderr
        tail = stderr.strip().splitlines()[-3:]
        super().__init__(f"{Path(command[0]).name} exited with code {returncode}: {' | '.join(tail)}")


@dataclass(frozen=True)
class FrameIndexPlan:
    total_frames: int
    requested_n: int
    indices: tuple[int, ...]

    @property
    def short_sample(self) -> bool:
        return self.total_frames < self.requested_n


def uniform_indices(total_frames: int, n: int) -> FrameIndexPlan:
    """Pick ``n`` frame indices spread evenly over ``total_frames``.

    Index ``i`` is ``floor(i * total_frames / n)``, so the first sampled frame
    is always frame 0. When the video has no more than ``n`` frames every frame
    is taken once; nothing is duplicated.
    """
    if n < 1:
        raise ValueError(f"number of frames to sample must be >= 1, got {n}")
    if total_frames < 0:
        raise ValueError(f"total_frames must be >= 0, got {total_frames}")
    if total_frames <= n:
        indices = tuple(range(total_frames))
    else:
        indices = tuple((i * total_frames) // n for i in range(n))
    return FrameIndexPlan(total_frames, n, indices)


@dataclass(frozen=True)
class Frame:
    source_index: int
    data: bytes
    media_type: str = "image/jpeg"


@dataclass(frozen=True)
class FrameSet:
    video_id: str
    frames: tuple[Frame, ...]
    plan: FrameIndexPlan
    flags: frozenset[str] = field(default_factory=frozenset)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def indices(self) -> list[int]:
        return [f.source_index for f in self.frames]


def encode_image(image: Image.Image, max_edge: int = DEFAULT_MAX_EDGE, fmt: str = "JPEG") -> bytes:
    image = image.convert("RGB")
    if max(image.size) > max_edge:
        image.thumbnail((max_edge, max_edge), Image.Resampling.LANCZOS)
    buf = io.BytesIO()
    image.save(buf, format=fmt, quality=90)
    return buf.getvalue()


def _frame_files(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


class FFmpegExtractor:
    """Extract frames by shelling out to ``ffprobe`` / ``ffmpeg``.

    The frame count is probed first by decoding (``-count_frames``); the
    selected indices are then pulled in one pass with a ``select`` filter.
    """

    def __init__(self, ffmpeg: str = "ffmpeg", ffprobe: str = "ffprobe", timeout: float = 300.0):
        self.ffmpeg = ffmpeg
        self.ffprobe = ffprobe
        self.timeout = timeout

    @staticmethod
    def available(ffmpeg: str = "ffmpeg", ffprobe: str = "ffprobe") -> bool:
        return shutil.which(ffmpeg) is not None and shutil.which(ffprobe) is not None

    def _run(self, command: list[str]) -> subprocess.CompletedProcess:
        try:
            proc = subprocess.run(command, capture_output=True, timeout=self.timeout)
        except FileNotFoundError as exc:
            raise ExternalToolError(command, 127, str(exc)) from exc
        except subprocess.TimeoutExpired as exc:
            raise ExternalToolError(command, -1, f"timed out after {self.timeout}s") from exc
        if proc.returncode != 0:
            raise ExternalToolError(command, proc.returncode, proc.stderr.decode("utf-8", "replace"))
        return proc

    def count_frames(self, path: Path) -> int:
        proc = self._run([
            self.ffprobe, "-v", "error", "-select_streams", "v:0", "-count_frames",
            "-show_entries", "stream=nb_read_frames", "-of", "csv=p=0", str(path),
        ])
        text = proc.stdout.decode("utf-8", "replace").strip()
        match = re.search(r"\d+", text)
        if match is None:
            raise SamplingError(f"could not read frame count for {path}: {text!r}")
        return int(match.group())

    def extract(self, path: Path, indices: tuple[int, ...]) -> list[Image.Image]:
        select = "+".join(f"eq(n\\,{i})" for i in indices)
        with tempfile.TemporaryDirectory(prefix="marsvid-") as tmp:
            pattern = str(Path(tmp) / "frame_%05d.png")
            self._run([
                self.ffmpeg, "-v", "error", "-nostdin", "-i", str(path),
                "-vf", f"select='{select}'", "-vsync", "0", "-frames:v", str(len(indices)), pattern,
            ])
            images = []
            for file in _frame_files(Path(tmp)):
                with Image.open(file) as im:
                    images.append(im.copy())
        return images


class OpenCVExtractor:
    """Decode frames in-process with OpenCV; used when ffmpeg is not installed."""

    def __init__(self) -> None:
        import cv2  # noqa: F401  (fail early if the optional dependency is missing)

    def count_frames(self, path: Path) -> int:
        import cv2

        cap = cv2.VideoCapture(str(path))
        if not cap.isOpened():
            raise SamplingError(f"cannot open video {path}")
        try:
            # the container's frame-count header is unreliable; count by decoding
            count = 0
            while cap.grab():
                count += 1
        finally:
            cap.release()
        return count

    def extract(self, path: Path, indices: tuple[int, ...]) -> list[Image.Image]:
        import cv2

        wanted = set(indices)
        last = max(indices) if indices else -1
        cap = cv2.VideoCapture(str(path))
        if not cap.isOpened():
            raise SamplingError(f"cannot open video {path}")
        images = []
        try:
            pos = 0
            while pos <= last and cap.grab():
                if pos in wanted:
                    ok, bgr = cap.retrieve()
                    if not ok:
                        raise SamplingError(f"failed to decode frame {pos} of {path}")
                    images.append(Image.fromarray(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)))
                pos += 1
        finally:
            cap.release()
        return images


def default_extractor() -> FFmpegExtractor | OpenCVExtractor:
    if FFmpegExtractor.available():
        return FFmpegExtractor()
    try:
        return OpenCVExtractor()
    except ImportError as exc:
        raise SamplingError("no frame extractor available: install ffmpeg or opencv-python-headless") from exc


def load_frames(
    record: VideoRecord,
    n: int = DEFAULT_FRAMES,
    *,
    extractor=None,
    max_edge: int = DEFAULT_MAX_EDGE,
) -> FrameSet:
    """Load the uniformly sampled frames of one video as JPEG payloads.

    For a frame directory the lexicographically sorted image files define the
    index space; for a video file it is the sequence of decoded frames.
    """
    media = Path(record.media)
    if not media.exists():
        raise SamplingError(f"{record.id}: media not found: {media}")

    if record.media_kind == "frames":
        if not media.is_dir():
            raise SamplingError(f"{record.id}: frames_dir is not a directory: {media}")
        files = _frame_files(media)
        plan = uniform_indices(len(files), n)
        if not plan.indices:
            raise SamplingError(f"{record.id}: no .jpg/.png frames in {media}")
        frames = []
        for idx in plan.indices:
            try:
                with Image.open(files[idx]) as im:
                    frames.append(Frame(idx, encode_image(im, max_edge)))
            except OSError as exc:
                raise SamplingError(f"{record.id}: unreadable frame {files[idx]}: {exc}") from exc
    else:
        extractor = extractor or default_extractor()
        total = extractor.count_frames(media)
        plan = uniform_indices(total, n)
        if not plan.indices:
            raise SamplingError(f"{record.id}: video has zero decodable frames: {media}")
        images = extractor.extract(media, plan.indices)
        if len(images) != len(plan.indices):
            raise SamplingError(
                f"{record.id}: expected {len(plan.indices)} frames from {media}, extractor returned {len(images)}"
            )
        frames = [Frame(idx, encode_image(im, max_edge)) for idx, im in zip(plan.indices, images)]

    flags = frozenset({"short_sample"}) if plan.short_sample else frozenset()
    if flags:
        logger.info("%s: only %d frames available (requested %d)", record.id, plan.total_frames, n)
    return FrameSet(record.id, tuple(frames), plan, flags)


def save_frames(frames: FrameSet, directory: str | Path) -> list[Path]:
    """Write a frame set to disk as ``<source_index>.jpg`` files (used by ``marsvid sample``)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for frame in frames.frames:
        path = directory / f"{frame.source_index:06d}.jpg"
        path.write_bytes(frame.data)
        paths.append(path)
    return paths

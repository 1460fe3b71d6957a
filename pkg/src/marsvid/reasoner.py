"""Detection strategies: the four-stage adversarial pipeline and the prompting baselines.

``mars`` runs

1. an objective, interpretation-free description of the video;
2. the strongest case *for* a hateful reading;
3. the strongest case *against* it (independent of 2, run concurrently);
4. a synthesis that weighs both cases and emits the decision.

Ablations drop stage 1 (``no_objdesc``) or replace stages 2-3 with one
unframed evidence-gathering call (``no_assumption``). ``simple`` is a single
zero-shot classification call; ``cot`` analyses frames and transcript
separately and then integrates them.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

from . import parsing
from .domain import VideoRecord
from .parsing import (
    COT_FRAMES, COT_INTEGRATE, COT_SINGLE, COT_TRANSCRIPT, HATE, META, NEUTRAL, NONHATE,
    OBJECTIVE, PARSE_FAILURE, SIMPLE,
)
from .prompts import PromptSet, default_prompts
from .provider import (
    REFUSED, TRUNCATED, ImagePart, ModelResponse, ProviderError, RequestTag, VisionChatRequest,
)
from .sampler import DEFAULT_FRAMES, DEFAULT_MAX_EDGE, FrameSet, SamplingError, load_frames
from .store import RunKey, RunStore, StageRecord

logger = logging.getLogger(__name__)

STRATEGIES = ("simple", "cot", "mars")
ABLATIONS = ("none", "no_objdesc", "no_assumption")

EMPTY_TRANSCRIPT = "[no transcript available]"
NO_OBJECTIVE = "[objective description not produced in this configuration]"
WITHHELD_TRANSCRIPT = "[transcript withheld: analyse the frames only]"
NEUTRAL_NOTE = "[no separate non-hateful case was built; the neutral review above covers both readings]"


@dataclass(frozen=True)
class ObjectiveDescription:
    text: str
    parse_flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {"text": self.text, "parse_flags": list(self.parse_flags)}


@dataclass(frozen=True)
class HypothesisReport:
    stance: str
    evidence: str
    reasoning: str
    confidence: float
    parse_flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self) | {"parse_flags": list(self.parse_flags)}

    def render(self) -> str:
        return f"Evidence: {self.evidence}\nReasoning: {self.reasoning}\nConfidence: {self.confidence:.2f}"


@dataclass(frozen=True)
class MetaDecision:
    """Final decision. ``conf_final`` is reported for interpretability and never thresholded."""

    y_pred: int
    conf_final: float
    key_factors: tuple[str, ...] = ()
    rationale: str = ""
    parse_flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.y_pred not in (0, 1):
            raise ValueError(f"y_pred must be 0 or 1, got {self.y_pred}")
        if not 0.0 <= self.conf_final <= 1.0:
            raise ValueError(f"conf_final {self.conf_final} outside [0, 1]")

    @property
    def parse_failed(self) -> bool:
        return PARSE_FAILURE in self.parse_flags

    def to_dict(self) -> dict:
        return {
            "y_pred": self.y_pred,
            "conf_final": self.conf_final,
            "key_factors": list(self.key_factors),
            "rationale": self.rationale,
            "parse_flags": list(self.parse_flags),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MetaDecision":
        return cls(int(data["y_pred"]), float(data["conf_final"]), tuple(data.get("key_factors", ())),
                   data.get("rationale", ""), tuple(data.get("parse_flags", ())))


FALLBACK_DECISION = MetaDecision(0, 0.0, (), "", (PARSE_FAILURE,))


@dataclass
class StrategyConfig:
    strategy: str = "mars"
    ablation: str = "none"
    frames_n: int = DEFAULT_FRAMES
    prompts: PromptSet = field(default_factory=default_prompts)
    model_id: str = "mock"
    temperature: float = 0.0
    max_output: int = 1024
    parallel_hypotheses: bool = True
    cot_single_call: bool = False
    max_edge: int = DEFAULT_MAX_EDGE

    def __post_init__(self) -> None:
        self.ablation = self.ablation.replace("-", "_")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; choose from {ABLATIONS}")
        if self.ablation != "none" and self.strategy != "mars":
            raise ValueError("ablations apply only to the mars strategy")
        if self.frames_n < 1:
            raise ValueError("frames_n must be >= 1")

    @property
    def prompt_hash(self) -> str:
        return self.prompts.version_hash

    def condition(self) -> dict:
        return {"strategy": self.strategy, "ablation": self.ablation, "frames_n": self.frames_n,
                "model_id": self.model_id, "prompt_hash": self.prompt_hash}


def expected_calls(strategy: str, ablation: str = "none", cot_single_call: bool = False) -> int:
    if strategy == "simple":
        return 1
    if strategy == "cot":
        return 1 if cot_single_call else 3
    return {"none": 4, "no_objdesc": 3, "no_assumption": 3}[ablation.replace("-", "_")]


# -- parsing stage outputs ----------------------------------------------------

def _response_flags(finish_reason: str) -> set[str]:
    if finish_reason == REFUSED:
        return {"refused"}
    if finish_reason == TRUNCATED:
        return {"truncated"}
    return set()


def build_description(raw: str, finish_reason: str = "complete") -> ObjectiveDescription:
    outcome = parsing.parse_stage_output(raw, parsing.DESCRIPTION_SCHEMA)
    flags = outcome.flags | _response_flags(finish_reason)
    if outcome.ok:
        return ObjectiveDescription(outcome.data["description"], tuple(sorted(flags)))
    text = raw if isinstance(raw, str) else str(raw)
    if text.strip() and "{" not in text and finish_reason != REFUSED:
        # free prose is an acceptable factual description
        flags = (flags - {PARSE_FAILURE}) | {"plain_text"}
        return ObjectiveDescription(text.strip(), tuple(sorted(flags)))
    return ObjectiveDescription(text, tuple(sorted(flags | {PARSE_FAILURE})))


def build_hypothesis(raw: str, stance: str, finish_reason: str = "complete") -> HypothesisReport:
    outcome = parsing.parse_stage_output(raw, parsing.HYPOTHESIS_SCHEMA)
    flags = tuple(sorted(outcome.flags | _response_flags(finish_reason)))
    if not outcome.ok:
        return HypothesisReport(stance, "", "", 0.0, flags)
    d = outcome.data
    return HypothesisReport(stance, d["evidence"], d["reasoning"], d["confidence"], flags)


def build_decision(raw: str, finish_reason: str = "complete") -> MetaDecision:
    outcome = parsing.parse_stage_output(raw, parsing.DECISION_SCHEMA)
    flags = tuple(sorted(outcome.flags | _response_flags(finish_reason)))
    if not outcome.ok:
        return MetaDecision(0, 0.0, (), "", flags)
    d = outcome.data
    return MetaDecision(d["label"], d["confidence"], tuple(d["key_factors"]), d["rationale"], flags)


_STANCE = {HATE: "hate", NONHATE: "nonhate", NEUTRAL: "neutral"}


def build_stage_output(stage: str, raw: str, finish_reason: str = "complete"):
    schema = parsing.STAGE_SCHEMA[stage]
    if schema == parsing.DESCRIPTION_SCHEMA:
        return build_description(raw, finish_reason)
    if schema == parsing.HYPOTHESIS_SCHEMA:
        return build_hypothesis(raw, _STANCE[stage], finish_reason)
    return build_decision(raw, finish_reason)


# -- request construction -----------------------------------------------------

def _transcript_text(transcript: str) -> str:
    return transcript if transcript.strip() else EMPTY_TRANSCRIPT


def _request(stage: str, template: str, values: dict, frames: FrameSet | None, prompts: PromptSet,
             config: StrategyConfig, video_id: str) -> VisionChatRequest:
    parts: list = [prompts.render(template, **values)]
    if frames is not None:
        parts.extend(ImagePart(f.data, f.media_type) for f in frames.frames)
    return VisionChatRequest(
        system_text=prompts.system,
        user_parts=tuple(parts),
        tag=RequestTag(video_id, config.strategy, stage),
        model_id=config.model_id,
        temperature=config.temperature,
        max_output=config.max_output,
    )


def _call(provider, request: VisionChatRequest):
    response = provider.complete(request)
    return build_stage_output(request.tag.stage, response.text, response.finish_reason)


def _cfg(config: StrategyConfig | None, prompts: PromptSet) -> StrategyConfig:
    return config if config is not None else StrategyConfig(prompts=prompts)


def stage1_objective(frames: FrameSet, transcript: str, prompts: PromptSet, provider,
                     config: StrategyConfig | None = None) -> ObjectiveDescription:
    if not len(frames) and not transcript.strip():
        raise ValueError("objective description needs frames or a transcript")
    config = _cfg(config, prompts)
    req = _request(OBJECTIVE, "objective", {"transcript": _transcript_text(transcript)},
                   frames, prompts, config, frames.video_id)
    return _call(provider, req)


def stage_hypothesis(frames: FrameSet, transcript: str, stance: str, prompts: PromptSet, provider,
                     config: StrategyConfig | None = None) -> HypothesisReport:
    """Argue one side. ``stance`` is ``"hate"`` or ``"nonhate"``; it selects only the template."""
    templates = {"hate": (HATE, "hate_hypothesis"), "nonhate": (NONHATE, "nonhate_hypothesis"),
                 "neutral": (NEUTRAL, "neutral_analysis")}
    if stance not in templates:
        raise ValueError(f"unknown stance {stance!r}")
    stage, template = templates[stance]
    config = _cfg(config, prompts)
    req = _request(stage, template, {"transcript": _transcript_text(transcript)},
                   frames, prompts, config, frames.video_id)
    return _call(provider, req)


def stage4_meta(frames: FrameSet, transcript: str, obj: ObjectiveDescription | None,
                hate: HypothesisReport, nonhate: HypothesisReport | None, prompts: PromptSet, provider,
                config: StrategyConfig | None = None) -> MetaDecision:
    """Weigh the two cases. Stage outputs are embedded verbatim in the prompt.

    Under ``no_assumption`` ``hate`` is the neutral review and ``nonhate`` is None.
    """
    config = _cfg(config, prompts)
    obj_text = obj.text if obj is not None and obj.text else NO_OBJECTIVE
    if hate.stance == "neutral":
        hate_text = "Neutral evidence review (no hypothesis framing):\n" + hate.render()
    else:
        hate_text = hate.render()
    nonhate_text = nonhate.render() if nonhate is not None else NEUTRAL_NOTE
    values = {"transcript": _transcript_text(transcript), "obj": obj_text,
              "hate_report": hate_text, "nonhate_report": nonhate_text}
    req = _request(META, "meta_synthesis", values, frames, prompts, config, frames.video_id)
    return _call(provider, req)


def simple_prompt(frames: FrameSet, transcript: str, prompts: PromptSet, provider,
                  config: StrategyConfig | None = None) -> MetaDecision:
    config = _cfg(config, prompts)
    req = _request(SIMPLE, "simple", {"transcript": _transcript_text(transcript)},
                   frames, prompts, config, frames.video_id)
    return _call(provider, req)


# -- per-video orchestration --------------------------------------------------

@dataclass
class DetectionResult:
    video_id: str
    strategy: str
    ablation: str
    stage_outputs: dict
    decision: MetaDecision
    call_count: int = 0
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None
    flags: tuple[str, ...] = ()
    metadata: dict = field(default_factory=dict)

    def canonical(self) -> dict:
        """Everything that must be reproducible across runs (no timing, call or cache metadata)."""
        return {
            "video_id": self.video_id,
            "strategy": self.strategy,
            "ablation": self.ablation,
            "stage_outputs": self.stage_outputs,
            "decision": self.decision.to_dict(),
            "status": self.status,
            "error": self.error,
            "flags": list(self.flags),
        }

    def canonical_json(self) -> str:
        return json.dumps(self.canonical(), sort_keys=True, ensure_ascii=False)

    def to_dict(self) -> dict:
        return self.canonical() | {"call_count": self.call_count, "wall_time": self.wall_time,
                                   "metadata": self.metadata}


class _Session:
    """Per-video call router: serves stages from the store, otherwise calls and records them."""

    def __init__(self, record: VideoRecord, config: StrategyConfig, provider, store: RunStore | None,
                 frames: FrameSet | None, frame_loader: Callable[[VideoRecord, int], FrameSet] | None):
        self.record = record
        self.config = config
        self.provider = provider
        self.store = store
        self.calls = 0
        self._frames = frames
        self._frame_loader = frame_loader or (lambda rec, n: load_frames(rec, n, max_edge=config.max_edge))
        self._lock = threading.Lock()

    def frames(self) -> FrameSet:
        with self._lock:
            if self._frames is None:
                self._frames = self._frame_loader(self.record, self.config.frames_n)
            return self._frames

    def key(self, stage: str) -> RunKey:
        c = self.config
        return RunKey(self.record.id, c.strategy, c.ablation, stage, c.model_id, c.prompt_hash, c.frames_n)

    def complete(self, request: VisionChatRequest) -> ModelResponse:
        response = self.provider.complete(request)
        with self._lock:
            self.calls += 1
        if self.store is not None:
            stage = request.tag.stage
            parsed = build_stage_output(stage, response.text, response.finish_reason)
            self.store.put_record(StageRecord(
                key=self.key(stage),
                raw_response=response.text,
                parsed=parsed.to_dict(),
                parse_flags=tuple(parsed.parse_flags),
                finish_reason=response.finish_reason,
                attempt_count=response.attempt_count,
                latency_ms=response.latency_ms,
            ))
        return response

    def stage(self, stage: str, compute: Callable[[], object]):
        if self.store is not None:
            cached = self.store.get_record(self.key(stage))
            if cached is not None:
                return build_stage_output(stage, cached.raw_response, cached.finish_reason)
        return compute()


def _run_mars(s: _Session, transcript: str, outputs: dict) -> MetaDecision:
    cfg, prompts = s.config, s.config.prompts
    obj = None
    if cfg.ablation != "no_objdesc":
        obj = s.stage(OBJECTIVE, lambda: stage1_objective(s.frames(), transcript, prompts, s, cfg))
        outputs[OBJECTIVE] = obj.to_dict()

    if cfg.ablation == "no_assumption":
        neutral = s.stage(NEUTRAL, lambda: stage_hypothesis(s.frames(), transcript, "neutral", prompts, s, cfg))
        outputs[NEUTRAL] = neutral.to_dict()
        hate, nonhate = neutral, None
    else:
        run_hate = lambda: s.stage(HATE, lambda: stage_hypothesis(s.frames(), transcript, "hate", prompts, s, cfg))
        run_non = lambda: s.stage(NONHATE, lambda: stage_hypothesis(s.frames(), transcript, "nonhate", prompts, s, cfg))
        if cfg.parallel_hypotheses:
            with ThreadPoolExecutor(max_workers=2) as pool:
                fut_hate, fut_non = pool.submit(run_hate), pool.submit(run_non)
                hate, nonhate = fut_hate.result(), fut_non.result()
        else:
            hate, nonhate = run_hate(), run_non()
        outputs[HATE] = hate.to_dict()
        outputs[NONHATE] = nonhate.to_dict()

    decision = s.stage(META, lambda: stage4_meta(s.frames(), transcript, obj, hate, nonhate, prompts, s, cfg))
    outputs[META] = decision.to_dict()
    return decision


def _run_cot(s: _Session, transcript: str, outputs: dict) -> MetaDecision:
    cfg, prompts = s.config, s.config.prompts
    vid = s.record.id
    text = _transcript_text(transcript)
    if cfg.cot_single_call:
        decision = s.stage(COT_SINGLE, lambda: _call(
            s, _request(COT_SINGLE, "cot_single", {"transcript": text}, s.frames(), prompts, cfg, vid)))
        outputs[COT_SINGLE] = decision.to_dict()
        return decision

    frames_view = s.stage(COT_FRAMES, lambda: _call(s, _request(
        COT_FRAMES, "cot_modality", {"modality": "frames", "transcript": WITHHELD_TRANSCRIPT},
        s.frames(), prompts, cfg, vid)))
    outputs[COT_FRAMES] = frames_view.to_dict()
    transcript_view = s.stage(COT_TRANSCRIPT, lambda: _call(s, _request(
        COT_TRANSCRIPT, "cot_modality", {"modality": "transcript", "transcript": text},
        None, prompts, cfg, vid)))
    outputs[COT_TRANSCRIPT] = transcript_view.to_dict()
    values = {"frames_analysis": frames_view.text, "transcript_analysis": transcript_view.text, "transcript": text}
    decision = s.stage(COT_INTEGRATE, lambda: _call(
        s, _request(COT_INTEGRATE, "cot_integrate", values, s.frames(), prompts, cfg, vid)))
    outputs[COT_INTEGRATE] = decision.to_dict()
    return decision


def run_strategy(record: VideoRecord, config: StrategyConfig, provider, store: RunStore | None = None, *,
                 frames: FrameSet | None = None,
                 frame_loader: Callable[[VideoRecord, int], FrameSet] | None = None) -> DetectionResult:
    """Run one strategy on one video.

    Stages already present in ``store`` are reused without a provider call.
    Provider and media failures are captured in the result (``status="error"``)
    so a batch can continue; store integrity errors propagate.
    """
    started = time.perf_counter()
    session = _Session(record, config, provider, store, frames, frame_loader)
    outputs: dict = {}
    flags = ("empty_transcript",) if not record.transcript.strip() else ()
    status, error = "ok", None
    try:
        if config.strategy == "mars":
            decision = _run_mars(session, record.transcript, outputs)
        elif config.strategy == "cot":
            decision = _run_cot(session, record.transcript, outputs)
        else:
            decision = session.stage(SIMPLE, lambda: simple_prompt(
                session.frames(), record.transcript, config.prompts, session, config))
            outputs[SIMPLE] = decision.to_dict()
    except (ProviderError, SamplingError) as exc:
        logger.error("%s: %s", record.id, exc)
        status, error = "error", f"{type(exc).__name__}: {exc}"
        decision = MetaDecision(0, 0.0, (), "", ("stage_error",))

    metadata = {}
    if session._frames is not None:
        metadata["frames_sampled"] = len(session._frames)
        metadata["frame_indices"] = session._frames.indices
        if session._frames.flags:
            metadata["frame_flags"] = sorted(session._frames.flags)
    return DetectionResult(
        video_id=record.id, strategy=config.strategy, ablation=config.ablation, stage_outputs=outputs,
        decision=decision, call_count=session.calls, wall_time=time.perf_counter() - started,
        status=status, error=error, flags=flags, metadata=metadata,
    )


def run_manifest(records, config: StrategyConfig, provider, store: RunStore | None = None, *, jobs: int = 1,
                 frame_loader: Callable[[VideoRecord, int], FrameSet] | None = None) -> list[DetectionResult]:
    """Run a strategy over many videos concurrently; results keep input order."""
    records = list(records)
    if jobs <= 1:
        return [run_strategy(r, config, provider, store, frame_loader=frame_loader) for r in records]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda r: run_strategy(r, config, provider, store, frame_loader=frame_loader), records))

"""Training-free hateful video detection by multi-stage adversarial reasoning over vision-language models."""

__version__ = "0.1.0"

from .domain import DatasetManifest, VideoRecord, load_manifest, merge_labels, write_manifest
from .estimator import MarsClassifier
from .evalharness import EvalReport, MetricSet, aggregate_folds, compute_metrics, make_folds, render_report
from .parsing import parse_stage_output
from .prompts import PromptSet
from .provider import HttpProvider, MockProvider, MockScript, ProviderConfig, ReplayProvider
from .reasoner import DetectionResult, MetaDecision, StrategyConfig, run_manifest, run_strategy
from .sampler import FrameSet, load_frames, uniform_indices
from .store import RunKey, RunStore, StageRecord

__all__ = [
    "DatasetManifest", "VideoRecord", "load_manifest", "merge_labels", "write_manifest",
    "MarsClassifier",
    "EvalReport", "MetricSet", "aggregate_folds", "compute_metrics", "make_folds", "render_report",
    "parse_stage_output", "PromptSet",
    "HttpProvider", "MockProvider", "MockScript", "ProviderConfig", "ReplayProvider",
    "DetectionResult", "MetaDecision", "StrategyConfig", "run_manifest", "run_strategy",
    "FrameSet", "load_frames", "uniform_indices",
    "RunKey", "RunStore", "StageRecord",
]

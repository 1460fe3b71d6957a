"""scikit-learn compatible wrapper around the detection strategies.

There is nothing to learn: ``fit`` only validates inputs and freezes the run
configuration, so the detector can sit inside sklearn tooling (``clone``,
``get_params``, ``cross_val_predict`` with a custom splitter, ``score``)::

    clf = MarsClassifier(strategy="mars", provider=MockProvider()).fit(records)
    y_pred = clf.predict(records)
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .domain import DatasetManifest, VideoRecord, load_manifest, merge_labels
from .prompts import PromptSet, default_prompts
from .provider import MockProvider
from .reasoner import DetectionResult, StrategyConfig, run_manifest


def check_records(X) -> list[VideoRecord]:
    """Coerce ``X`` (manifest path, manifest, records or record dicts) into a list of records."""
    if isinstance(X, (str, Path)):
        X = load_manifest(X)
    if isinstance(X, DatasetManifest):
        return [X.resolve_media(r) for r in X.records]
    if isinstance(X, VideoRecord):
        raise TypeError("expected a collection of VideoRecords, got a single record")
    try:
        items = list(X)
    except TypeError:
        raise TypeError(f"cannot interpret {type(X).__name__} as video records") from None
    records = [VideoRecord.from_dict(x) if isinstance(x, dict) else x for x in items]
    for r in records:
        if not isinstance(r, VideoRecord):
            raise TypeError(f"expected VideoRecord, got {type(r).__name__}")
    if len({r.id for r in records}) != len(records):
        raise ValueError("video ids must be unique")
    return records


def check_binary_labels(y, n: int | None = None, scheme: str = "auto") -> np.ndarray:
    """Return ``y`` as an int array of 0/1, mapping raw dataset label strings first."""
    values = [merge_labels(v, scheme) if isinstance(v, str) else v for v in y]
    arr = np.asarray(values)
    if arr.ndim != 1:
        raise ValueError("labels must be one-dimensional")
    if n is not None and len(arr) != n:
        raise ValueError(f"got {len(arr)} labels for {n} records")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise ValueError("labels must be 0 (non-hateful) or 1 (hateful)")
    return arr.astype(int)


def gold_labels(records: Iterable[VideoRecord], scheme: str = "auto") -> np.ndarray:
    return np.array([r.label(scheme) for r in records], dtype=int)


class MarsClassifier(ClassifierMixin, BaseEstimator):
    """Training-free hateful-video classifier.

    Parameters mirror :class:`~marsvid.reasoner.StrategyConfig`; ``provider``
    defaults to a :class:`~marsvid.provider.MockProvider` and ``store`` (a
    :class:`~marsvid.store.RunStore`) enables caching of stage outputs.
    """

    def __init__(self, strategy: str = "mars", ablation: str = "none", frames_n: int = 16,
                 provider=None, prompts: PromptSet | None = None, store=None, model_id: str = "mock",
                 temperature: float = 0.0, max_output: int = 1024, n_jobs: int = 1,
                 label_scheme: str = "auto", frame_loader=None):
        self.strategy = strategy
        self.ablation = ablation
        self.frames_n = frames_n
        self.provider = provider
        self.prompts = prompts
        self.store = store
        self.model_id = model_id
        self.temperature = temperature
        self.max_output = max_output
        self.n_jobs = n_jobs
        self.label_scheme = label_scheme
        self.frame_loader = frame_loader

    def fit(self, X, y=None):
        records = check_records(X)
        if y is not None:
            check_binary_labels(y, len(records), self.label_scheme)
        self.config_ = StrategyConfig(
            strategy=self.strategy, ablation=self.ablation, frames_n=self.frames_n,
            prompts=self.prompts if self.prompts is not None else default_prompts(),
            model_id=self.model_id, temperature=self.temperature, max_output=self.max_output,
        )
        self.provider_ = self.provider if self.provider is not None else MockProvider()
        self.classes_ = np.array([0, 1])
        self.prompt_hash_ = self.config_.prompt_hash
        return self

    def decide(self, X) -> list[DetectionResult]:
        """Full per-video results, including stage outputs and rationale."""
        check_is_fitted(self, "config_")
        records = check_records(X)
        return run_manifest(records, self.config_, self.provider_, self.store, jobs=self.n_jobs,
                            frame_loader=self.frame_loader)

    def predict(self, X) -> np.ndarray:
        return np.array([r.decision.y_pred for r in self.decide(X)], dtype=int)

    def score(self, X, y=None, sample_weight=None) -> float:
        records = check_records(X)
        y = gold_labels(records, self.label_scheme) if y is None else check_binary_labels(y, len(records),
                                                                                           self.label_scheme)
        return super().score(records, y, sample_weight)

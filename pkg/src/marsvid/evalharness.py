"""Fold construction, metrics and report rendering.

Hate is the positive class throughout. With a zero denominator, precision,
recall and F1 are 0 and the condition is recorded in ``MetricSet.flags``.
"""

from __future__ import annotations

import json
import math
import random
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

from .parsing import PARSE_FAILURE

METRICS = ("accuracy", "macro_f1", "f1_hate", "precision_hate", "recall_hate")
COLUMN_TITLES = {"accuracy": "Acc", "macro_f1": "MF1", "f1_hate": "F1",
                 "precision_hate": "P", "recall_hate": "R"}
TRAIN_RATIO, VAL_RATIO, TEST_RATIO = 0.7, 0.1, 0.2
FAILURE_FLAGS = frozenset({PARSE_FAILURE, "stage_error"})


class EvaluationError(ValueError):
    pass


# -- folds ----------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    index: int
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]


@dataclass(frozen=True)
class FoldPlan:
    """A k-way repartition whose test sets are mutually exclusive and cover the dataset.

    Train/val portions are produced for protocol parity with trained
    baselines; training-free strategies only score the test sets.
    """

    k: int
    seed: int
    ids: tuple[str, ...]
    assignments: tuple[int, ...]
    order: tuple[int, ...]
    ratios: tuple[float, float, float] = (TRAIN_RATIO, VAL_RATIO, TEST_RATIO)

    def test_ids(self, fold: int) -> list[str]:
        return [self.ids[i] for i in self.order if self.assignments[i] == fold]

    def fold(self, fold: int) -> Fold:
        if not 0 <= fold < self.k:
            raise IndexError(fold)
        test = self.test_ids(fold)
        rest = [self.ids[i] for i in self.order if self.assignments[i] != fold]
        n_val = min(len(rest), round(VAL_RATIO * len(self.ids)))
        return Fold(fold, tuple(rest[n_val:]), tuple(rest[:n_val]), tuple(test))

    def folds(self) -> list[Fold]:
        return [self.fold(f) for f in range(self.k)]

    def to_dict(self) -> dict:
        return {"k": self.k, "seed": self.seed,
                "assignments": {vid: a for vid, a in zip(self.ids, self.assignments)}}


def make_folds(ids_or_manifest, k: int = 5, seed: int = 0) -> FoldPlan:
    """Shuffle with ``seed`` and deal records round-robin into ``k`` test folds."""
    ids = tuple(x if isinstance(x, str) else x.id for x in ids_or_manifest)
    if k < 2:
        raise EvaluationError(f"need at least 2 folds, got k={k}")
    if len(ids) < k:
        raise EvaluationError(f"cannot make {k} folds from {len(ids)} records")
    if len(set(ids)) != len(ids):
        raise EvaluationError("ids must be unique")
    order = list(range(len(ids)))
    random.Random(seed).shuffle(order)
    assignments = [0] * len(ids)
    for position, idx in enumerate(order):
        assignments[idx] = position % k
    return FoldPlan(k, seed, ids, tuple(assignments), tuple(order))


# -- metrics --------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    macro_f1: float
    f1_hate: float
    precision_hate: float
    recall_hate: float
    f1_nonhate: float = 0.0
    n_scored: float = 0
    n_parse_failures: float = 0
    flags: tuple[str, ...] = ()

    def values(self) -> dict[str, float]:
        return {m: getattr(self, m) for m in METRICS}

    def to_dict(self) -> dict:
        return asdict(self) | {"flags": list(self.flags)}

    @classmethod
    def from_dict(cls, data: dict) -> "MetricSet":
        known = {f.name for f in fields(cls)}
        kwargs = {k: v for k, v in data.items() if k in known}
        kwargs["flags"] = tuple(kwargs.get("flags", ()))
        return cls(**kwargs)


def _ratio(num: int, den: int, name: str, flags: list[str]) -> float:
    if den == 0:
        flags.append(f"{name}_undefined")
        return 0.0
    return num / den


def metrics_from_counts(c: ConfusionCounts, n_failures: int = 0) -> MetricSet:
    flags: list[str] = []
    if c.total == 0:
        raise EvaluationError("no scored items")
    precision = _ratio(c.tp, c.tp + c.fp, "precision_hate", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall_hate", flags)
    f1_hate = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1_hate", flags)
    f1_non = _ratio(2 * c.tn, 2 * c.tn + c.fn + c.fp, "f1_nonhate", flags)
    return MetricSet(
        accuracy=(c.tp + c.tn) / c.total,
        macro_f1=(f1_hate + f1_non) / 2,
        f1_hate=f1_hate,
        precision_hate=precision,
        recall_hate=recall,
        f1_nonhate=f1_non,
        n_scored=c.total,
        n_parse_failures=n_failures,
        flags=tuple(flags),
    )


@dataclass(frozen=True)
class Prediction:
    id: str
    y_pred: int
    conf_final: float = 0.0
    flags: tuple[str, ...] = ()

    @property
    def failed(self) -> bool:
        return bool(FAILURE_FLAGS & set(self.flags))


def _as_prediction(p) -> Prediction:
    if isinstance(p, Prediction):
        return p
    if isinstance(p, dict):
        return Prediction(str(p["id"]), int(p["y_pred"]), float(p.get("conf_final", 0.0)), tuple(p.get("flags", ())))
    vid, y, *rest = p
    return Prediction(str(vid), int(y), 0.0, tuple(rest[0]) if rest else ())


def confusion(predictions: Iterable, golds) -> tuple[ConfusionCounts, int]:
    preds = [_as_prediction(p) for p in predictions]
    gold = dict(golds) if not isinstance(golds, dict) else golds
    ids = [p.id for p in preds]
    if len(set(ids)) != len(ids):
        raise EvaluationError("duplicate prediction ids")
    missing = [i for i in ids if i not in gold]
    if missing:
        raise EvaluationError(f"no gold label for {missing[:5]}")
    tp = fp = fn = tn = failures = 0
    for p in preds:
        if p.y_pred not in (0, 1) or gold[p.id] not in (0, 1):
            raise EvaluationError(f"labels must be 0/1 (id {p.id})")
        failures += p.failed
        y = gold[p.id]
        if p.y_pred == 1:
            tp, fp = tp + (y == 1), fp + (y == 0)
        else:
            fn, tn = fn + (y == 1), tn + (y == 0)
    return ConfusionCounts(tp, fp, fn, tn), failures


def compute_metrics(predictions: Iterable, golds, *, exclude_failures: bool = False) -> MetricSet:
    """Score predictions against gold labels.

    ``predictions`` items may be :class:`Prediction`, dicts or ``(id, y_pred[, flags])``
    tuples; ``golds`` is a mapping or ``(id, y)`` pairs. Parse failures count
    as non-hateful predictions unless ``exclude_failures`` drops them.
    """
    preds = [_as_prediction(p) for p in predictions]
    if exclude_failures:
        n_failed = sum(p.failed for p in preds)
        counts, _ = confusion([p for p in preds if not p.failed], golds)
        return metrics_from_counts(counts, n_failed)
    counts, n_failed = confusion(preds, golds)
    return metrics_from_counts(counts, n_failed)


def aggregate_folds(per_fold: Sequence[MetricSet]) -> tuple[MetricSet, MetricSet]:
    """Elementwise mean and sample standard deviation (n-1) across folds.

    Counts in the mean are totals over folds; the std carries zero counts.
    """
    if not per_fold:
        raise EvaluationError("no folds to aggregate")
    rate_fields = METRICS + ("f1_nonhate",)
    mean, std = {}, {}
    for name in rate_fields:
        vals = [getattr(m, name) for m in per_fold]
        mean[name] = math.fsum(vals) / len(vals)
        std[name] = statistics.stdev(vals) if len(vals) > 1 else 0.0
    totals = {"n_scored": sum(m.n_scored for m in per_fold),
              "n_parse_failures": sum(m.n_parse_failures for m in per_fold)}
    flags = tuple(sorted({f for m in per_fold for f in m.flags}))
    return MetricSet(**mean, **totals, flags=flags), MetricSet(**std)


# -- reports --------------------------------------------------------------------

@dataclass
class EvalReport:
    per_fold: list[MetricSet]
    mean: MetricSet
    std: MetricSet
    condition: dict
    name: str = ""
    dataset_size: int = 0
    failure_excluded: MetricSet | None = None

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        c = self.condition
        parts = [c.get("strategy", "?")]
        if c.get("ablation", "none") != "none":
            parts.append(c["ablation"])
        parts.append(f"{c.get('frames_n', '?')} frames")
        if c.get("model_id"):
            parts.append(c["model_id"])
        return " / ".join(str(p) for p in parts)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "condition": self.condition,
            "dataset_size": self.dataset_size,
            "per_fold": [m.to_dict() for m in self.per_fold],
            "mean": self.mean.to_dict(),
            "std": self.std.to_dict(),
            "failure_excluded": self.failure_excluded.to_dict() if self.failure_excluded else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        fe = data.get("failure_excluded")
        return cls(
            per_fold=[MetricSet.from_dict(m) for m in data["per_fold"]],
            mean=MetricSet.from_dict(data["mean"]),
            std=MetricSet.from_dict(data["std"]),
            condition=dict(data["condition"]),
            name=data.get("name", ""),
            dataset_size=int(data.get("dataset_size", 0)),
            failure_excluded=MetricSet.from_dict(fe) if fe else None,
        )


def evaluate(predictions: Iterable, golds: dict[str, int], plan: FoldPlan, condition: dict,
             name: str = "") -> EvalReport:
    """Score each fold's test set and aggregate across folds."""
    by_id = {p.id: p for p in map(_as_prediction, predictions)}
    per_fold, excluded = [], []
    for f in range(plan.k):
        test = plan.test_ids(f)
        missing = [i for i in test if i not in by_id]
        if missing:
            raise EvaluationError(f"fold {f}: no prediction for {missing[:5]}")
        fold_preds = [by_id[i] for i in test]
        per_fold.append(compute_metrics(fold_preds, golds))
        if any(not p.failed for p in fold_preds):
            excluded.append(compute_metrics(fold_preds, golds, exclude_failures=True))
    mean, std = aggregate_folds(per_fold)
    fe_mean = aggregate_folds(excluded)[0] if excluded else None
    return EvalReport(per_fold, mean, std, dict(condition), name, len(plan.ids), fe_mean)


def format_cell(mean: float, std: float) -> str:
    """Mean as a percentage with one decimal, std as a fraction: ``81.3±0.014``."""
    return f"{mean * 100:.1f}±{std:.3f}"


def render_table(reports: Sequence[EvalReport]) -> str:
    header = ["Condition"] + [COLUMN_TITLES[m] for m in METRICS] + ["N", "Fail"]
    rows = []
    for r in reports:
        cells = [format_cell(getattr(r.mean, m), getattr(r.std, m)) for m in METRICS]
        rows.append([r.label] + cells + [str(r.dataset_size or int(r.mean.n_scored)), str(int(r.mean.n_parse_failures))])
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]

    def line(row):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"

    out = [line(header), "|" + "|".join("-" * (w + 2) for w in widths) + "|"]
    out += [line(r) for r in rows]
    k = {len(r.per_fold) for r in reports}
    out.append("")
    out.append(f"Cells: mean (%) ± sample std (n-1, as a fraction) over {'/'.join(map(str, sorted(k)))} folds. "
               "Fail: unparseable or errored decisions, scored as non-hateful.")
    return "\n".join(out) + "\n"


def render_report(reports: Sequence[EvalReport], format: str = "table") -> str:
    if format == "table":
        return render_table(reports)
    if format == "machine":
        return json.dumps({"reports": [r.to_dict() for r in reports]}, indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format {format!r}")


def parse_machine_report(text: str) -> list[EvalReport]:
    return [EvalReport.from_dict(d) for d in json.loads(text)["reports"]]


def render_decision(result, include_content: bool = False) -> str:
    """Human-readable audit card for one video's decision.

    Free-text model output (evidence, rationale, key factors) can quote the
    video's content; it is redacted unless ``include_content`` is set.
    """
    def show(text: str) -> str:
        if include_content or not text:
            return text
        return f"[redacted: {len(text)} chars; pass --include-content to show]"

    d = result.decision
    label = "hateful" if d.y_pred == 1 else "non-hateful"
    lines = [f"Video {result.video_id} [{result.strategy}/{result.ablation}] -> {label} "
             f"(confidence {d.conf_final:.2f}, not a threshold score)"]
    if result.status != "ok":
        lines.append(f"  status: {result.status}: {result.error}")
    if d.parse_flags:
        lines.append(f"  parse flags: {', '.join(d.parse_flags)}")
    if d.key_factors:
        lines.append("  key factors:")
        lines += [f"    - {show(f)}" for f in d.key_factors]
    lines.append(f"  rationale: {show(d.rationale)}")
    for stage in ("hate", "nonhate", "neutral"):
        out = result.stage_outputs.get(stage)
        if out:
            lines.append(f"  {stage} case (confidence {out['confidence']:.2f}): {show(out['evidence'])}")
    return "\n".join(lines) + "\n"


# -- predictions file -------------------------------------------------------------

def write_predictions(results, path: str | Path) -> Path:
    """One JSON line per video: id, y_pred, conf_final, flags, status."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for r in results:
            flags = sorted(set(r.decision.parse_flags) | set(r.flags))
            fh.write(json.dumps({"id": r.video_id, "y_pred": r.decision.y_pred,
                                 "conf_final": r.decision.conf_final, "flags": flags,
                                 "status": r.status}, sort_keys=True) + "\n")
    return path


def read_predictions(path: str | Path) -> list[Prediction]:
    preds = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                preds.append(_as_prediction(json.loads(line)))
    return preds

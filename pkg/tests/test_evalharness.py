import itertools
import json
import math
import random

import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score

from marsvid.evalharness import (
    EvalReport, EvaluationError, MetricSet, Prediction, aggregate_folds, compute_metrics, evaluate, format_cell,
    make_folds, parse_machine_report, read_predictions, render_report, write_predictions,
)


def from_counts(tp, fp, fn, tn):
    preds, golds, i = [], {}, 0
    for y, p, count in ((1, 1, tp), (0, 1, fp), (1, 0, fn), (0, 0, tn)):
        for _ in range(count):
            preds.append((f"x{i}", p))
            golds[f"x{i}"] = y
            i += 1
    return preds, golds


def brute_force(preds, golds):
    """Independent reference: per-class counting loops, textbook definitions."""
    def f1_for(cls):
        hit = sum(1 for vid, p in preds if p == cls and golds[vid] == cls)
        predicted = sum(1 for _, p in preds if p == cls)
        actual = sum(1 for v in golds.values() if v == cls)
        prec = hit / predicted if predicted else 0.0
        rec = hit / actual if actual else 0.0
        return prec, rec, (2 * prec * rec / (prec + rec) if prec + rec else 0.0)

    p1, r1, f1 = f1_for(1)
    _, _, f0 = f1_for(0)
    acc = sum(1 for vid, p in preds if p == golds[vid]) / len(preds)
    return {"accuracy": acc, "macro_f1": (f1 + f0) / 2, "f1_hate": f1, "precision_hate": p1, "recall_hate": r1}


def test_perfect_classifier():
    m = compute_metrics([("a", 1), ("b", 1), ("c", 0), ("d", 0)], {"a": 1, "b": 1, "c": 0, "d": 0})
    assert all(v == 1.0 for v in m.values().values())


def test_hand_checked_confusion():
    m = compute_metrics(*from_counts(3, 1, 2, 4))
    assert m.precision_hate == pytest.approx(0.750, abs=5e-4)
    assert m.recall_hate == pytest.approx(0.600, abs=5e-4)
    assert m.f1_hate == pytest.approx(0.667, abs=5e-4)
    assert m.accuracy == pytest.approx(0.700, abs=5e-4)
    assert m.macro_f1 == pytest.approx(0.697, abs=5e-4)


def test_all_hate_on_balanced_set():
    preds = [(f"x{i}", 1) for i in range(10)]
    golds = {f"x{i}": i % 2 for i in range(10)}
    m = compute_metrics(preds, golds)
    assert (m.recall_hate, m.precision_hate, m.accuracy) == (1.0, 0.5, 0.5)


def test_zero_denominator_convention():
    m = compute_metrics([("a", 0), ("b", 0)], {"a": 0, "b": 0})
    assert m.precision_hate == m.recall_hate == m.f1_hate == 0.0
    assert {"precision_hate_undefined", "recall_hate_undefined", "f1_hate_undefined"} <= set(m.flags)


def test_id_mismatch():
    with pytest.raises(EvaluationError):
        compute_metrics([("a", 1)], {"b": 1})
    with pytest.raises(EvaluationError):
        compute_metrics([("a", 1), ("a", 0)], {"a": 1})


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 1)), min_size=1, max_size=50), st.randoms())
def test_matches_brute_force_and_is_permutation_invariant(pairs, rnd):
    preds = [(f"x{i}", p) for i, (p, _) in enumerate(pairs)]
    golds = {f"x{i}": y for i, (_, y) in enumerate(pairs)}
    m = compute_metrics(preds, golds)
    ref = brute_force(preds, golds)
    for name, value in ref.items():
        assert abs(getattr(m, name) - value) <= 1e-12
    assert m.macro_f1 == (m.f1_hate + m.f1_nonhate) / 2
    shuffled = preds[:]
    rnd.shuffle(shuffled)
    assert compute_metrics(shuffled, golds) == m


def test_agrees_with_sklearn():
    rng = random.Random(5)
    y = [rng.randint(0, 1) for _ in range(40)]
    p = [rng.randint(0, 1) for _ in range(40)]
    m = compute_metrics([(str(i), v) for i, v in enumerate(p)], {str(i): v for i, v in enumerate(y)})
    assert m.accuracy == pytest.approx(accuracy_score(y, p))
    assert m.macro_f1 == pytest.approx(f1_score(y, p, average="macro"))
    assert m.precision_hate == pytest.approx(precision_score(y, p))
    assert m.recall_hate == pytest.approx(recall_score(y, p))


def test_failures_excluded_mode():
    preds = [Prediction("a", 0, 0.0, ("parse_failure",)), Prediction("b", 1), Prediction("c", 0)]
    golds = {"a": 1, "b": 1, "c": 0}
    default = compute_metrics(preds, golds)
    excluded = compute_metrics(preds, golds, exclude_failures=True)
    assert default.n_parse_failures == 1 and default.accuracy == pytest.approx(2 / 3)
    assert excluded.n_scored == 2 and excluded.accuracy == 1.0 and excluded.n_parse_failures == 1


class TestAggregate:
    def test_two_folds(self):
        ms = [MetricSet(0.7, 0, 0, 0, 0), MetricSet(0.8, 0, 0, 0, 0)]
        mean, std = aggregate_folds(ms)
        assert mean.accuracy == pytest.approx(0.75)
        assert std.accuracy == pytest.approx(math.sqrt(0.005), abs=1e-12)
        assert std.accuracy == pytest.approx(0.0707, abs=1e-4)

    def test_identical_folds_zero_std(self):
        m = MetricSet(0.61, 0.5, 0.4, 0.3, 0.2)
        assert aggregate_folds([m, m, m])[1].values() == {k: 0.0 for k in m.values()}

    def test_single_fold(self):
        m = MetricSet(0.61, 0.5, 0.4, 0.3, 0.2)
        mean, std = aggregate_folds([m])
        assert mean.values() == m.values() and std.accuracy == 0.0

    def test_empty(self):
        with pytest.raises(EvaluationError):
            aggregate_folds([])


class TestFolds:
    def test_ten_records(self):
        plan = make_folds([f"r{i}" for i in range(10)], 5, seed=11)
        tests = [set(plan.test_ids(f)) for f in range(5)]
        assert all(len(t) == 2 for t in tests)
        assert set().union(*tests) == set(plan.ids)

    def test_deterministic(self):
        ids = [f"r{i}" for i in range(37)]
        assert make_folds(ids, 5, 3) == make_folds(ids, 5, 3)
        assert make_folds(ids, 5, 3).assignments != make_folds(ids, 5, 4).assignments

    def test_103_records(self):
        plan = make_folds([f"r{i}" for i in range(103)], 5, seed=0)
        assert sorted((len(plan.test_ids(f)) for f in range(5)), reverse=True) == [21, 21, 21, 20, 20]

    def test_train_val_test_ratios(self):
        plan = make_folds([f"r{i}" for i in range(100)], 5, seed=0)
        for fold in plan.folds():
            assert (len(fold.train), len(fold.val), len(fold.test)) == (70, 10, 20)
            assert not (set(fold.train) & set(fold.val)) and not (set(fold.train) & set(fold.test))

    def test_too_few_records(self):
        with pytest.raises(EvaluationError):
            make_folds(["a", "b"], 5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(5, 500), st.integers(0, 2**31), st.integers(2, 5))
    def test_partition_property(self, n, seed, k):
        ids = [f"r{i}" for i in range(n)]
        plan = make_folds(ids, k, seed)
        tests = [plan.test_ids(f) for f in range(k)]
        for a, b in itertools.combinations(tests, 2):
            assert not set(a) & set(b)
        assert sorted(itertools.chain(*tests)) == sorted(ids)
        sizes = [len(t) for t in tests]
        assert max(sizes) - min(sizes) <= 1


def _report(name="", acc=(0.7, 0.8), condition=None):
    per_fold = [MetricSet(a, a - 0.01, a - 0.02, a - 0.03, a - 0.04, 0.1, 10, 1) for a in acc]
    mean, std = aggregate_folds(per_fold)
    return EvalReport(per_fold, mean, std, condition or {"strategy": "mars", "ablation": "none", "frames_n": 16},
                      name, 20)


class TestRender:
    def test_cell_format(self):
        assert format_cell(0.813, 0.014) == "81.3±0.014"

    def test_table_columns_and_cells(self):
        text = render_report([_report("Full")], "table")
        header = text.splitlines()[0]
        cols = [c.strip() for c in header.strip("|").split("|")]
        assert cols[1:6] == ["Acc", "MF1", "F1", "P", "R"]
        row = text.splitlines()[2]
        assert "Full" in row and "75.0±0.071" in row

    def test_two_conditions_keep_order(self):
        text = render_report([_report("b-first"), _report("a-second")], "table")
        rows = text.splitlines()[2:4]
        assert "b-first" in rows[0] and "a-second" in rows[1]

    def test_machine_round_trip(self):
        reports = [_report("x", (0.123456789, 0.987654321)), _report("y")]
        back = parse_machine_report(render_report(reports, "machine"))
        assert [r.to_dict() for r in back] == [r.to_dict() for r in reports]

    def test_evaluate_over_plan(self):
        ids = [f"r{i}" for i in range(10)]
        golds = {vid: i % 2 for i, vid in enumerate(ids)}
        preds = [Prediction(vid, golds[vid]) for vid in ids]
        report = evaluate(preds, golds, make_folds(ids, 5, 0), {"strategy": "simple"})
        assert len(report.per_fold) == 5 and report.mean.accuracy == 1.0 and report.dataset_size == 10


def test_predictions_file_round_trip(tmp_path, records):
    from marsvid.provider import MockProvider
    from marsvid.reasoner import StrategyConfig, run_manifest

    results = run_manifest(records, StrategyConfig(strategy="simple"), MockProvider())
    path = write_predictions(results, tmp_path / "p.jsonl")
    preds = read_predictions(path)
    assert [p.id for p in preds] == [r.video_id for r in results]
    assert all(set(json.loads(line)) == {"id", "y_pred", "conf_final", "flags", "status"}
               for line in path.read_text().splitlines())

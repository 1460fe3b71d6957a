import numpy as np
import pytest
from sklearn.base import clone

from marsvid.estimator import MarsClassifier, check_binary_labels, check_records
from marsvid.provider import MockProvider, MockScript
from conftest import decision_json, make_records


def test_params_round_trip():
    clf = MarsClassifier(strategy="cot", frames_n=8)
    params = clf.get_params()
    assert params["strategy"] == "cot" and params["frames_n"] == 8
    twin = clone(clf)
    assert twin.get_params()["strategy"] == "cot" and twin is not clf
    assert clf.set_params(ablation="no_objdesc").ablation == "no_objdesc"


def test_fit_predict_with_scripted_labels(frames_dir):
    records = make_records(4, frames_dir, ["Hate", "Non-Hate", "Hate", "Non-Hate"])
    script = MockScript()
    for rec, label in zip(records, ["hateful", "non-hateful", "non-hateful", "non-hateful"]):
        script.set(rec.id, "meta", decision_json(label))
    clf = MarsClassifier(provider=MockProvider(script), n_jobs=2).fit(records)
    assert list(clf.classes_) == [0, 1]
    assert clf.predict(records).tolist() == [1, 0, 0, 0]
    assert clf.score(records) == pytest.approx(0.75)
    assert clf.score(records, ["Hate", "Non-Hate", "Non-Hate", "Non-Hate"]) == 1.0


def test_predict_before_fit(records):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        MarsClassifier().predict(records)


def test_accepts_manifest_path_and_dicts(manifest_path, frames_dir):
    assert len(check_records(manifest_path)) == 10
    recs = check_records([{"id": "a", "frames_dir": str(frames_dir), "label": "Hate"}])
    assert recs[0].id == "a"


@pytest.mark.parametrize("bad", [42, "nope.jsonl"])
def test_rejects_bad_inputs(bad):
    with pytest.raises((TypeError, FileNotFoundError, ValueError)):
        check_records(bad)


def test_rejects_duplicate_ids(records):
    with pytest.raises(ValueError):
        check_records(records + records[:1])


def test_label_validation():
    assert check_binary_labels(["Hate", "Non-Hate", 1]).tolist() == [1, 0, 1]
    with pytest.raises(ValueError):
        check_binary_labels([0, 2])
    with pytest.raises(ValueError):
        check_binary_labels([0, 1], n=3)
    with pytest.raises(ValueError):
        check_binary_labels(np.zeros((2, 2)))


def test_fit_validates_label_length(records):
    with pytest.raises(ValueError):
        MarsClassifier().fit(records, [0, 1])

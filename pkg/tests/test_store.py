import json
import threading

import pytest
from hypothesis import given, strategies as st

from marsvid.store import RunKey, RunStore, StageRecord, StoreConflict, StoreIntegrityError


def key(**kw):
    base = dict(video_id="v1", strategy="mars", ablation="none", stage="meta", model_id="qwen/vl",
                prompt_version_hash="abc123", frames_n=16)
    base.update(kw)
    return RunKey(**base)


def record(k=None, raw='{"label": "hateful"}'):
    return StageRecord(key=k or key(), raw_response=raw, parsed={"y_pred": 1}, parse_flags=("extracted",))


@pytest.fixture
def store(tmp_path):
    return RunStore(tmp_path / "runs")


def test_put_get_round_trip(store):
    rec = record()
    store.put_record(rec)
    assert store.get_record(rec.key) == rec


def test_idempotent_put(store):
    rec = record()
    store.put_record(rec)
    store.put_record(StageRecord(rec.key, rec.raw_response, rec.parsed, rec.parse_flags))  # new timestamp
    assert len(list(store.root.rglob("meta.json"))) == 1
    assert len(store) == 1


def test_conflict_on_divergent_content(store):
    store.put_record(record())
    with pytest.raises(StoreConflict):
        store.put_record(record(raw='{"label": "no"}'))
    assert store.get_record(key()).raw_response == '{"label": "hateful"}'


def test_unknown_key(store):
    assert store.get_record(key()) is None


def test_prompt_hash_change_is_a_miss(store):
    store.put_record(record())
    assert store.get_record(key(prompt_version_hash="abc124")) is None


def test_truncated_file_is_integrity_error(store):
    path = store.put_record(record())
    path.write_text(path.read_text()[:20])
    with pytest.raises(StoreIntegrityError) as exc:
        store.get_record(key())
    assert str(path) in str(exc.value)


def test_key_mismatch_is_integrity_error(store):
    path = store.put_record(record())
    data = json.loads(path.read_text())
    data["key"]["stage"] = "objective"
    path.write_text(json.dumps(data))
    with pytest.raises(StoreIntegrityError):
        store.get_record(key())


def test_no_temp_files_left(store):
    store.put_record(record())
    assert not list(store.root.rglob(".tmp-*"))


def test_concurrent_same_key_writes_keep_one_version(store):
    errors, done = [], []

    def write(raw):
        try:
            store.put_record(record(raw=raw))
            done.append(raw)
        except StoreConflict:
            errors.append(raw)

    threads = [threading.Thread(target=write, args=(f"raw{i % 2}",)) for i in range(10)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    stored = store.get_record(key()).raw_response
    assert set(done) == {stored}
    assert all(e != stored for e in errors)


def test_index_lists_keys(store):
    keys = [key(video_id=f"v{i}") for i in range(3)]
    for k in keys:
        store.put_record(record(k))
    assert list(store.keys()) == keys


_field = st.text(min_size=1, max_size=12)


@given(_field, _field, _field, _field, st.integers(1, 64))
def test_key_encoding_injective(vid, stage, model, hash_, n):
    a = key(video_id=vid, stage=stage, model_id=model, prompt_version_hash=hash_, frames_n=n)
    assert RunKey.decode(a.encode()) == a
    b = key(video_id=vid + "|", stage=stage, model_id=model, prompt_version_hash=hash_, frames_n=n)
    assert a.encode() != b.encode() and a.relpath() != b.relpath()


def test_path_traversal_ids_stay_inside_root(store):
    k = key(video_id="..")
    assert store.root in store.path_for(k).parents
    k2 = key(video_id="../../etc")
    assert ".." not in k2.relpath().parts

import struct

import numpy as np
import pytest

from distillkit.teacherStore import (HEADER_BYTES, TeacherStore, import_tsv, lookup, read_store, store_size_bytes,
                                     write_store)
from utils.exceptions import DataError, FormatError, MissingIdError


def _entries(count, dim, seed=0):
    rng = np.random.default_rng(seed)
    return {f"spk{i % 7:03d}-utt{i:06d}": rng.standard_normal(dim).astype(np.float32) for i in range(count)}


def test_empty_store_is_header_only(tmp_path):
    path = tmp_path / "empty.emb1"
    write_store({}, 256, path)
    data = path.read_bytes()
    assert len(data) == HEADER_BYTES == 12
    assert data == b"EMB1" + struct.pack('<II', 256, 0)
    assert len(read_store(path)) == 0


def test_small_round_trip(tmp_path):
    entries = _entries(3, 4)
    path = tmp_path / "small.emb1"
    write_store(entries, 4, path)
    store = read_store(path)
    assert store.ids() == list(entries)
    for utt_id, vector in entries.items():
        assert store.lookup(utt_id).tobytes() == vector.tobytes()
        assert lookup(store, utt_id).tobytes() == vector.tobytes()
    assert path.stat().st_size == store_size_bytes(store)


def test_large_round_trip_and_size(tmp_path):
    entries = _entries(100000, 256, seed=1)
    path = tmp_path / "large.emb1"
    write_store(entries, 256, path)
    expected_size = 12 + sum(2 + len(utt_id.encode('utf-8')) + 4 + 4 * 256 for utt_id in entries)
    print(f"EMB1 file size: {path.stat().st_size} bytes")
    assert path.stat().st_size == expected_size
    store = read_store(path)
    assert len(store) == 100000
    for utt_id in list(entries)[::9973]:
        assert np.array_equal(store.lookup(utt_id), entries[utt_id])


def test_truncation_names_the_record(tmp_path):
    path = tmp_path / "store.emb1"
    write_store(_entries(3, 8), 8, path)
    truncated = tmp_path / "truncated.emb1"
    truncated.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(FormatError) as error:
        read_store(truncated)
    print(f"Truncation error: {error.value.message}")
    assert error.value.record_index == 2
    assert "record 2" in error.value.message


def test_dim_mismatch(tmp_path):
    payload = b"EMB1" + struct.pack('<II', 4, 1) + struct.pack('<H', 1) + b"a" + struct.pack('<I', 3)
    payload += np.zeros(3, dtype='<f4').tobytes()
    path = tmp_path / "dim.emb1"
    path.write_bytes(payload)
    with pytest.raises(FormatError) as error:
        read_store(path)
    assert error.value.record_index == 0
    assert error.value.offset == 12 + 2 + 1


def test_nan_and_bad_magic(tmp_path):
    vector = np.zeros(4, dtype='<f4')
    vector[2] = np.nan
    payload = b"EMB1" + struct.pack('<II', 4, 1) + struct.pack('<H', 1) + b"a" + struct.pack('<I', 4) + vector.tobytes()
    path = tmp_path / "nan.emb1"
    path.write_bytes(payload)
    with pytest.raises(FormatError) as error:
        read_store(path)
    assert error.value.offset == 12 + 2 + 1 + 4 + 8

    path.write_bytes(b"FTR1" + payload[4:])
    with pytest.raises(FormatError) as error:
        read_store(path)
    assert error.value.offset == 0


def test_duplicate_id_in_file(tmp_path):
    record = struct.pack('<H', 1) + b"a" + struct.pack('<I', 2) + np.ones(2, dtype='<f4').tobytes()
    path = tmp_path / "dup.emb1"
    path.write_bytes(b"EMB1" + struct.pack('<II', 2, 2) + record + record)
    with pytest.raises(FormatError) as error:
        read_store(path)
    assert error.value.record_index == 1


def test_missing_id_is_a_key_error():
    store = TeacherStore(2, {"a": [1.0, 0.0]})
    with pytest.raises(MissingIdError) as error:
        store.lookup("b")
    assert isinstance(error.value, KeyError)
    assert isinstance(error.value, DataError)
    assert error.value.missing_ids == ["b"]
    assert "b" not in store and "a" in store


def test_utf8_ids(tmp_path):
    entries = {"sprecher-ü/äußerung": np.ones(3, dtype=np.float32), "说话人-1": np.zeros(3, dtype=np.float32) + 2}
    path = tmp_path / "utf8.emb1"
    write_store(entries, 3, path)
    store = read_store(path)
    assert store.ids() == list(entries)
    assert path.stat().st_size == store_size_bytes(store)


def test_store_validation():
    store = TeacherStore(3)
    store.add("a", [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        store.add("a", [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        store.add("b", [1.0, 2.0])
    with pytest.raises(DataError):
        store.add("c", [1.0, np.inf, 0.0])
    with pytest.raises(DataError):
        store.add("", [1.0, 2.0, 3.0])
    with pytest.raises(DataError):
        write_store(store, 4, "unused.emb1")


def test_import_tsv(tmp_path):
    tsv = tmp_path / "embeddings.tsv"
    tsv.write_text("utt1\t1.0,2.0,3.0\n\nutt2\t-1,0.5,2e-3\n", encoding='utf-8')
    store = import_tsv(tsv)
    assert store.dim == 3
    assert store.ids() == ["utt1", "utt2"]
    assert np.allclose(store.lookup("utt2"), [-1.0, 0.5, 0.002])

    tsv.write_text("utt1\t1.0,2.0\nutt2\t1.0,2.0,3.0\n", encoding='utf-8')
    with pytest.raises(DataError) as error:
        import_tsv(tsv)
    assert ":2:" in error.value.message

    tsv.write_text("utt1\t1.0,abc\n", encoding='utf-8')
    with pytest.raises(DataError):
        import_tsv(tsv)

    tsv.write_text("\n", encoding='utf-8')
    with pytest.raises(DataError):
        import_tsv(tsv)

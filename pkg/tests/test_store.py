import numpy as np
import pytest
from conftest import random_store
from hypothesis import given, settings
from hypothesis import strategies as st

from dpe.store import (FeatureStore, FormatError, StoreError, class_index, from_bytes, group_index, load_store,
                       save_store, to_bytes)


def test_binary_round_trip_is_bit_exact(gen, tmp_path):
    s = random_store(gen, n_groups=5)
    save_store(s, tmp_path / "s.dpef")
    back = load_store(tmp_path / "s.dpef")
    assert back == s
    assert to_bytes(back) == to_bytes(s)


def test_csv_round_trip(gen, tmp_path):
    s = random_store(gen, n_groups=4)
    save_store(s, tmp_path / "s.csv")
    assert load_store(tmp_path / "s.csv") == s


def test_csv_without_groups(gen, tmp_path):
    s = random_store(gen)
    save_store(s, tmp_path / "s.csv")
    back = load_store(tmp_path / "s.csv")
    assert not back.has_groups and back == s


def test_features_quantized_to_float32():
    s = FeatureStore(np.array([[0.1, 1 / 3], [2.0, 3.0]]), [0, 1])
    assert np.array_equal(s.features, np.float32([[0.1, 1 / 3], [2.0, 3.0]]).astype(np.float64))


def test_store_is_read_only(gen):
    s = random_store(gen)
    with pytest.raises(ValueError):
        s.features[0, 0] = 1.0


@pytest.mark.parametrize("feats,labels,msg", [
    (np.ones((3, 2)), [0, 0, 0], "at least 2 classes"),
    (np.ones((3, 2)), [0, 2, 2], "no samples for class 1"),
    (np.array([[np.nan, 1.0], [1.0, 1.0]]), [0, 1], "non-finite"),
    (np.ones((3, 2)), [0, 1], "labels"),
    (np.ones((3, 2)), [0, 1, -1], "out of range"),
])
def test_invariants(feats, labels, msg):
    with pytest.raises(StoreError, match=msg):
        FeatureStore(feats, labels)


def test_group_out_of_range():
    with pytest.raises(StoreError, match="group label"):
        FeatureStore(np.ones((2, 2)), [0, 1], [0, 3], n_groups=2)


def test_class_and_group_index(gen):
    s = random_store(gen, n=30, k=3, n_groups=6)
    ci, gi = class_index(s), group_index(s)
    assert sorted(np.concatenate(list(ci.values()))) == list(range(30))
    for c, idx in ci.items():
        assert np.all(s.labels[idx] == c)
    for g, idx in gi.items():
        assert np.all(s.groups[idx] == g)


def test_truncated_file_reports_offset(gen):
    data = to_bytes(random_store(gen))
    with pytest.raises(FormatError, match="offset"):
        from_bytes(data[:-3])


def test_bad_magic(gen):
    data = bytearray(to_bytes(random_store(gen)))
    data[0:4] = b"XXXX"
    with pytest.raises(FormatError, match="magic"):
        from_bytes(bytes(data))


def test_nonfinite_feature_reports_offset(gen):
    s = random_store(gen, n=5, dim=2, k=2)
    data = bytearray(to_bytes(s))
    off = 32 + 4 * 3
    data[off:off + 4] = np.float32(np.inf).tobytes()
    with pytest.raises(FormatError, match=f"offset {off}"):
        from_bytes(bytes(data))


def test_label_out_of_range_in_file(gen):
    s = random_store(gen, n=5, dim=2, k=2)
    data = bytearray(to_bytes(s))
    off = 32 + 5 * 2 * 4 + 4
    data[off:off + 4] = np.int32(7).tobytes()
    with pytest.raises(FormatError, match="class label 7"):
        from_bytes(bytes(data))


def test_csv_errors_name_line(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("f0,f1,label\n1,2,0\n1,x,1\n")
    with pytest.raises(FormatError, match="line 3"):
        load_store(p)
    p.write_text("a,b\n")
    with pytest.raises(FormatError, match="line 1"):
        load_store(p)


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 5), st.integers(0, 2**32 - 1), st.booleans())
def test_round_trip_property(k, dim, seed, with_groups):
    g = np.random.default_rng(seed)
    s = random_store(g, n=k + 5, dim=dim, k=k, n_groups=3 if with_groups else None)
    assert from_bytes(to_bytes(s)) == s

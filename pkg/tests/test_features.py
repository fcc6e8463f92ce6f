import json
import struct
import tempfile
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from deepseek.errors import DataError, FormatError, IntegrityError
from deepseek.features import (
    HashedTextFeaturizer,
    fnv1a64,
    read_caption_file,
    read_feature_file,
    read_jsonl_features,
    tokenize,
    write_feature_file,
    write_jsonl_features,
)


def reference_fnv1a64(data: bytes) -> int:
    """Independent FNV-1a oracle, written from the published constants."""
    value = 14695981039346656037
    for b in data:
        value = ((value ^ b) * 1099511628211) % 2**64
    return value


class TestTokenize:
    def test_basic(self):
        assert tokenize("A dog, in the Park!") == ["a", "dog", "in", "the", "park"]

    def test_pure_punctuation_tokens_vanish(self):
        assert tokenize("--- !!! dog") == ["dog"]

    def test_unicode_whitespace(self):
        assert tokenize("dog park\tcat") == ["dog", "park", "cat"]


class TestFeaturizer:
    def test_empty_text_is_zero_vector(self):
        f = HashedTextFeaturizer(dim=16)
        np.testing.assert_array_equal(f.featurize(""), np.zeros(16))

    def test_deterministic(self):
        f = HashedTextFeaturizer(dim=64)
        a = f.featurize("a small dog in the park")
        b = f.featurize("a small dog in the park")
        np.testing.assert_array_equal(a, b)

    def test_dog_park_buckets_match_fnv_oracle(self):
        dim = 64
        f = HashedTextFeaturizer(dim=dim, ngram_max=2)
        got = f.featurize("dog park")

        expected = np.zeros(dim)
        for gram in (b"dog", b"park", b"dog\x1fpark"):
            h = reference_fnv1a64(gram)
            expected[h % dim] += -1.0 if h >> 63 else 1.0
        expected /= np.linalg.norm(expected)
        np.testing.assert_allclose(got, expected, atol=1e-12)
        assert np.count_nonzero(got) == 3  # no collisions for this input

    def test_fnv_implementation_matches_oracle(self):
        for data in (b"", b"a", b"dog", "pärk".encode("utf-8"), bytes(range(256))):
            assert fnv1a64(data) == reference_fnv1a64(data)

    def test_ngram_max_one_ignores_bigrams(self):
        uni = HashedTextFeaturizer(dim=64, ngram_max=1)
        assert np.count_nonzero(uni.featurize("dog park")) == 2

    def test_bad_dim_rejected(self):
        with pytest.raises(DataError):
            HashedTextFeaturizer(dim=0)

    @settings(max_examples=50)
    @given(st.text(alphabet=st.characters(codec="utf-8"), max_size=60))
    def test_nonempty_tokenizations_are_unit_norm(self, text):
        f = HashedTextFeaturizer(dim=32)
        vec = f.featurize(text)
        if tokenize(text):
            assert np.linalg.norm(vec) == pytest.approx(1.0, abs=1e-9)
        else:
            np.testing.assert_array_equal(vec, np.zeros(32))

    @settings(max_examples=50)
    @given(st.text(alphabet=st.sampled_from("aBc d\tE"), max_size=40))
    def test_case_and_outer_whitespace_invariance(self, text):
        f = HashedTextFeaturizer(dim=32)
        np.testing.assert_array_equal(f.featurize(text), f.featurize(text.upper()))
        np.testing.assert_array_equal(f.featurize(text), f.featurize(f"  {text}\n"))


class TestFeatureFile:
    def test_empty_file_is_header_only(self, tmp_path):
        path = tmp_path / "empty.dskf"
        write_feature_file(path, [], dim=8)
        raw = path.read_bytes()
        assert len(raw) == 20
        assert raw[:4] == b"DSKF"
        assert struct.unpack_from("<IIQ", raw, 4) == (1, 8, 0)
        assert read_feature_file(path) == []

    def test_single_record_length(self, tmp_path):
        path = tmp_path / "one.dskf"
        write_feature_file(path, [("a", np.array([1.0, -1.0]))])
        assert len(path.read_bytes()) == 20 + 2 + 1 + 8

    def test_round_trip_bit_exact(self, tmp_path):
        path = tmp_path / "feat.dskf"
        records = [
            ("img-1", np.array([0.25, -3.5, 1e-8])),
            ("img-2", np.array([1.0, 2.0, 3.0])),
            ("ünïcode", np.array([0.0, -0.0, 7.25])),
        ]
        write_feature_file(path, records)
        loaded = read_feature_file(path)
        assert [rid for rid, _ in loaded] == [rid for rid, _ in records]
        for (_, orig), (_, back) in zip(records, loaded):
            np.testing.assert_array_equal(back, orig.astype(np.float32).astype(np.float64))
        # writing what we read reproduces the bytes
        second = tmp_path / "feat2.dskf"
        write_feature_file(second, loaded)
        assert second.read_bytes() == path.read_bytes()

    def test_truncated_file_names_byte_offset(self, tmp_path):
        path = tmp_path / "feat.dskf"
        write_feature_file(path, [("a", np.arange(4.0)), ("b", np.arange(4.0))])
        clipped = tmp_path / "clipped.dskf"
        clipped.write_bytes(path.read_bytes()[:-5])
        with pytest.raises(IntegrityError, match=r"byte \d+"):
            read_feature_file(clipped)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.dskf"
        path.write_bytes(b"NOPE" + bytes(16))
        with pytest.raises(FormatError):
            read_feature_file(path)

    def test_bad_version(self, tmp_path):
        path = tmp_path / "bad.dskf"
        path.write_bytes(b"DSKF" + struct.pack("<IIQ", 9, 2, 0))
        with pytest.raises(FormatError):
            read_feature_file(path)

    def test_duplicate_ids_rejected_before_write(self, tmp_path):
        path = tmp_path / "dup.dskf"
        with pytest.raises(IntegrityError):
            write_feature_file(path, [("a", np.zeros(2)), ("a", np.ones(2))])
        assert not path.exists()

    def test_mixed_dims_rejected(self, tmp_path):
        with pytest.raises(IntegrityError):
            write_feature_file(tmp_path / "mix.dskf", [("a", np.zeros(2)), ("b", np.zeros(3))])

    @settings(max_examples=25)
    @given(records=st.lists(
        st.tuples(st.text(min_size=1, max_size=12),
                  st.lists(st.floats(-1e6, 1e6), min_size=3, max_size=3)),
        max_size=8, unique_by=lambda r: r[0],
    ))
    def test_round_trip_identity_property(self, records):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "prop.dskf"
            write_feature_file(path, [(rid, np.array(v)) for rid, v in records], dim=3)
            loaded = read_feature_file(path)
        assert [rid for rid, _ in loaded] == [rid for rid, _ in records]
        for (_, orig), (_, back) in zip(records, loaded):
            np.testing.assert_array_equal(
                back, np.array(orig, dtype=np.float32).astype(np.float64)
            )


class TestJsonlFeatures:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "feat.jsonl"
        records = [("x", np.array([1.5, 2.5])), ("y", np.array([0.0, -1.0]))]
        write_jsonl_features(path, records)
        loaded = read_jsonl_features(path)
        assert [r[0] for r in loaded] == ["x", "y"]
        np.testing.assert_array_equal(loaded[0][1], [1.5, 2.5])

    def test_dim_enforced_after_first_line(self, tmp_path):
        path = tmp_path / "feat.jsonl"
        path.write_text('{"id": "a", "v": [1, 2]}\n{"id": "b", "v": [1]}\n')
        with pytest.raises(IntegrityError, match="line 2"):
            read_jsonl_features(path)

    def test_invalid_json_is_format_error(self, tmp_path):
        path = tmp_path / "feat.jsonl"
        path.write_text("not json\n")
        with pytest.raises(FormatError):
            read_jsonl_features(path)


class TestCaptionFile:
    def test_round_trip_order_preserved(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text(
            json.dumps({"id": "i1", "captions": ["a dog", "a park"]}) + "\n"
            + json.dumps({"id": "i2", "captions": ["the sea"]}) + "\n"
        )
        loaded = read_caption_file(path)
        assert loaded == [("i1", ["a dog", "a park"]), ("i2", ["the sea"])]

    def test_duplicate_id_rejected(self, tmp_path):
        path = tmp_path / "caps.jsonl"
        path.write_text(
            json.dumps({"id": "i1", "captions": ["x"]}) + "\n"
            + json.dumps({"id": "i1", "captions": ["y"]}) + "\n"
        )
        with pytest.raises(IntegrityError):
            read_caption_file(path)

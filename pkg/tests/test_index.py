import io
import math
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hybridrec.errors import (
    BadMagicError,
    ChecksumError,
    DimensionMismatchError,
    EmptyIndexError,
    NonFiniteEmbeddingError,
    TruncatedIndexError,
    UnsupportedVersionError,
)
from hybridrec.index import CentroidIndex, IndexBuilder, build_index, read_build_jsonl

from conftest import build, random_samples
from oracles import argmax_label, class_means, processed_centroids

SQ = math.sqrt(2) / 2


# --- accumulate -------------------------------------------------------------

def test_mean_of_two_samples():
    idx = IndexBuilder().add("a", "animal", [2, 0]).add("a", "animal", [0, 2]).add("b", "plant", [5, 5]).finalize()
    assert idx.centroid("a").raw_centroid.tolist() == [1.0, 1.0]
    assert idx.centroid("a").sample_count == 2


def test_mean_of_one_sample():
    idx = IndexBuilder().add("a", "animal", [3, 4]).add("b", "animal", [0, 0]).finalize()
    assert idx.centroid("a").raw_centroid.tolist() == [3.0, 4.0]


def test_centroids_match_bruteforce_mean(rng):
    samples = random_samples(rng, 5, 10, 16)
    idx = build(samples)
    expected = class_means((l, v) for l, _, v in samples)
    for label, mean in expected.items():
        got = idx.centroid(label).raw_centroid
        np.testing.assert_allclose(got, mean, rtol=1e-9, atol=0)


def test_accumulate_rejects_dimension_mismatch():
    b = IndexBuilder().add("a", "animal", [1, 2, 3])
    with pytest.raises(DimensionMismatchError):
        b.add("b", "animal", [1, 2])


@pytest.mark.parametrize("bad", [[1.0, float("nan")], [float("inf"), 0.0]])
def test_accumulate_rejects_non_finite(bad):
    with pytest.raises(NonFiniteEmbeddingError):
        IndexBuilder().add("a", "animal", bad)


def test_accumulate_rejects_conflicting_category():
    b = IndexBuilder().add("a", "animal", [1, 2])
    with pytest.raises(ValueError):
        b.add("a", "plant", [1, 2])


def test_accumulate_rejects_other_category():
    with pytest.raises(ValueError):
        IndexBuilder().add("a", "other", [1, 2])


def test_builder_sets_dim_from_first_sample():
    b = IndexBuilder()
    assert b.dim is None
    b.add("a", "plant", [1, 2, 3])
    assert b.dim == 3


# --- finalize ---------------------------------------------------------------

def test_finalize_empty_builder():
    with pytest.raises(EmptyIndexError):
        IndexBuilder().finalize()


def test_single_class_is_degenerate():
    idx = IndexBuilder().add("only", "animal", [1, 2, 3]).finalize()
    assert idx.centroid("only").degenerate
    assert not idx.processed_vector("only").any()
    m = idx.search([4, 5, 6])
    assert m.degenerate and m.similarity == -1.0 and m.label is None


def test_two_class_hand_example():
    idx = IndexBuilder().add("x", "animal", [1, 0]).add("y", "plant", [0, 1]).finalize()
    np.testing.assert_allclose(idx.global_mean, [0.5, 0.5], atol=1e-12)
    np.testing.assert_allclose(idx.processed_vector("x"), [SQ, -SQ], atol=1e-9)
    np.testing.assert_allclose(idx.processed_vector("y"), [-SQ, SQ], atol=1e-9)


def test_global_mean_weights_classes_equally():
    # class a has 3 samples, b has 1: mean of centroids, not of samples
    b = IndexBuilder()
    for _ in range(3):
        b.add("a", "animal", [2, 0])
    b.add("b", "animal", [0, 2])
    np.testing.assert_allclose(b.finalize().global_mean, [1, 1], rtol=1e-12)


def test_shift_leaves_processed_unchanged(rng):
    samples = random_samples(rng, 6, 4, 8)
    shift = rng.normal(size=8) * 50
    a = build(samples)
    b = build([(l, c, v + shift) for l, c, v in samples])
    np.testing.assert_allclose(a.processed, b.processed, atol=1e-9)


def test_labels_sorted():
    idx = IndexBuilder().add("zebra", "animal", [1, 0]).add("Aster", "plant", [0, 1]).add("moss", "plant", [1, 1]).finalize()
    assert idx.labels == ("Aster", "moss", "zebra")


def test_processed_unit_norm(rng):
    idx = build(random_samples(rng, 30, 3, 12))
    norms = np.linalg.norm(idx.processed, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-6)


# --- preprocess_query -------------------------------------------------------

def test_query_equal_to_raw_centroid_is_bit_identical(rng):
    idx = build(random_samples(rng, 7, 3, 10))
    for label in idx.labels:
        pq = idx.preprocess_query(idx.centroid(label).raw_centroid)
        assert not pq.degenerate
        assert np.array_equal(pq.vector, idx.processed_vector(label))


def test_query_at_global_mean_is_degenerate(rng):
    idx = build(random_samples(rng, 4, 2, 5))
    assert idx.preprocess_query(idx.global_mean).degenerate
    assert idx.search(idx.global_mean).degenerate


def test_preprocess_matches_oracle(rng):
    idx = build(random_samples(rng, 5, 3, 9))
    for _ in range(20):
        q = rng.normal(size=9) * 4
        d = q - idx.global_mean
        expected = d / math.sqrt(math.fsum(d * d))
        np.testing.assert_allclose(idx.preprocess_query(q).vector, expected, atol=1e-9)


def test_preprocess_dimension_mismatch(rng):
    idx = build(random_samples(rng, 3, 1, 4))
    with pytest.raises(DimensionMismatchError):
        idx.preprocess_query([1, 2, 3])


# --- search -------------------------------------------------------------------

def test_self_retrieval(rng):
    idx = build(random_samples(rng, 12, 5, 16))
    for label in idx.labels:
        m = idx.search(idx.centroid(label).raw_centroid)
        assert m.label == label
        assert m.similarity == pytest.approx(1.0, abs=1e-6)
        assert m.category == idx.centroid(label).category


def test_tie_goes_to_smallest_label():
    # b and a have the same direction from the mean for this query
    b = IndexBuilder()
    b.add("b", "animal", [1, 0]).add("a", "animal", [1, 0]).add("c", "plant", [-2, 0])
    idx = b.finalize()
    m = idx.search([5, 0])
    assert m.label == "a"


def test_search_matches_bruteforce_oracle(rng):
    samples = random_samples(rng, 200, 2, 32)
    idx = build(samples)
    labels, gm, proc = processed_centroids((l, v) for l, _, v in samples)
    for _ in range(300):
        q = rng.normal(size=32) * 3
        assert idx.search(q).label == argmax_label(labels, gm, proc, q)


def test_degenerate_classes_are_skipped():
    # two identical centroids on the global mean's position: a & b are degenerate
    b = IndexBuilder().add("a", "animal", [0, 0]).add("b", "animal", [1, 0]).add("c", "animal", [-1, 0])
    idx = b.finalize()
    assert idx.centroid("a").degenerate
    assert idx.search([0.1, 5]).label in ("b", "c")


def test_search_batch_equals_search(rng):
    idx = build(random_samples(rng, 20, 2, 8))
    qs = rng.normal(size=(15, 8))
    assert idx.search_batch(qs) == [idx.search(q) for q in qs]


def test_index_arrays_are_read_only(rng):
    idx = build(random_samples(rng, 3, 1, 4))
    with pytest.raises(ValueError):
        idx.processed[0, 0] = 1.0


# --- persistence ----------------------------------------------------------------

def test_round_trip_bit_identical(rng):
    idx = build(random_samples(rng, 25, 3, 12))
    blob = idx.to_bytes()
    loaded = CentroidIndex.from_bytes(blob)
    q = idx.quantized()
    assert loaded.labels == idx.labels
    assert loaded.categories == idx.categories
    assert loaded.sample_counts == idx.sample_counts
    for name in ("raw", "processed", "global_mean", "degenerate"):
        assert np.array_equal(getattr(loaded, name), getattr(q, name))
    assert loaded.to_bytes() == blob


def test_save_and_load_paths(tmp_path, rng):
    idx = build(random_samples(rng, 4, 2, 6))
    path = tmp_path / "x.hymx"
    idx.save(path)
    assert CentroidIndex.load(path).to_bytes() == idx.to_bytes()
    buf = io.BytesIO()
    idx.save(buf)
    buf.seek(0)
    assert CentroidIndex.load(buf).labels == idx.labels


def test_file_layout_is_as_documented():
    idx = IndexBuilder().add("b", "plant", [1, 0]).add("a", "animal", [0, 1]).finalize()
    blob = idx.to_bytes()
    magic, version, dim, count = struct.unpack_from("<4sIII", blob)
    assert (magic, version, dim, count) == (b"HYMX", 1, 2, 2)
    off = 16 + 2 * 4
    (n,) = struct.unpack_from("<H", blob, off)
    assert blob[off + 2: off + 2 + n] == b"a"
    cat, count_a, flag = struct.unpack_from("<BIB", blob, off + 2 + n)
    assert (cat, count_a, flag) == (0, 1, 0)
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def _reseal(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload))


def test_bad_magic(rng):
    blob = bytearray(build(random_samples(rng, 3, 1, 4)).to_bytes())
    blob[0:4] = b"NOPE"
    with pytest.raises(BadMagicError):
        CentroidIndex.from_bytes(bytes(blob))


def test_unsupported_version(rng):
    blob = bytearray(build(random_samples(rng, 3, 1, 4)).to_bytes()[:-4])
    blob[4:8] = struct.pack("<I", 99)
    with pytest.raises(UnsupportedVersionError):
        CentroidIndex.from_bytes(_reseal(bytes(blob)))


def test_declared_count_exceeds_records():
    b = IndexBuilder()
    for i in range(9):
        b.add(f"c{i}", "animal", [i, i * i])
    blob = bytearray(b.finalize().to_bytes()[:-4])
    blob[12:16] = struct.pack("<I", 10)
    with pytest.raises(TruncatedIndexError):
        CentroidIndex.from_bytes(_reseal(bytes(blob)))


def test_truncated_file(rng):
    blob = build(random_samples(rng, 3, 1, 4)).to_bytes()
    for cut in (0, 2, 10, 20, len(blob) - 7):
        with pytest.raises(TruncatedIndexError):
            CentroidIndex.from_bytes(blob[:cut])


def test_checksum_mismatch(rng):
    blob = bytearray(build(random_samples(rng, 3, 1, 4)).to_bytes())
    blob[-10] ^= 0x01
    with pytest.raises(ChecksumError):
        CentroidIndex.from_bytes(bytes(blob))


def test_build_jsonl(tmp_path):
    p = tmp_path / "emb.jsonl"
    p.write_text(
        '{"label": "a", "category": "animal", "embedding": [1, 0]}\n'
        '{"label": "b", "category": "plant", "embedding": [0, 1]}\n'
    )
    idx = build_index(read_build_jsonl(p))
    assert idx.labels == ("a", "b")


def test_build_jsonl_reports_line(tmp_path):
    from hybridrec.errors import ManifestError

    p = tmp_path / "emb.jsonl"
    p.write_text('{"label": "a", "category": "animal", "embedding": [1, 0]}\n{"label": "b"}\n')
    with pytest.raises(ManifestError, match=":2"):
        list(read_build_jsonl(p))


# --- properties -------------------------------------------------------------------

finite = st.floats(min_value=-100, max_value=100, allow_nan=False, allow_infinity=False)


@st.composite
def build_sets(draw, dim=4):
    n_classes = draw(st.integers(2, 6))
    samples = []
    for k in range(n_classes):
        for _ in range(draw(st.integers(1, 3))):
            samples.append((f"L{k}", "animal" if k % 2 else "plant",
                            np.array(draw(st.lists(finite, min_size=dim, max_size=dim)))))
    return samples


@settings(max_examples=60, deadline=None)
@given(build_sets(), st.permutations(range(18)))
def test_order_independence(samples, perm):
    order = [i for i in perm if i < len(samples)] + list(range(18, len(samples)))
    a = build(samples)
    b = build([samples[i] for i in order])
    assert a.to_bytes() == b.to_bytes()
    assert np.array_equal(a.raw, b.raw) and np.array_equal(a.processed, b.processed)


@settings(max_examples=60, deadline=None)
@given(build_sets(), st.lists(finite, min_size=4, max_size=4), st.floats(0.01, 100))
def test_scale_about_mean_preserves_label(samples, q, s):
    idx = build(samples)
    q = np.array(q)
    base = idx.search(q)
    scaled = idx.search(idx.global_mean + s * (q - idx.global_mean))
    if base.degenerate:
        return
    assert scaled.label == base.label or abs(scaled.similarity - base.similarity) < 1e-9


@settings(max_examples=60, deadline=None)
@given(build_sets(), st.lists(finite, min_size=4, max_size=4))
def test_similarities_bounded(samples, q):
    idx = build(samples)
    m = idx.search(np.array(q))
    assert -1 - 1e-6 <= m.similarity <= 1 + 1e-6

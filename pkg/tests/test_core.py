import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spi._binary import Reader, Writer
from spi._topk import topk
from spi.exceptions import ChecksumError, DimensionMismatchError, FormatError


def naive_topk(scores, ids, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], ids[i]))[:k]
    return [ids[i] for i in order], [scores[i] for i in order]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(-3, 3), min_size=0, max_size=40), st.integers(1, 50), st.randoms())
def test_topk_matches_sorted_oracle_with_ties(values, k, rnd):
    scores = [v / 2 for v in values]
    ids = list(range(len(scores)))
    rnd.shuffle(ids)
    got_ids, got_scores = topk(np.array(scores), np.array(ids, dtype=np.int64), k)
    want_ids, want_scores = naive_topk(scores, ids, k)
    assert got_ids.tolist() == want_ids
    assert got_scores.tolist() == want_scores


def test_topk_breaks_ties_by_ascending_id():
    ids, scores = topk(np.array([0.5, 0.9, 0.9, 0.5]), np.array([7, 9, 3, 1]), 3)
    assert ids.tolist() == [3, 9, 1]
    assert scores.tolist() == [0.9, 0.9, 0.5]


def test_topk_k_zero_and_empty():
    assert topk(np.array([1.0]), np.array([0]), 0)[0].size == 0
    assert topk(np.array([]), np.array([], dtype=np.int64), 3)[0].size == 0


def _blob():
    w = Writer(b"TEST", 1)
    w.pack("IH", 7, 3)
    w.array(np.arange(6, dtype=np.float32).reshape(2, 3), "f4")
    w.raw(b"xyz")
    return w.getvalue()


def test_writer_reader_round_trip():
    r = Reader(_blob(), b"TEST")
    assert r.version == 1
    assert r.unpack("IH") == (7, 3)
    np.testing.assert_array_equal(r.array("f4", (2, 3)), np.arange(6).reshape(2, 3))
    assert r.raw(3) == b"xyz"
    r.done()


def test_trailer_is_crc32_of_body():
    blob = _blob()
    assert int.from_bytes(blob[-4:], "little") == zlib.crc32(blob[:-4])


def test_corruption_is_detected_everywhere():
    blob = _blob()
    for pos in range(len(blob) - 4):
        bad = bytearray(blob)
        bad[pos] ^= 0x01
        with pytest.raises(ChecksumError):
            Reader(bytes(bad), b"TEST")


def test_wrong_magic_version_and_trailing_bytes():
    blob = _blob()
    with pytest.raises(FormatError):
        Reader(blob, b"NOPE")
    with pytest.raises(FormatError):
        Reader(blob, b"TEST", versions=(2,))
    r = Reader(blob, b"TEST")
    r.unpack("IH")
    with pytest.raises(FormatError):
        r.done()
    with pytest.raises(FormatError):
        Reader(b"ab", b"TEST")


def test_truncated_reads_raise():
    r = Reader(_blob(), b"TEST")
    with pytest.raises(FormatError):
        r.array("f8", (100,))


def test_dimension_mismatch_message_names_both_sizes():
    err = DimensionMismatchError("query", 64, 32)
    assert "64" in str(err) and "32" in str(err)

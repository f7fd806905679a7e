import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nezha.codec import (CodecRangeError, Radices, VocabularySet, decode, decode_array,
                         encode, encode_array, encode_prefix, verify_batch)

R512 = (512, 512, 512)


def test_worked_example():
    assert encode((243, 129, 3), R512) == 852723
    assert decode(852723, R512) == (243, 129, 3)


@pytest.mark.parametrize("sid,expected", [((0, 0, 0), 0), ((0, 1, 0), 512), ((1, 0, 0), 1)])
def test_positional_multipliers(sid, expected):
    assert encode(sid, R512) == expected


def test_decode_small_indices():
    assert decode(0, (7, 3)) == (0, 0)
    assert decode(1, (7, 3)) == (1, 0)


def test_out_of_range_token_names_position():
    with pytest.raises(CodecRangeError, match="position 2"):
        encode((1, 600, 0), R512)


def test_decode_out_of_range():
    with pytest.raises(CodecRangeError):
        decode(512**3, R512)


def test_overflow_rejected():
    with pytest.raises(OverflowError):
        Radices((2**32, 2**32, 2))


def test_invalid_radices():
    with pytest.raises(ValueError):
        Radices(())
    with pytest.raises(ValueError):
        Radices((4, 0))


def test_prefix_encoding_matches_full_encoding():
    assert encode_prefix((5, 7), R512) == encode((5, 7, 0), R512)


def test_exhaustive_injectivity():
    r = (16, 8, 32)  # product 4096
    seen = {encode(sid, r) for sid in itertools.product(*(range(t) for t in r))}
    assert seen == set(range(16 * 8 * 32))


radix_tuples = st.lists(st.integers(2, 1024), min_size=1, max_size=4)


@settings(max_examples=25, deadline=None)
@given(radix_tuples, st.integers(0, 2**32))
def test_round_trip_1000_samples(radices, seed):
    rng = np.random.default_rng(seed)
    ids = np.column_stack([rng.integers(0, t, size=1000) for t in radices])
    enc = encode_array(ids, radices)
    np.testing.assert_array_equal(decode_array(enc, radices), ids)
    for row, e in zip(ids[:20], enc[:20]):
        assert encode(tuple(row), radices) == int(e)
        assert decode(int(e), radices) == tuple(int(t) for t in row)


def test_verify_batch_examples():
    v = VocabularySet.from_indices([0, 5, 852723], R512)
    cands = [((243, 129, 3), -0.1), ((7, 0, 0), -0.2)]
    assert verify_batch(cands, v) == [((243, 129, 3), -0.1)]
    assert verify_batch([], v) == []
    keep = [((0, 0, 0), -1.0), ((5, 0, 0), -2.0)]
    assert verify_batch(keep, v) == keep


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 7), st.integers(0, 7)), max_size=30),
       st.sets(st.integers(0, 63), max_size=40))
def test_verify_batch_subset_and_idempotent(cands, members):
    r = (8, 8)
    v = VocabularySet.from_indices(members, r)
    scored = [(c, -float(i)) for i, c in enumerate(cands)]
    out = verify_batch(scored, v)
    assert all(encode(c, r) in v for c, _ in out)
    assert [x for x in scored if encode(x[0], r) in members] == out
    assert verify_batch(out, v) == out


def test_vocabulary_file_round_trip(tmp_path):
    v = VocabularySet.from_ids([(1, 2, 3), (0, 0, 0)], R512)
    path = tmp_path / "vocab.txt"
    v.save(path)
    w = VocabularySet.load(path)
    assert w.members == v.members and w.radices == v.radices
    assert (1, 2, 3) in [decode(i, R512) for i in w.members]


def test_vocabulary_file_comments(tmp_path):
    path = tmp_path / "v.txt"
    path.write_text("# a comment\n5\n\n852723\n")
    w = VocabularySet.load(path, R512)
    assert set(w.members) == {5, 852723}


def test_mask_is_exact_membership():
    v = VocabularySet.from_indices([3, 10], (4, 4))
    np.testing.assert_array_equal(v.mask(np.array([3, 4, 10, 15])), [True, False, True, False])

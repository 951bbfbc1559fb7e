import zlib

import numpy as np

from swimrl.rng import child_key, child_rng, tag_code


def test_same_triple_same_stream():
    a = child_rng(11, "train", 3).standard_normal(5)
    b = child_rng(11, "train", 3).standard_normal(5)
    assert np.array_equal(a, b)


def test_streams_differ_by_tag_index_and_seed():
    base = child_rng(0, "train", 0).standard_normal(4)
    for other in (child_rng(0, "eval", 0), child_rng(0, "train", 1), child_rng(1, "train", 0)):
        assert not np.array_equal(base, other.standard_normal(4))


def test_tag_code_is_unsigned_crc32():
    assert tag_code("train") == zlib.crc32(b"train")
    assert 0 <= tag_code("anything") < 2 ** 32


def test_key_layout():
    key = child_key(5, "eval", 2)
    assert key.dtype == np.uint64 and key.shape == (2,)
    g = child_rng(5, "eval", 2)
    assert isinstance(g.bit_generator, np.random.Philox)

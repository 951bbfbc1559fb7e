"""Deterministic seed fan-out on a counter-based generator.

Every random stream in the package is a :class:`numpy.random.Philox`
(4x64, counter-based) generator.  A child stream is identified by
``(master_seed, tag, index)``:

* ``tag_code = zlib.crc32(tag.encode("utf-8"))`` (unsigned 32 bit)
* ``key = SeedSequence(master_seed, spawn_key=(tag_code, index)).generate_state(2, uint64)``
* the generator is ``Philox(key=key)`` with the counter starting at zero.

Any implementation with SeedSequence and Philox4x64-10 reproduces the same
streams, so results do not depend on worker count or scheduling.
"""
from __future__ import annotations

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8")) & 0xFFFFFFFF


def child_key(master_seed: int, tag: str, index: int = 0) -> np.ndarray:
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(tag_code(tag), int(index)))
    return ss.generate_state(2, np.uint64)


def child_rng(master_seed: int, tag: str, index: int = 0) -> np.random.Generator:
    """Generator for stream ``index`` of purpose ``tag`` under ``master_seed``."""
    return np.random.Generator(np.random.Philox(key=child_key(master_seed, tag, index)))

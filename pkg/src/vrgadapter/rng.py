"""Counter-based splitmix64 streams with Box-Muller normals.

Every random quantity in the engine is drawn from a stream keyed by
``(seed, *tags)``, so a draw depends only on its key and position, never on
call order. The algorithm is frozen under ``ALGORITHM`` and echoed into every
manifest; changing any constant below requires bumping it.

    key      = fold of mix64 over the seed and tag words
    word[i]  = mix64(key + (i + 1) * GAMMA)          (mod 2**64)
    uniform  = (word >> 11) * 2**-53                  in [0, 1)
    normal   = Box-Muller on consecutive word pairs:
               r = sqrt(-2 ln u1), u1 = ((w0 >> 11) + 1) * 2**-53  in (0, 1]
               n0 = r cos(2 pi u2), n1 = r sin(2 pi u2)
"""

from __future__ import annotations

import hashlib

import numpy as np

ALGORITHM = "splitmix64-boxmuller-v1"

GAMMA = 0x9E3779B97F4A7C15
_MASK = (1 << 64) - 1
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_TWO_M53 = 2.0**-53


def mix64_int(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def _mix64(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
    return z ^ (z >> np.uint64(31))


def _tag_word(tag) -> int:
    if isinstance(tag, (bool, np.bool_)):
        raise TypeError("boolean stream tags are ambiguous")
    if isinstance(tag, (int, np.integer)):
        return int(tag) & _MASK
    if isinstance(tag, str):
        return int.from_bytes(hashlib.blake2b(tag.encode(), digest_size=8).digest(), "little")
    raise TypeError(f"unsupported stream tag {tag!r}")


def derive_key(seed: int, *tags) -> int:
    key = mix64_int(_tag_word(seed) + GAMMA)
    for tag in tags:
        key = mix64_int((key ^ _tag_word(tag)) + GAMMA)
    return key


class Stream:
    """Sequential reader over one keyed counter stream."""

    def __init__(self, seed: int, *tags):
        self.key = derive_key(seed, *tags)
        self.counter = 0

    def words(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.key) + idx * np.uint64(GAMMA)
        return _mix64(z)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.words(n) >> np.uint64(11)).astype(np.float64) * _TWO_M53
        return (low + (high - low) * u).reshape(shape)

    def normal(self, shape) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        w = self.words(2 * pairs) >> np.uint64(11)
        u1 = (w[0::2].astype(np.float64) + 1.0) * _TWO_M53
        u2 = w[1::2].astype(np.float64) * _TWO_M53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.words(n), kind="stable")


def normal(shape, seed: int, *tags) -> np.ndarray:
    return Stream(seed, *tags).normal(shape)


def uniform(shape, seed: int, *tags, low: float = 0.0, high: float = 1.0) -> np.ndarray:
    return Stream(seed, *tags).uniform(shape, low, high)

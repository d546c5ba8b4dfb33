"""Counter-based random streams.

Every draw is a pure function of ``(key, lane, counter)``: the run seed and a
stream tag give the key, the lane is usually an environment index and the
counter is a per-lane event count. Results therefore do not depend on the order
in which environments are evaluated or on how many are processed at once.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream tags
TARGETS = "targets"
PROGRESS = "progress"
RESET = "reset"
STAGGER = "stagger"
POLICY = "policy"
INIT = "init"
SHUFFLE = "shuffle"


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; uint64 arithmetic wraps silently for arrays
    x = x.copy()
    x ^= x >> np.uint64(30)
    x *= _M1
    x ^= x >> np.uint64(27)
    x *= _M2
    x ^= x >> np.uint64(31)
    return x


def _mix_int(x: int) -> int:
    x &= _MASK64
    x ^= x >> 30
    x = (x * 0xBF58476D1CE4E5B9) & _MASK64
    x ^= x >> 27
    x = (x * 0x94D049BB133111EB) & _MASK64
    x ^= x >> 31
    return x


def derive_key(seed: int, *tags: object) -> int:
    """Fold ``seed`` and any number of tags into a 64-bit stream key."""
    key = _mix_int(int(seed) + 0x9E3779B97F4A7C15)
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            word = int(tag)
        else:
            word = zlib.crc32(str(tag).encode("utf-8"))
        key = _mix_int(key ^ _mix_int(word + 0x632BE59BD9B4E019))
    return key


def random_bits(key: int, lanes, counters) -> np.ndarray:
    """64 random bits per (lane, counter) pair; inputs broadcast."""
    lanes = np.asarray(lanes, dtype=np.uint64)
    counters = np.asarray(counters, dtype=np.uint64)
    lanes, counters = np.broadcast_arrays(lanes, counters)
    shape = lanes.shape
    # work on 1-d arrays: 0-d uint64 math would go through scalars and warn on overflow
    lanes = lanes.reshape(-1)
    counters = counters.reshape(-1)
    key_arr = np.full(lanes.shape, key & _MASK64, dtype=np.uint64)
    x = _mix(key_arr ^ (lanes * _GOLDEN + np.uint64(1)))
    return _mix(x ^ _mix(counters + _GOLDEN)).reshape(shape)


def uniforms(key: int, lanes, counters) -> np.ndarray:
    """Doubles in [0, 1) built from the top 53 bits."""
    bits = random_bits(key, lanes, counters)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def generator(seed: int, *tags: object) -> np.random.Generator:
    """A numpy Generator on a derived key, for draws that are not per-lane."""
    return np.random.default_rng(derive_key(seed, *tags))

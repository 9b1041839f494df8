"""Counter-based random numbers (Philox4x32-10).

Every draw is a pure function of a 64-bit key and a 128-bit counter, so a
user's stream can be evaluated at any step without touching any other
user. The simulator lays the counter out as ``(step, stream, user_lo,
user_hi)`` and the key is the master seed.
"""

import numpy as np
from numba import njit, uint32, uint64

_M0 = uint64(0xD2511F53)
_M1 = uint64(0xCD9E8D57)
_W0 = uint64(0x9E3779B9)
_W1 = uint64(0xBB67AE85)
_MASK32 = uint64(0xFFFFFFFF)

# stream ids (second counter word)
STREAM_NOISE = 0
STREAM_AUX = 1
STREAM_ARRIVAL = 2
STREAM_LIFETIME = 3

_TWO_NEG53 = 1.0 / 9007199254740992.0


@njit(nogil=True, cache=True)
def philox4x32(c0, c1, c2, c3, k0, k1):
    """Ten-round Philox4x32 block; all arguments are 32-bit words."""
    x0 = uint64(c0) & _MASK32
    x1 = uint64(c1) & _MASK32
    x2 = uint64(c2) & _MASK32
    x3 = uint64(c3) & _MASK32
    key0 = uint64(k0) & _MASK32
    key1 = uint64(k1) & _MASK32
    for r in range(10):
        if r > 0:
            key0 = (key0 + _W0) & _MASK32
            key1 = (key1 + _W1) & _MASK32
        p0 = _M0 * x0
        p1 = _M1 * x2
        hi0 = p0 >> uint64(32)
        lo0 = p0 & _MASK32
        hi1 = p1 >> uint64(32)
        lo1 = p1 & _MASK32
        x0 = hi1 ^ x1 ^ key0
        x1 = lo1
        x2 = hi0 ^ x3 ^ key1
        x3 = lo0
    return uint32(x0), uint32(x1), uint32(x2), uint32(x3)


@njit(nogil=True, cache=True)
def _open_unit(a, b):
    # 53-bit uniform strictly inside (0, 1)
    k = (uint64(a) >> uint64(5)) * uint64(67108864) + (uint64(b) >> uint64(6))
    return (float(k) + 0.5) * _TWO_NEG53


@njit(nogil=True, cache=True)
def uniform_pair(step, stream, user, k0, k1):
    """Two independent uniforms on (0, 1) for ``(user, step, stream)``."""
    u = uint64(user)
    w0, w1, w2, w3 = philox4x32(
        uint64(step) & _MASK32, uint64(stream), u & _MASK32, u >> uint64(32), k0, k1
    )
    return _open_unit(w0, w1), _open_unit(w2, w3)


def split_seed(master_seed):
    """Map an integer seed to the two 32-bit Philox key words."""
    seed = int(master_seed)
    if seed < 0:
        raise ValueError(f"seed must be nonnegative, got {seed}")
    seed &= 0xFFFFFFFFFFFFFFFF
    return np.uint32(seed & 0xFFFFFFFF), np.uint32(seed >> 32)


class CounterStream:
    """Sequential view of one ``(seed, user, stream)`` counter lane.

    Used where a plain generator-style object is convenient (single draws,
    unit tests). Each call consumes one Philox block and yields its first
    uniform; ``pair`` yields both.
    """

    def __init__(self, seed, user=0, stream=STREAM_AUX, start=0):
        self.key = split_seed(seed)
        self.user = int(user)
        self.stream = int(stream)
        self.position = int(start)

    def pair(self):
        u = uniform_pair(self.position, self.stream, self.user, *self.key)
        self.position += 1
        return u

    def random(self):
        return self.pair()[0]

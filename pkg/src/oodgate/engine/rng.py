"""Counter-based SplitMix64 streams for dropout masks.

A stream key is derived by mixing ``(seed, draw, layer)`` one component at a
time, and element ``e`` of the stream is ``mix(key + (e + 1) * GAMMA)``, the
usual SplitMix64 state walk. No state is carried between calls, so any mask
can be regenerated in isolation and the result never depends on call order.
All arithmetic is on ``uint64`` with wrap-around.
"""

import numpy as np

GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser (Stafford variant 13), elementwise."""
    z = np.asarray(z, dtype=np.uint64)
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, *path: int) -> np.uint64:
    key = mix64(np.array([(int(seed) + 0x9E3779B97F4A7C15) & _MASK64], dtype=np.uint64))
    for part in path:
        key = mix64(key ^ np.uint64(int(part) & _MASK64))
    return key[0]


def uniform(key: np.uint64, n: int) -> np.ndarray:
    """``n`` float64 values in [0, 1) drawn from the stream ``key``."""
    counters = np.arange(1, n + 1, dtype=np.uint64)
    bits = mix64(key + counters * GAMMA)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def keep_mask(seed: int, draw: int, layer: int, shape: tuple[int, ...], p: float) -> np.ndarray:
    """Boolean keep-mask for one dropout layer; each unit survives with probability ``1 - p``."""
    n = int(np.prod(shape, dtype=np.int64))
    return (uniform(stream_key(seed, draw, layer), n) >= p).reshape(shape)

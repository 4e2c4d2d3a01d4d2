"""3D Morton (z-order) encoding on int64 keys.

Bit layout: x occupies bit 0 of every 3-bit group, y bit 1, z bit 2, so
dropping the low ``3 * k`` bits of a key yields the key of the ancestor
cell ``k`` levels up.
"""

import numpy as np

MAX_BITS = 20  # per axis; 60 bits total keeps keys positive in int64


def _spread(v: np.ndarray) -> np.ndarray:
    v = v.astype(np.int64) & 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


def _compact(v: np.ndarray) -> np.ndarray:
    v = v & 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


def encode(ijk: np.ndarray) -> np.ndarray:
    """Interleave non-negative integer cell coordinates of shape (N, 3)."""
    ijk = np.asarray(ijk, dtype=np.int64)
    if ijk.size and (ijk.min() < 0 or ijk.max() >= (1 << MAX_BITS)):
        raise ValueError(f"cell coordinates must lie in [0, 2**{MAX_BITS})")
    return _spread(ijk[:, 0]) | (_spread(ijk[:, 1]) << 1) | (_spread(ijk[:, 2]) << 2)


def decode(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    return np.stack([_compact(keys), _compact(keys >> 1), _compact(keys >> 2)], axis=-1)


def truncate(keys: np.ndarray, levels_up: int) -> np.ndarray:
    """Key of the ancestor cell ``levels_up`` depths coarser."""
    return np.asarray(keys, dtype=np.int64) >> (3 * levels_up)

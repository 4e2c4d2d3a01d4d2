"""Sparse multi-level octree over a point cloud.

Levels are numbered from 1 (finest) to S (coarsest). Level ``s`` holds the
occupied cells at octree depth ``depth_finest - s + 1``, ordered by Morton key,
so the descendants of any coarse cell form a contiguous run of the finer
level's keys.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import morton
from .errors import EmptyCloudError
from .pointcloud import PointCloud

DEFAULT_DEPTH = 6
DEFAULT_LEVELS = 3
BOUNDS_PAD = 0.01


@dataclass(frozen=True, eq=False)
class OctreeLevel:
    depth: int
    keys: np.ndarray        # (K,) int64, strictly increasing
    centroids: np.ndarray   # (K, 3) mean of member points
    counts: np.ndarray      # (K,) member points per octant

    def __len__(self) -> int:
        return len(self.keys)


@dataclass(frozen=True, eq=False)
class OctreePyramid:
    levels: list[OctreeLevel]
    origin: np.ndarray      # min corner of the bounding cube
    edge: float             # bounding cube edge length
    depth_finest: int
    point_octant: np.ndarray  # finest-level octant index of every input point

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, s: int) -> OctreeLevel:
        if not 1 <= s <= len(self.levels):
            raise IndexError(f"level {s} outside 1..{len(self.levels)}")
        return self.levels[s - 1]

    def cell_edge(self, s: int) -> float:
        return self.edge / (1 << self.level(s).depth)

    def octant_box(self, s: int, index: int) -> tuple[np.ndarray, float]:
        """(min corner, edge) of octant ``index`` at level ``s``."""
        lvl = self.level(s)
        if not 0 <= index < len(lvl):
            raise IndexError(f"octant {index} outside level {s} of size {len(lvl)}")
        ijk = morton.decode(lvl.keys[index:index + 1])[0]
        e = self.cell_edge(s)
        return self.origin + ijk * e, e


def bounding_cube(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Tight box expanded to a cube about its centre and padded by 1% of the edge."""
    lo, hi = points.min(axis=0), points.max(axis=0)
    extent = float((hi - lo).max())
    edge = extent * (1.0 + BOUNDS_PAD) if extent > 0 else 1.0
    return (lo + hi) / 2.0 - edge / 2.0, edge


def build_pyramid(cloud: PointCloud, depth_finest: int = DEFAULT_DEPTH,
                  num_levels: int = DEFAULT_LEVELS) -> OctreePyramid:
    if num_levels < 2 or depth_finest < num_levels - 1:
        raise ValueError(f"need num_levels >= 2 and depth_finest >= num_levels - 1, "
                         f"got depth {depth_finest}, levels {num_levels}")
    if depth_finest > morton.MAX_BITS:
        raise ValueError(f"depth_finest must be <= {morton.MAX_BITS}")
    pts = cloud.points
    if len(pts) == 0:
        raise EmptyCloudError("cannot build an octree over an empty cloud")

    origin, edge = bounding_cube(pts)
    res = 1 << depth_finest
    ijk = np.floor((pts - origin) * (res / edge)).astype(np.int64)
    np.clip(ijk, 0, res - 1, out=ijk)
    point_keys = morton.encode(ijk)

    levels = []
    point_octant = None
    for s in range(num_levels):
        keys_s = morton.truncate(point_keys, s)
        keys, inverse, counts = np.unique(keys_s, return_inverse=True, return_counts=True)
        if s == 0:
            point_octant = inverse
        sums = np.stack([np.bincount(inverse, weights=pts[:, a], minlength=len(keys))
                         for a in range(3)], axis=1)
        levels.append(OctreeLevel(depth_finest - s, keys, sums / counts[:, None], counts))
    for lvl in levels:
        for a in (lvl.keys, lvl.centroids, lvl.counts):
            a.setflags(write=False)
    return OctreePyramid(levels, origin, edge, depth_finest, point_octant)


def ancestors(pyr: OctreePyramid, fine_level: int, coarse_level: int) -> np.ndarray:
    """Index at ``coarse_level`` of the ancestor of every octant at ``fine_level``."""
    return ancestors_from_keys(pyr.level(fine_level).keys, pyr.level(coarse_level).keys,
                               coarse_level - fine_level)


def ancestors_from_keys(fine_keys: np.ndarray, coarse_keys: np.ndarray, levels_up: int) -> np.ndarray:
    if levels_up < 1:
        raise ValueError("coarse level must be strictly coarser than fine level")
    parent_keys = morton.truncate(fine_keys, levels_up)
    idx = np.searchsorted(coarse_keys, parent_keys)
    if np.any(idx >= len(coarse_keys)) or np.any(coarse_keys[np.minimum(idx, len(coarse_keys) - 1)] != parent_keys):
        raise ValueError("fine keys have no ancestor in the coarse level")
    return idx


def parent_of(pyr: OctreePyramid, fine_level: int, octant_index: int, coarse_level: int) -> int:
    if not 1 <= fine_level < coarse_level <= pyr.num_levels:
        raise IndexError(f"need 1 <= fine_level < coarse_level <= {pyr.num_levels}")
    fine = pyr.level(fine_level)
    if not 0 <= octant_index < len(fine):
        raise IndexError(f"octant {octant_index} outside level {fine_level} of size {len(fine)}")
    key = morton.truncate(fine.keys[octant_index], coarse_level - fine_level)
    return int(np.searchsorted(pyr.level(coarse_level).keys, key))


def patch_ranges(fine_keys: np.ndarray, coarse_keys: np.ndarray, levels_up: int) -> np.ndarray:
    """(K_coarse, 2) half-open ranges of fine indices under each coarse key."""
    shift = 3 * levels_up
    lo = np.searchsorted(fine_keys, coarse_keys << shift, side="left")
    hi = np.searchsorted(fine_keys, (coarse_keys + 1) << shift, side="left")
    return np.stack([lo, hi], axis=1)


def group_by_parent(pyr: OctreePyramid, coarse_indices) -> list[np.ndarray]:
    """Finest-level octant indices descending from each requested coarsest-level octant."""
    S = pyr.num_levels
    coarse = pyr.level(S)
    coarse_indices = np.asarray(coarse_indices, dtype=np.int64).reshape(-1)
    if coarse_indices.size and (coarse_indices.min() < 0 or coarse_indices.max() >= len(coarse)):
        raise IndexError(f"coarse index outside level {S} of size {len(coarse)}")
    ranges = patch_ranges(pyr.level(1).keys, coarse.keys[coarse_indices], S - 1)
    return [np.arange(lo, hi) for lo, hi in ranges]


def level_stats(pyr: OctreePyramid) -> dict:
    return {
        "depth_finest": pyr.depth_finest,
        "edge": pyr.edge,
        "octants_per_level": [len(lvl) for lvl in pyr.levels],
    }

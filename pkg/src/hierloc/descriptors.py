"""Deterministic multi-scale local descriptors and pooled global descriptors.

Every octant at every pyramid level gets a fixed-length vector built from the
points in a ball around its centroid:

    shape     linearity, planarity, sphericity of the covariance spectrum
    normal    smallest-eigenvalue eigenvector, sign fixed so z >= 0
    height    mean height above the cloud ground reference, std and range of z
    density   log point count per cubic octant edge
    azimuth   8-bin soft histogram of point bearings about the centroid
    context   cylindrical occupancy of the wider neighbourhood, binned by
              radial distance and height offset (invariant to yaw)

Inside ``extract_pyramid`` the neighbourhood sums are taken over voxels of a
grid anchored at the octree origin (a few voxels per ball radius) and
evaluated for every octant at once by FFT correlation; ``local_descriptor``
works on the exact point set.

Magnitude features are divided by the octant edge and passed through a signed
``log1p`` so no block dominates the unit-norm result. Blocks are scaled by
configurable weights, zero-padded to the level dimension and L2-normalised.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sp_fft
from scipy import ndimage

from . import morton
from .errors import DataError
from .octree import OctreePyramid
from .pointcloud import PointCloud

HIST_BINS = 8
CTX_RINGS = 2
CTX_SLABS = 7
RAW_DIM = 18 + CTX_RINGS * CTX_SLABS
BLOCKS = {
    "shape": slice(0, 3),
    "normal": slice(3, 6),
    "height": slice(6, 9),
    "density": slice(9, 10),
    "azimuth": slice(10, 18),
    "context": slice(18, RAW_DIM),
}
# Blocks that change under yaw (normal x/y, bearings) default to zero weight
# so that descriptors match across arbitrary heading changes.
DEFAULT_WEIGHTS = {"shape": 1.0, "normal": 0.0, "height": 3.0, "density": 1.0,
                   "azimuth": 0.0, "context": 5.0}
UNIT_WEIGHTS = dict.fromkeys(BLOCKS, 1.0)
MAGIC = b"HLFP"
VERSION = 1


@dataclass
class DescriptorConfig:
    dims: tuple[int, ...] = (32, 32, 32)
    radius_mult: tuple[float, ...] = (3.0, 2.0, 3.0)
    context_mult: tuple[float, ...] = (8.0, 3.0, 2.0)
    exponent: float = 3.0
    block_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    ground_percentile: float = 2.0
    height_scale: float | None = 4.0   # metres; None divides by the octant edge under a signed log

    def validate(self, num_levels: int | None = None) -> "DescriptorConfig":
        if any(d < max(8, RAW_DIM) for d in self.dims):
            raise ValueError(f"descriptor dims must be >= {max(8, RAW_DIM)}, got {self.dims}")
        if len(self.radius_mult) != len(self.dims):
            raise ValueError("radius_mult needs one entry per level")
        if len(self.context_mult) != len(self.dims) or any(m <= 0 for m in self.context_mult):
            raise ValueError("context_mult needs one positive entry per level")
        if any(not (m == 0 or m >= 1) for m in self.radius_mult):
            raise ValueError("radius_mult entries must be 0 (octant members only) or >= 1")
        if self.height_scale is not None and not self.height_scale > 0:
            raise ValueError("height_scale must be positive or None")
        if self.exponent < 1:
            raise ValueError("pooling exponent must be >= 1")
        if set(self.block_weights) != set(BLOCKS) or any(w < 0 for w in self.block_weights.values()):
            raise ValueError(f"block_weights needs non-negative entries for {sorted(BLOCKS)}")
        if num_levels is not None and len(self.dims) != num_levels:
            raise ValueError(f"config has {len(self.dims)} levels, pyramid has {num_levels}")
        return self


@dataclass(frozen=True, eq=False)
class FeatureLevel:
    keys: np.ndarray         # (K,) Morton keys of the octants, increasing
    centroids: np.ndarray    # (K, 3)
    descriptors: np.ndarray  # (K, d), unit rows

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


@dataclass(frozen=True, eq=False)
class FeaturePyramid:
    levels: list[FeatureLevel]
    global_desc: np.ndarray

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(lvl.dim for lvl in self.levels)

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    def level(self, s: int) -> FeatureLevel:
        if not 1 <= s <= len(self.levels):
            raise IndexError(f"level {s} outside 1..{len(self.levels)}")
        return self.levels[s - 1]

    def to_bytes(self) -> bytes:
        parts = [struct.pack("<4sIII", MAGIC, VERSION, len(self.levels), len(self.global_desc))]
        parts += [struct.pack("<II", lvl.dim, len(lvl)) for lvl in self.levels]
        for lvl in self.levels:
            parts.append(np.ascontiguousarray(lvl.keys, dtype="<i8").tobytes())
            parts.append(np.ascontiguousarray(lvl.centroids, dtype="<f8").tobytes())
            parts.append(np.ascontiguousarray(lvl.descriptors, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(self.global_desc, dtype="<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["FeaturePyramid", int]:
        """Decode one container starting at ``offset``; returns (pyramid, end offset)."""
        try:
            magic, version, S, gdim = struct.unpack_from("<4sIII", buf, offset)
        except struct.error:
            raise DataError("truncated descriptor container header") from None
        if magic != MAGIC:
            raise DataError(f"bad descriptor container magic {magic!r}")
        if version != VERSION:
            raise DataError(f"unsupported descriptor container version {version}")
        pos = offset + 16
        shapes = []
        for _ in range(S):
            shapes.append(struct.unpack_from("<II", buf, pos))
            pos += 8

        def take(dtype, n):
            nonlocal pos
            size = np.dtype(dtype).itemsize * n
            if pos + size > len(buf):
                raise DataError("truncated descriptor container body")
            a = np.frombuffer(buf, dtype=dtype, count=n, offset=pos).astype(dtype[1:])
            pos += size
            return a

        levels = []
        for dim, count in shapes:
            keys = take("<i8", count)
            cents = take("<f8", count * 3).reshape(count, 3)
            desc = take("<f8", count * dim).reshape(count, dim)
            levels.append(FeatureLevel(keys, cents, desc))
        g = take("<f8", gdim)
        return cls(levels, g), pos


# ---------------------------------------------------------------------------
# Local descriptors
# ---------------------------------------------------------------------------

def _slog(x):
    return np.sign(x) * np.log1p(np.abs(x))


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    """Flip rows so the first non-zero of (z, y, x) is positive."""
    key = np.where(v[:, 2] != 0, v[:, 2], np.where(v[:, 1] != 0, v[:, 1], v[:, 0]))
    return v * np.where(key < 0, -1.0, 1.0)[:, None]


def _shape_height_density(n, mean, cov, zrange, edges, z_ref, height_scale=None) -> np.ndarray:
    """Raw rows with the shape, normal, height and density blocks filled in."""
    evals, evecs = np.linalg.eigh(cov)
    out = np.zeros((len(n), RAW_DIM))
    l1, l2, l3 = evals[:, 2], evals[:, 1], np.maximum(evals[:, 0], 0.0)
    scale = np.maximum(edges, 1e-12) ** 2
    ok = (n >= 3) & (l1 > 1e-12 * scale)
    safe = np.where(ok, l1, 1.0)
    out[:, 0] = np.where(ok, (l1 - l2) / safe, 0.0)
    out[:, 1] = np.where(ok, np.maximum(l2 - l3, 0.0) / safe, 0.0)
    out[:, 2] = np.where(ok, l3 / safe, 0.0)
    out[:, 3:6] = np.where(ok[:, None], _canonical_sign(evecs[:, :, 0]), 0.0)
    if height_scale is None:
        out[:, 6] = _slog((mean[:, 2] - z_ref) / edges)
    else:
        out[:, 6] = (mean[:, 2] - z_ref) / height_scale
    out[:, 7] = np.log1p(np.sqrt(np.maximum(cov[:, 2, 2], 0.0)) / edges)
    out[:, 8] = np.log1p(np.maximum(zrange, 0.0) / edges)
    out[:, 9] = np.log1p(n / edges ** 3)
    return out


def _raw_blocks(pts: np.ndarray, seg: np.ndarray, n_groups: int, edges: np.ndarray,
                z_ref: np.ndarray, height_scale: float | None = None) -> np.ndarray:
    """Raw feature rows for groups of points; ``seg[i]`` is the group of ``pts[i]``.

    Reductions use ``np.bincount`` which sums in input order, so results do not
    depend on how groups are scheduled.
    """
    n = np.bincount(seg, minlength=n_groups).astype(np.float64)
    if np.any(n == 0):
        raise ValueError("every descriptor needs at least one member point")
    mean = np.stack([np.bincount(seg, pts[:, a], n_groups) for a in range(3)], axis=1) / n[:, None]
    d = pts - mean[seg]
    cov = np.empty((n_groups, 3, 3))
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = np.bincount(seg, d[:, a] * d[:, b], n_groups) / n
    z = pts[:, 2]
    zmax = np.full(n_groups, -np.inf)
    zmin = np.full(n_groups, np.inf)
    np.maximum.at(zmax, seg, z)
    np.minimum.at(zmin, seg, z)
    out = _shape_height_density(n, mean, cov, zmax - zmin, edges, z_ref, height_scale)

    rad = np.hypot(d[:, 0], d[:, 1])
    live = rad > 1e-9 * edges[seg]
    pos = (np.arctan2(d[live, 1], d[live, 0]) / (2 * np.pi / HIST_BINS)) % HIST_BINS
    lo = np.floor(pos).astype(np.int64)
    frac = pos - lo
    lo %= HIST_BINS
    g = seg[live]
    hist = np.zeros(n_groups * HIST_BINS)
    hist += np.bincount(g * HIST_BINS + lo, 1.0 - frac, n_groups * HIST_BINS)
    hist += np.bincount(g * HIST_BINS + (lo + 1) % HIST_BINS, frac, n_groups * HIST_BINS)
    hist = hist.reshape(n_groups, HIST_BINS)
    total = hist.sum(axis=1, keepdims=True)
    out[:, 10:18] = np.divide(hist, total, out=np.zeros_like(hist), where=total > 0)
    return out


def _finish(raw: np.ndarray, dim: int, block_weights: dict) -> np.ndarray:
    out = np.zeros((len(raw), dim))
    for name, sl in BLOCKS.items():
        out[:, sl] = raw[:, sl] * block_weights[name]
    norm = np.linalg.norm(out, axis=1, keepdims=True)
    fallback = np.zeros(dim)
    fallback[BLOCKS["density"]] = 1.0
    return np.where(norm > 0, out / np.where(norm > 0, norm, 1.0), fallback)


def local_descriptor(member_points, octant_edge: float, z_ref: float | None = None,
                     dim: int = 32, block_weights: dict | None = None,
                     height_scale: float | None = None) -> np.ndarray:
    """Unit-norm descriptor of one point set.

    ``z_ref`` is the height datum for the mean-height feature; it defaults to
    the lowest member point. Fewer than 3 points zero the shape and normal blocks.
    The context block needs the surrounding cloud and stays zero here.
    """
    pts = np.asarray(member_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("local_descriptor needs at least one point")
    if not octant_edge > 0:
        raise ValueError("octant_edge must be positive")
    if dim < RAW_DIM:
        raise ValueError(f"dim must be >= {RAW_DIM}")
    zr = pts[:, 2].min() if z_ref is None else z_ref
    raw = _raw_blocks(pts, np.zeros(len(pts), dtype=np.int64), 1,
                      np.array([float(octant_edge)]), np.array([zr], dtype=np.float64), height_scale)
    weights = UNIT_WEIGHTS if block_weights is None else block_weights
    return _finish(raw, dim, weights)[0]


def ground_reference(points: np.ndarray, percentile: float) -> float:
    """Low height percentile used as the cloud's ground datum (clouds are taken as z-up)."""
    return float(np.percentile(points[:, 2], percentile))


class _Grid:
    """Per-voxel moment sums of a cloud on a grid anchored at ``anchor``, kept in
    the frequency domain so neighbourhood sums become one product per kernel."""

    def __init__(self, pts: np.ndarray, cell: float, halo: int, channels: str = "moments",
                 anchor=(0.0, 0.0, 0.0)):
        self.cell = cell
        self.halo = halo
        self.anchor = np.asarray(anchor, dtype=np.float64)
        base = np.floor((pts - self.anchor) / cell).astype(np.int64)
        self.lo = base.min(axis=0)
        ijk = base - self.lo
        dims = ijk.max(axis=0) + 1
        self.shape = tuple(int(sp_fft.next_fast_len(int(d) + 2 * halo + 1, real=True)) for d in dims)
        flat = np.ravel_multi_index(ijk.T, self.shape)
        size = int(np.prod(self.shape))
        self.centre = pts.mean(axis=0)
        x = pts - self.centre
        cols = [np.ones(len(pts))]
        if channels == "moments":
            cols += [x[:, 0], x[:, 1], x[:, 2]]
            cols += [x[:, a] * x[:, b] for a in range(3) for b in range(a, 3)]
        self.spectra = [sp_fft.rfftn(np.bincount(flat, c, size).reshape(self.shape), workers=-1)
                        for c in cols]
        if channels == "moments":
            zmax = np.full(size, -np.inf)
            zmin = np.full(size, np.inf)
            np.maximum.at(zmax, flat, pts[:, 2])
            np.minimum.at(zmin, flat, pts[:, 2])
            box = 2 * halo + 1
            self.zmax = ndimage.maximum_filter(zmax.reshape(self.shape), size=box, mode="constant", cval=-np.inf).reshape(-1)
            self.zmin = ndimage.minimum_filter(zmin.reshape(self.shape), size=box, mode="constant", cval=np.inf).reshape(-1)

    def cells(self, centres: np.ndarray) -> np.ndarray:
        ijk = np.floor((centres - self.anchor) / self.cell).astype(np.int64) - self.lo
        return np.ravel_multi_index(ijk.T, self.shape, mode="clip")

    def offsets(self) -> np.ndarray:
        """Cell-centre offsets (metres) of the kernel support, shape (2h+1,)*3 + (3,)."""
        r = np.arange(-self.halo, self.halo + 1) * self.cell
        return np.stack(np.meshgrid(r, r, r, indexing="ij"), axis=-1)

    def kernel_spectrum(self, weights: np.ndarray) -> np.ndarray:
        """Spectrum of a kernel given on the offset support; index wraps so that
        correlating with it sums ``grid[u + d] * weights[d]``."""
        h = self.halo
        k = np.zeros(self.shape)
        idx = [np.arange(-h, h + 1) % n for n in self.shape]
        k[np.ix_(*idx)] = weights
        return np.conj(sp_fft.rfftn(k, workers=-1))

    def gather(self, channel: int, kspec: np.ndarray, flat: np.ndarray) -> np.ndarray:
        out = sp_fft.irfftn(self.spectra[channel] * kspec, s=self.shape, workers=-1)
        return out.reshape(-1)[flat]


def _grid_blocks(grid: _Grid, centres: np.ndarray, radius: float, edge: float, z_ref: float,
                 azimuth: bool, height_scale: float | None = None) -> np.ndarray:
    """Raw blocks (all but context) over the voxels within ``radius`` of each centre's voxel."""
    off = grid.offsets()
    ball = (np.linalg.norm(off, axis=-1) <= radius + 1e-9).astype(np.float64)
    kb = grid.kernel_spectrum(ball)
    flat = grid.cells(centres)
    sums = np.stack([grid.gather(c, kb, flat) for c in range(10)], axis=1)
    K = len(centres)
    n = np.maximum(np.rint(sums[:, 0]), 1.0)
    mean = sums[:, 1:4] / n[:, None]
    cov = np.empty((K, 3, 3))
    c = 4
    for a in range(3):
        for b in range(a, 3):
            cov[:, a, b] = cov[:, b, a] = sums[:, c] / n - mean[:, a] * mean[:, b]
            c += 1
    # the z range comes from box-filtered per-voxel extremes, a slight superset of the ball
    zr = grid.zmax[flat] - grid.zmin[flat]
    out = _shape_height_density(n, mean + grid.centre, cov, zr, np.full(K, edge), np.full(K, z_ref),
                                height_scale)
    if azimuth:
        ang = np.arctan2(off[..., 1], off[..., 0])
        rad = np.hypot(off[..., 0], off[..., 1])
        pos = (ang / (2 * np.pi / HIST_BINS)) % HIST_BINS
        hist = np.empty((K, HIST_BINS))
        for b in range(HIST_BINS):
            d = np.abs(((pos - b + HIST_BINS / 2) % HIST_BINS) - HIST_BINS / 2)
            w = ball * (rad > 0) * np.maximum(1.0 - d, 0.0)
            hist[:, b] = grid.gather(0, grid.kernel_spectrum(w), flat)
        hist = np.maximum(hist, 0.0)
        total = hist.sum(axis=1, keepdims=True)
        out[:, BLOCKS["azimuth"]] = np.divide(hist, total, out=np.zeros_like(hist), where=total > 1e-9)
    return out


def _grid_context(grid: _Grid, centres: np.ndarray, radius: float) -> np.ndarray:
    off = grid.offsets()
    rho = np.hypot(off[..., 0], off[..., 1])
    inside = (rho <= radius + 1e-9) & (np.abs(off[..., 2]) <= radius + 1e-9)
    ring = np.minimum((rho / radius * CTX_RINGS).astype(np.int64), CTX_RINGS - 1)
    slab = np.clip(((off[..., 2] + radius) / (2 * radius) * CTX_SLABS).astype(np.int64), 0, CTX_SLABS - 1)
    flat = grid.cells(centres)
    hist = np.empty((len(centres), CTX_RINGS * CTX_SLABS))
    for r in range(CTX_RINGS):
        for z in range(CTX_SLABS):
            w = (inside & (ring == r) & (slab == z)).astype(np.float64)
            hist[:, r * CTX_SLABS + z] = grid.gather(0, grid.kernel_spectrum(w), flat)
    hist = np.maximum(hist, 0.0)
    total = hist.sum(axis=1, keepdims=True)
    return np.divide(hist, total, out=np.zeros_like(hist), where=total > 1e-9)


def extract_pyramid(cloud: PointCloud, pyr: OctreePyramid,
                    cfg: DescriptorConfig | None = None) -> FeaturePyramid:
    """Descriptors for every octant of every level, plus the pooled global vector.

    A zero ``radius_mult`` uses the octant's own member points exactly.
    """
    cfg = (cfg or DescriptorConfig()).validate(pyr.num_levels)
    pts = cloud.points
    if len(pts) != len(pyr.point_octant):
        raise ValueError(f"pyramid was built from {len(pyr.point_octant)} points, cloud has {len(pts)}")
    z_ref = ground_reference(pts, cfg.ground_percentile)
    levels = []
    for s in range(1, pyr.num_levels + 1):
        lvl = pyr.level(s)
        edge = pyr.cell_edge(s)
        mult = cfg.radius_mult[s - 1]
        K = len(lvl)
        if mult > 0:
            # about three voxels per ball radius, never coarser than the octant
            cell = min(edge, mult * edge / 3)
            grid = _Grid(pts, cell, int(np.ceil(mult * edge / cell - 1e-9)), anchor=pyr.origin)
            raw = _grid_blocks(grid, lvl.centroids, mult * edge, edge, z_ref,
                               cfg.block_weights["azimuth"] > 0, cfg.height_scale)
        else:
            owner = np.searchsorted(lvl.keys, morton.truncate(pyr.level(1).keys, s - 1))[pyr.point_octant]
            idx = np.argsort(owner, kind="stable")
            raw = _raw_blocks(pts[idx], owner[idx], K, np.full(K, edge), np.full(K, z_ref), cfg.height_scale)
        if cfg.block_weights["context"] > 0:
            ctx_r = cfg.context_mult[s - 1] * edge
            grid = _Grid(pts, ctx_r / 4, 4, channels="count", anchor=pyr.origin)
            raw[:, BLOCKS["context"]] = _grid_context(grid, lvl.centroids, ctx_r)
        desc = _finish(raw, cfg.dims[s - 1], cfg.block_weights)
        levels.append(FeatureLevel(lvl.keys, lvl.centroids, desc))
    feats = FeaturePyramid(levels, np.zeros(0))
    return FeaturePyramid(levels, aggregate_global(feats, cfg.exponent))


# ---------------------------------------------------------------------------
# Global pooling
# ---------------------------------------------------------------------------

def generalized_mean(x: np.ndarray, exponent: float) -> np.ndarray:
    """Column-wise sign-preserving power mean of the rows of ``x``."""
    m = np.mean(np.sign(x) * np.abs(x) ** exponent, axis=0)
    return np.sign(m) * np.abs(m) ** (1.0 / exponent)


def aggregate_global(features: FeaturePyramid, exponent: float = 3.0) -> np.ndarray:
    """Power-mean pool each level, concatenate and L2-normalise."""
    if exponent < 1:
        raise ValueError("pooling exponent must be >= 1")
    if not features.levels or any(len(lvl) == 0 for lvl in features.levels):
        raise ValueError("cannot pool an empty feature pyramid")
    g = np.concatenate([generalized_mean(lvl.descriptors, exponent) for lvl in features.levels])
    norm = np.linalg.norm(g)
    if norm == 0:
        # every block cancelled; fall back to a fixed unit vector
        return np.full(len(g), 1.0 / np.sqrt(len(g)))
    return g / norm


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))

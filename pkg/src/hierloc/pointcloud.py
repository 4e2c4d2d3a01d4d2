"""Point-cloud container, file IO, voxel downsampling and rigid motions."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import morton
from .errors import DataError, EmptyCloudError, InvalidRotationError, ParseError

ROTATION_TOL = 1e-9
FORMATS = ("ply-ascii", "ply-binary-le", "xyz-text")


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """An (N, 3) float64 array of points in metres, plus an optional label."""

    points: np.ndarray
    id: str | None = None

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64, copy=True).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise DataError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))

    def __len__(self) -> int:
        return len(self.points)

    def require_nonempty(self) -> "PointCloud":
        if len(self.points) == 0:
            raise EmptyCloudError(f"cloud {self.id!r} has no points")
        return self


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """Rotation in SO(3) plus translation; maps x to ``rotation @ x + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64, copy=True)
        t = np.array(self.translation, dtype=np.float64, copy=True).reshape(-1)
        if R.shape != (3, 3) or t.shape != (3,):
            raise InvalidRotationError("rotation must be 3x3 and translation a 3-vector")
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidRotationError("transform entries must be finite")
        if np.abs(R.T @ R - np.eye(3)).max() > ROTATION_TOL or abs(np.linalg.det(R) - 1.0) > ROTATION_TOL:
            raise InvalidRotationError("rotation is not orthonormal with det +1")
        object.__setattr__(self, "rotation", _frozen(R))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidRotationError("homogeneous pose must be 4x4")
        if not np.allclose(m[3], [0, 0, 0, 1]):
            raise InvalidRotationError("last row of a homogeneous pose must be (0, 0, 0, 1)")
        return cls(m[:3, :3], m[:3, 3])

    @classmethod
    def about_z(cls, angle_rad: float, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        c, s = np.cos(angle_rad), np.sin(angle_rad)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), translation)

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return invert(self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(T: RigidTransform) -> RigidTransform:
    Rt = T.rotation.T
    return RigidTransform(Rt, -Rt @ T.translation)


def apply_transform(cloud: PointCloud, T: RigidTransform) -> PointCloud:
    return PointCloud(T.apply(cloud.points), cloud.id)


def pose_to_json(T: RigidTransform) -> list[list[float]]:
    """4x4 row-major homogeneous matrix as nested lists."""
    return T.as_matrix().tolist()


def pose_from_json(obj) -> RigidTransform:
    return RigidTransform.from_matrix(np.asarray(obj, dtype=np.float64))


def load_pose(path: str | os.PathLike) -> RigidTransform:
    with open(path) as fh:
        return pose_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _infer_format(path: Path) -> str:
    if path.suffix.lower() != ".ply":
        return "xyz-text"
    with open(path, "rb") as fh:
        head = fh.read(512)
    for line in head.split(b"\n"):
        if line.startswith(b"format"):
            return "ply-ascii" if b"ascii" in line else "ply-binary-le"
    raise ParseError("PLY header has no format line", line=1)


def _read_ply_header(fh):
    """Parse a PLY header; returns (format, vertex count, vertex properties, header line count)."""
    magic = fh.readline()
    if magic.strip() != b"ply":
        raise ParseError("missing 'ply' magic", line=1)
    fmt = None
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    lineno = 1
    while True:
        raw = fh.readline()
        lineno += 1
        if not raw:
            raise ParseError("unterminated PLY header", line=lineno)
        tok = raw.decode("ascii", errors="replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "end_header":
            break
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise ParseError(f"unsupported PLY format {' '.join(tok[1:])!r}", line=lineno)
            fmt = "ply-ascii" if tok[1] == "ascii" else "ply-binary-le"
        elif tok[0] == "element":
            try:
                elements.append((tok[1], int(tok[2]), []))
            except (IndexError, ValueError):
                raise ParseError("malformed element line", line=lineno) from None
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", line=lineno)
            if tok[1] == "list":
                raise ParseError("list properties are not supported", line=lineno)
            if len(tok) < 3 or tok[1] not in _PLY_TYPES:
                raise ParseError(f"unknown property type in {raw!r}", line=lineno)
            elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", line=lineno)
    if fmt is None:
        raise ParseError("PLY header has no format line", line=lineno)
    names = [e[0] for e in elements]
    if "vertex" not in names:
        raise ParseError("PLY has no vertex element", line=lineno)
    if names.index("vertex") != 0:
        raise ParseError("vertex must be the first PLY element", line=lineno)
    _, count, props = elements[0]
    if not {"x", "y", "z"} <= {p[0] for p in props}:
        raise ParseError("vertex element lacks x/y/z properties", line=lineno)
    return fmt, count, props, lineno


def _load_ply(path: Path, declared: str) -> np.ndarray:
    with open(path, "rb") as fh:
        fmt, count, props, header_lines = _read_ply_header(fh)
        if fmt != declared:
            raise ParseError(f"file is {fmt}, declared {declared}", line=2)
        if fmt == "ply-binary-le":
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            offset = fh.tell()
            data = fh.read(dtype.itemsize * count)
            if len(data) < dtype.itemsize * count:
                got = len(data) // dtype.itemsize
                raise ParseError(f"expected {count} vertices, found {got}", offset=offset + len(data))
            rec = np.frombuffer(data, dtype=dtype, count=count)
            return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)
        names = [p[0] for p in props]
        cols = [names.index(c) for c in "xyz"]
        out = np.empty((count, 3))
        lineno = header_lines
        i = 0
        while i < count:
            raw = fh.readline()
            lineno += 1
            if not raw:
                raise ParseError(f"expected {count} vertices, found {i}", line=lineno)
            tok = raw.split()
            if not tok:
                continue
            if len(tok) < len(props):
                raise ParseError(f"vertex record has {len(tok)} fields, expected {len(props)}", line=lineno)
            try:
                out[i] = [float(tok[c]) for c in cols]
            except ValueError:
                raise ParseError(f"non-numeric vertex field in {raw!r}", line=lineno) from None
            i += 1
        return out


def _load_xyz(path: Path) -> np.ndarray:
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            tok = raw.split("#", 1)[0].replace(",", " ").split()
            if not tok:
                continue
            if len(tok) < 3:
                raise ParseError(f"expected 3 coordinates, found {len(tok)}", line=lineno)
            try:
                rows.append((float(tok[0]), float(tok[1]), float(tok[2])))
            except ValueError:
                raise ParseError(f"non-numeric coordinate in {raw.strip()!r}", line=lineno) from None
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


def load_cloud(path: str | os.PathLike, format: str | None = None) -> PointCloud:
    """Read a cloud from PLY (ascii or binary little-endian) or whitespace xyz text.

    ``format`` is one of :data:`FORMATS`; when omitted it is inferred from the
    extension and PLY header.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such cloud file: {path}")
    fmt = format or _infer_format(path)
    if fmt not in FORMATS:
        raise ValueError(f"unknown cloud format {fmt!r}")
    pts = _load_xyz(path) if fmt == "xyz-text" else _load_ply(path, fmt)
    if len(pts) == 0:
        raise EmptyCloudError(f"{path} contains no points")
    if not np.all(np.isfinite(pts)):
        bad = int(np.flatnonzero(~np.isfinite(pts).all(axis=1))[0])
        raise ParseError("non-finite coordinate", line=bad + 1)
    return PointCloud(pts, path.stem)


def save_cloud(cloud: PointCloud, path: str | os.PathLike, format: str = "ply-binary-le") -> None:
    """Write ``cloud``; PLY stores float32 x/y/z, text stores full float64 precision."""
    path = Path(path)
    pts = cloud.points
    if format == "xyz-text":
        np.savetxt(path, pts, fmt="%.17g")
        return
    if format not in FORMATS:
        raise ValueError(f"unknown cloud format {format!r}")
    kind = "ascii" if format == "ply-ascii" else "binary_little_endian"
    header = (
        f"ply\nformat {kind} 1.0\nelement vertex {len(pts)}\n"
        "property float x\nproperty float y\nproperty float z\nend_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if format == "ply-ascii":
            f32 = pts.astype(np.float32)
            for row in f32:
                fh.write(("%r %r %r\n" % tuple(float(v) for v in row)).encode("ascii"))
        else:
            fh.write(pts.astype("<f4").tobytes())


# ---------------------------------------------------------------------------
# Downsampling
# ---------------------------------------------------------------------------

def voxel_keys(points: np.ndarray, voxel: float) -> np.ndarray:
    """Morton key of the voxel holding each point.

    Cells come from ``floor(p / voxel)`` shifted by the minimum cell index, so
    keys are non-negative and the grid is fixed in world coordinates.
    """
    cells = np.floor(points / voxel).astype(np.int64)
    cells -= cells.min(axis=0)
    if cells.size and cells.max() >= (1 << morton.MAX_BITS):
        raise ValueError(f"voxel {voxel} too small for the cloud extent")
    return morton.encode(cells)


def voxel_downsample(cloud: PointCloud, voxel: float) -> PointCloud:
    """Replace the points of each occupied voxel by their centroid, in z-order."""
    if not voxel > 0:
        raise ValueError(f"voxel size must be positive, got {voxel}")
    cloud.require_nonempty()
    keys = voxel_keys(cloud.points, voxel)
    _, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.stack([np.bincount(inverse, weights=cloud.points[:, a]) for a in range(3)], axis=1)
    return PointCloud(sums / counts[:, None], cloud.id)


__all__ = [
    "FORMATS", "PointCloud", "RigidTransform", "apply_transform", "compose", "invert",
    "load_cloud", "save_cloud", "voxel_downsample", "voxel_keys", "pose_to_json",
    "pose_from_json", "load_pose",
]

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from hierloc.errors import EmptyCloudError, InvalidRotationError, ParseError
from hierloc.pointcloud import (PointCloud, RigidTransform, apply_transform, compose, invert,
                                load_cloud, load_pose, pose_from_json, pose_to_json, save_cloud,
                                voxel_downsample)


def random_transform(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    R = np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                  [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                  [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])
    return RigidTransform(R, rng.uniform(-10, 10, 3))


# -- loading and saving ------------------------------------------------------

def test_xyz_text_three_points(tmp_path):
    path = tmp_path / "tri.xyz"
    path.write_text("0 0 0\n1 0 0\n0 1 0")
    cloud = load_cloud(path, "xyz-text")
    assert np.array_equal(cloud.points, [[0, 0, 0], [1, 0, 0], [0, 1, 0]])
    assert cloud.id == "tri"


def test_ply_ascii_short_body_is_parse_error(tmp_path):
    path = tmp_path / "short.ply"
    path.write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                    "property float y\nproperty float z\nend_header\n1 2 3\n")
    with pytest.raises(ParseError) as info:
        load_cloud(path, "ply-ascii")
    assert info.value.line is not None


def test_binary_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(42)
    # binary PLY holds float32, so start from float32-representable values
    pts = rng.uniform(-50, 50, (1000, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "c.ply"
    save_cloud(PointCloud(pts, "c"), path, "ply-binary-le")
    back = load_cloud(path)
    assert back.points.tobytes() == pts.tobytes()


def test_ascii_ply_and_text_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(50, 3))
    save_cloud(PointCloud(pts), tmp_path / "a.ply", "ply-ascii")
    assert np.array_equal(load_cloud(tmp_path / "a.ply").points, pts.astype(np.float32))
    save_cloud(PointCloud(pts), tmp_path / "a.xyz", "xyz-text")
    assert np.array_equal(load_cloud(tmp_path / "a.xyz").points, pts)


def test_truncated_binary_reports_offset(tmp_path):
    path = tmp_path / "t.ply"
    save_cloud(PointCloud(np.ones((4, 3))), path)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(ParseError) as info:
        load_cloud(path)
    assert info.value.offset is not None


def test_load_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_cloud(tmp_path / "missing.xyz")
    (tmp_path / "empty.xyz").write_text("# nothing\n")
    with pytest.raises(EmptyCloudError):
        load_cloud(tmp_path / "empty.xyz")
    (tmp_path / "bad.xyz").write_text("0 0 0\n1 a 2\n")
    with pytest.raises(ParseError) as info:
        load_cloud(tmp_path / "bad.xyz")
    assert info.value.line == 2
    (tmp_path / "nan.xyz").write_text("0 0 0\nnan 0 0\n")
    with pytest.raises(ParseError):
        load_cloud(tmp_path / "nan.xyz")


def test_cloud_rejects_non_finite_points():
    with pytest.raises(ValueError):
        PointCloud(np.array([[0.0, np.inf, 0.0]]))


# -- voxel downsampling ------------------------------------------------------

def test_voxel_merges_points_in_one_cell():
    out = voxel_downsample(PointCloud(np.array([[0.1, 0.1, 0.1], [0.2, 0.2, 0.2]])), 1.0)
    assert np.allclose(out.points, [[0.15, 0.15, 0.15]], atol=1e-15)


def test_voxel_keeps_points_in_distinct_cells():
    pts = np.array([[0.1, 0.0, 0.0], [1.1, 0.0, 0.0]])
    out = voxel_downsample(PointCloud(pts), 1.0)
    assert np.array_equal(np.sort(out.points, axis=0), pts)


def test_voxel_count_matches_hash_grid():
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 10, (10_000, 3))
    occupied = {tuple(c) for c in np.floor(pts / 0.4).astype(int).tolist()}
    assert len(voxel_downsample(PointCloud(pts), 0.4)) == len(occupied)


def test_voxel_rejects_bad_size():
    with pytest.raises(ValueError):
        voxel_downsample(PointCloud(np.zeros((1, 3))), 0.0)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 200), st.just(3)),
              elements=st.floats(-20, 20, allow_nan=False)),
       st.floats(0.05, 3.0))
def test_voxel_downsample_is_idempotent(pts, voxel):
    once = voxel_downsample(PointCloud(pts), voxel)
    twice = voxel_downsample(once, voxel)
    assert np.allclose(once.points, twice.points, atol=1e-12)


# -- rigid transforms --------------------------------------------------------

def test_identity_leaves_cloud_unchanged():
    pts = np.random.default_rng(2).normal(size=(20, 3))
    assert np.array_equal(apply_transform(PointCloud(pts), RigidTransform.identity()).points, pts)


def test_half_turn_about_z():
    out = apply_transform(PointCloud(np.array([[1.0, 0.0, 0.0]])), RigidTransform.about_z(np.pi))
    assert np.allclose(out.points, [[-1.0, 0.0, 0.0]], atol=1e-12)


def test_transform_then_inverse_restores_points():
    rng = np.random.default_rng(7)
    pts = rng.uniform(-30, 30, (500, 3))
    T = random_transform(rng)
    back = apply_transform(apply_transform(PointCloud(pts), T), invert(T))
    assert np.abs(back.points - pts).max() < 1e-9


def test_compose_and_invert():
    rng = np.random.default_rng(3)
    T = random_transform(rng)
    I = RigidTransform.identity()
    assert np.array_equal(compose(I, T).as_matrix(), T.as_matrix())
    assert np.array_equal(invert(I).as_matrix(), np.eye(4))
    assert np.abs(compose(T, invert(T)).as_matrix() - np.eye(4)).max() < 1e-9
    assert np.abs(compose(invert(T), T).as_matrix() - np.eye(4)).max() < 1e-9


def test_compose_applies_right_operand_first():
    a = RigidTransform.about_z(np.pi / 2)
    b = RigidTransform(np.eye(3), (1.0, 0.0, 0.0))
    p = np.zeros((1, 3))
    assert np.allclose(compose(a, b).apply(p), a.apply(b.apply(p)))
    assert np.allclose((a @ b).apply(p), [[0.0, 1.0, 0.0]])


def test_invalid_rotations_rejected():
    with pytest.raises(InvalidRotationError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(InvalidRotationError):
        RigidTransform(np.eye(3) * 1.001)
    with pytest.raises(InvalidRotationError):
        RigidTransform.from_matrix(np.ones((4, 4)))


def test_rigid_motion_preserves_distances():
    rng = np.random.default_rng(5)
    pts = rng.uniform(-20, 20, (100, 3))
    moved = random_transform(rng).apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=2)
    off = ~np.eye(len(pts), dtype=bool)
    assert np.max(np.abs(d1[off] - d0[off]) / d0[off]) < 1e-9


def test_pose_json_round_trip(tmp_path):
    T = random_transform(np.random.default_rng(9))
    path = tmp_path / "pose.json"
    path.write_text(json.dumps(pose_to_json(T)))
    assert np.array_equal(load_pose(path).as_matrix(), T.as_matrix())
    assert np.array_equal(pose_from_json(pose_to_json(T)).rotation, T.rotation)

import json
import subprocess
import sys

import numpy as np
import pytest

from hierloc.cli import main
from hierloc.pointcloud import PointCloud, RigidTransform, load_cloud, pose_to_json, save_cloud


@pytest.fixture(scope="module")
def scans(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    src = root / "clouds"
    src.mkdir()
    for i in range(3):
        assert main(["synth", "--out", str(src / f"c{i}.ply"), "--seed", str(40 + i),
                     "--extent", "20", "--trees", "25"]) == 0
    poses = {f"c{i}": [50.0 * i, 0.0, 0.0] for i in range(3)}
    (src / "poses.json").write_text(json.dumps(poses))
    assert main(["db", "build", "--input", str(src), "--out", str(root / "db")]) == 0
    return root


def read(path):
    return json.loads(path.read_text())


def test_synth_is_deterministic(scans, tmp_path):
    assert main(["synth", "--out", str(tmp_path / "a.xyz"), "--seed", "40", "--extent", "20",
                 "--trees", "25", "--format", "xyz-text"]) == 0
    a = load_cloud(tmp_path / "a.xyz").points
    b = load_cloud(scans / "clouds" / "c0.ply").points
    assert a.shape == b.shape and np.allclose(a, b, atol=1e-5)


def test_query_finds_itself(scans):
    out = scans / "q.json"
    assert main(["db", "query", "--db", str(scans / "db"), "--cloud", str(scans / "clouds" / "c1.ply"),
                 "--k", "2", "--out", str(out)]) == 0
    res = read(out)
    assert [c["id"] for c in res["candidates"]][0] == "c1" and len(res["candidates"]) == 2


def test_rerank_output(scans):
    out = scans / "r.json"
    assert main(["rerank", "--db", str(scans / "db"), "--query", str(scans / "clouds" / "c2.ply"),
                 "--k", "3", "--out", str(out)]) == 0
    cands = read(out)["candidates"]
    assert cands[0]["id"] == "c2"
    assert sorted(c["retrieval_rank"] for c in cands) == [1, 2, 3]
    for c in cands:
        assert 0 <= c["beta"] <= 1 and len(c["per_scale"]) == 3 and len(c["eigen_iterations"]) == 3
    assert [c["beta"] for c in cands] == sorted((c["beta"] for c in cands), reverse=True)


@pytest.mark.parametrize("method", ["lgr", "ransac"])
def test_register_against_moved_copy(scans, tmp_path, method):
    T = RigidTransform.about_z(0.5, (1.5, -2.0, 0.0))
    cloud = load_cloud(scans / "clouds" / "c0.ply")
    save_cloud(PointCloud(T.apply(cloud.points)), tmp_path / "moved.ply")
    (tmp_path / "gt.json").write_text(json.dumps(pose_to_json(T)))
    out = tmp_path / "reg.json"
    assert main(["register", "--query", str(scans / "clouds" / "c0.ply"), "--target", str(tmp_path / "moved.ply"),
                 "--method", method, "--gt", str(tmp_path / "gt.json"), "--out", str(out)]) == 0
    res = read(out)
    # octants are re-cut after the move, so centroids agree only to about a cell
    assert res["method"] == method and res["success"]
    assert res["rte"] < 2.0 and res["rre"] < 5.0
    assert set(res["timing_ms"]) == {"feat_extract", "metric_loc"}
    assert 0 < res["inlier_ratio"] <= 1


def test_exit_codes(scans, tmp_path, monkeypatch):
    cloud = str(scans / "clouds" / "c0.ply")
    assert main(["db", "query", "--db", str(tmp_path / "nodb"), "--cloud", cloud]) == 3
    assert main(["db", "query", "--db", str(scans / "db"), "--cloud", str(tmp_path / "none.ply")]) == 3
    assert main(["db", "query", "--db", str(scans / "db"), "--cloud", cloud, "--k", "0"]) == 2
    assert main(["db", "build", "--input", str(tmp_path), "--out", str(tmp_path / "db")]) == 3
    bad = tmp_path / "bad.toml"
    bad.write_text("[reg]\ntau_a = -1\n")
    assert main(["db", "query", "--db", str(scans / "db"), "--cloud", cloud, "--config", str(bad)]) == 2
    (tmp_path / "garbage.xyz").write_text("1 2 x\n")
    assert main(["register", "--query", str(tmp_path / "garbage.xyz"), "--target", cloud]) == 3
    monkeypatch.setenv("HIERLOC_THREADS", "many")
    assert main(["bench", "--out", str(tmp_path / "b"), "--queries", "1"]) == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "hierloc.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("hierloc ")

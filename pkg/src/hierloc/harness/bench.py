"""End-to-end benchmark: extract, retrieve, re-rank, register, aggregate.

A dataset is a set of database scans and query scans, each in its own sensor
frame with a known world pose. The synthetic suite scans one large forest map
from a grid of database positions and from randomly placed, randomly yawed
query positions. A directory dataset holds ``database/*.ply``,
``queries/*.ply`` and ``poses.json`` mapping every cloud stem to its 4x4
world-from-sensor pose.
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..config import PipelineConfig
from ..errors import DataError, HierlocError
from ..msgv import rerank
from ..pipeline import featurize
from ..pointcloud import PointCloud, RigidTransform, invert, load_cloud
from ..registration import evaluate_pose, register_features
from ..retrieval import RetrievalResult, build_database, query_topk, recall_at_k
from .scenes import SceneConfig, build_scene, sample_scene
from .timing import StageClock

STAGES = ("feat_extract", "retrieval", "rerank", "metric_loc", "total")
CLOUD_SUFFIXES = (".ply", ".xyz", ".txt")


@dataclass
class Scan:
    id: str
    cloud: PointCloud            # sensor frame
    pose: RigidTransform         # world from sensor
    noise_sigma: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation


@dataclass
class Dataset:
    database: list[Scan]
    queries: list[Scan]


@dataclass
class BenchmarkReport:
    metrics: dict                          # aggregates, deterministic
    timings: dict                          # per-stage mean / std in ms
    config: dict
    records: list[dict] = field(default_factory=list)

    def metric_json(self) -> str:
        """Everything except wall-clock fields, serialised canonically."""
        body = {"metrics": self.metrics, "config": self.config,
                "records": [{k: v for k, v in r.items() if not k.endswith("_ms")} for r in self.records]}
        return json.dumps(body, indent=1, sort_keys=True)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "timings": self.timings, "config": self.config,
                "records": self.records}


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

def synthetic_dataset(cfg: PipelineConfig, scene_cfg: SceneConfig | None = None) -> Dataset:
    """Grid of database scans plus ``cfg.bench.queries`` random queries over one map."""
    b = cfg.bench
    scene_cfg = scene_cfg or SceneConfig(seed=b.seed)
    half_map = b.map_size / 2
    scene = build_scene(scene_cfg, margin=half_map + 5.0)
    n_side = int(math.floor(b.map_size / b.db_spacing + 1e-9)) + 1
    ticks = -half_map + b.db_spacing * np.arange(n_side)
    nodes = np.array([(x, y) for y in ticks for x in ticks])
    database = []
    for i, (x, y) in enumerate(nodes):
        rng = np.random.default_rng([b.seed, 10, i])
        pose = RigidTransform(np.eye(3), (x, y, 0.0))
        world = sample_scene(scene, rng, centre=(x, y), occlusion_arc=0.0, noise_sigma=0.0)
        database.append(Scan(f"db{i:04d}", PointCloud(invert(pose).apply(world), f"db{i:04d}"), pose))
    rng = np.random.default_rng([b.seed, 11])
    queries = []
    for j in range(b.queries):
        node = nodes[rng.integers(len(nodes))]
        xy = node + rng.uniform(-b.max_shift, b.max_shift, 2)
        yaw = rng.uniform(-np.pi, np.pi)
        occlusion = float(rng.uniform(0.0, b.max_occlusion))
        sigma = float(b.noise_sigmas[j % len(b.noise_sigmas)])
        pose = RigidTransform.about_z(yaw, (xy[0], xy[1], 0.0))
        world = sample_scene(scene, np.random.default_rng([b.seed, 12, j]), centre=tuple(xy),
                             occlusion_arc=occlusion, noise_sigma=sigma)
        queries.append(Scan(f"q{j:04d}", PointCloud(invert(pose).apply(world), f"q{j:04d}"), pose, sigma))
    return Dataset(database, queries)


def load_dataset(root) -> Dataset:
    root = Path(root)
    try:
        poses = json.loads((root / "poses.json").read_text())
    except FileNotFoundError:
        raise DataError(f"{root} has no poses.json") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt poses.json: {exc}") from None

    def scans(sub):
        folder = root / sub
        if not folder.is_dir():
            raise DataError(f"{folder} is missing")
        out = []
        for path in sorted(p for p in folder.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES):
            if path.stem not in poses:
                raise DataError(f"no pose for {path.stem!r} in poses.json")
            cloud = load_cloud(path)
            out.append(Scan(path.stem, PointCloud(cloud.points, path.stem),
                            RigidTransform.from_matrix(poses[path.stem])))
        return out

    return Dataset(scans("database"), scans("queries"))


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------

def _worker_count(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("HIERLOC_THREADS")
        workers = int(env) if env and env.strip().isdigit() else 1
    return max(1, workers)


def _register(fq, fp, T_gt, cfg):
    try:
        res = register_features(fq, fp, cfg.reg)
        err = evaluate_pose(res.transform, T_gt)
        return {"rre": err.rre, "rte": err.rte, "success": err.success, "error": ""}
    except (HierlocError, ValueError) as exc:
        # failed registration counts as an identity estimate
        err = evaluate_pose(RigidTransform.identity(), T_gt)
        return {"rre": err.rre, "rte": err.rte, "success": False, "error": f"{type(exc).__name__}: {exc}"}


def _run_query(q: Scan, db, db_scans: dict, cfg: PipelineConfig) -> dict:
    clock = StageClock()
    rec = {"query": q.id, "noise_sigma": q.noise_sigma, "error": ""}
    try:
        fq, _ = clock.run("feat_extract", lambda: featurize(q.cloud, cfg))
        before, _ = clock.run("retrieval", lambda: query_topk(db, fq.global_desc, cfg.bench.top_k, q.id))
        cands = [db.pyramids[db.index_of(i)] for i in before.ids]
        rr, _ = clock.run("rerank", lambda: rerank(fq, cands, cfg.msgv))
    except (HierlocError, ValueError) as exc:
        rec["error"] = f"{type(exc).__name__}: {exc}"
        return rec
    after = RetrievalResult(q.id, [before.ids[i] for i in rr.order],
                            [float(rr.betas[i]) for i in rr.order])
    rec["before_ids"] = before.ids
    rec["after_ids"] = after.ids
    rec["betas"] = [float(b) for b in rr.betas]
    loc = {}
    for stage, res in (("after", after), ("before", before)):
        top = res.ids[0]
        if top not in loc:
            scan = db_scans[top]
            T_gt = invert(scan.pose) @ q.pose
            if stage == "after":
                loc[top], _ = clock.run("metric_loc", lambda: _register(fq, db.pyramids[db.index_of(top)], T_gt, cfg))
            else:
                loc[top] = _register(fq, db.pyramids[db.index_of(top)], T_gt, cfg)
        dist = float(np.linalg.norm(db_scans[top].position - q.position))
        rec[f"{stage}_top"] = top
        rec[f"{stage}_dist"] = dist
        rec[f"{stage}_pr_success"] = dist <= cfg.bench.recall_r
        for key in ("rre", "rte", "success", "error"):
            rec[f"{stage}_reg_{key}"] = loc[top][key]
    for stage in STAGES[:-1]:
        rec[f"{stage}_ms"] = clock.stages[stage].samples_ms[0]
    rec["total_ms"] = sum(rec[f"{s}_ms"] for s in STAGES[:-1])
    return rec


def aggregate(records: list[dict], db, query_positions: dict, cfg: PipelineConfig) -> dict:
    """Report-level metrics, recomputable from the per-query records alone."""
    ok = [r for r in records if not r["error"]]
    out = {"queries": len(records), "query_errors": len(records) - len(ok)}
    for stage in ("before", "after"):
        results = [RetrievalResult(r["query"], r[f"{stage}_ids"], [0.0] * len(r[f"{stage}_ids"])) for r in ok]
        positions = [query_positions[r["query"]] for r in ok]
        for k in cfg.bench.recall_ks:
            out[f"recall@{k}_{stage}"] = recall_at_k(results, db, positions, cfg.bench.recall_r, k) if ok else 0.0
        loc = [r for r in ok if r[f"{stage}_pr_success"]]
        out[f"localised_{stage}"] = len(loc)
        out[f"success_rate_{stage}"] = 100.0 * sum(r[f"{stage}_reg_success"] for r in loc) / len(loc) if loc else 0.0
        out[f"mean_rre_{stage}"] = float(np.mean([r[f"{stage}_reg_rre"] for r in loc])) if loc else None
        out[f"mean_rte_{stage}"] = float(np.mean([r[f"{stage}_reg_rte"] for r in loc])) if loc else None
        out[f"registration_errors_{stage}"] = sum(bool(r[f"{stage}_reg_error"]) for r in loc)
    return out


def recall_curve(records: list[dict], db, query_positions: dict, cfg: PipelineConfig) -> list[tuple]:
    ok = [r for r in records if not r["error"]]
    if not ok:
        return []
    positions = [query_positions[r["query"]] for r in ok]
    rows = []
    for k in range(1, cfg.bench.top_k + 1):
        row = [k]
        for stage in ("before", "after"):
            res = [RetrievalResult(r["query"], r[f"{stage}_ids"], [0.0] * len(r[f"{stage}_ids"])) for r in ok]
            row.append(recall_at_k(res, db, positions, cfg.bench.recall_r, k))
        rows.append(tuple(row))
    return rows


def run_benchmark(dataset, cfg: PipelineConfig | None = None, workers: int | None = None,
                  out_dir=None) -> BenchmarkReport:
    """Benchmark a Dataset, a dataset directory, or (None) the synthetic suite."""
    cfg = (cfg or PipelineConfig()).validate()
    if dataset is None:
        dataset = synthetic_dataset(cfg)
    elif not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    if len(dataset.database) < 1 or not dataset.queries:
        raise DataError("benchmark needs at least one database scan and one query")
    db_clock = StageClock()
    items = []
    for scan in dataset.database:
        feats, _ = db_clock.run("db_extract", lambda: featurize(scan.cloud, cfg))
        items.append((scan.id, feats, scan.position))
    db = build_database(items)
    db_scans = {s.id: s for s in dataset.database}
    n_workers = _worker_count(workers)
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as pool:
            records = list(pool.map(lambda q: _run_query(q, db, db_scans, cfg), dataset.queries))
    else:
        records = [_run_query(q, db, db_scans, cfg) for q in dataset.queries]
    positions = {q.id: q.position for q in dataset.queries}
    metrics = aggregate(records, db, positions, cfg)
    clock = StageClock()
    for r in records:
        for stage in STAGES:
            if f"{stage}_ms" in r:
                clock.add(stage, r[f"{stage}_ms"])
    timings = {**db_clock.summary(), **clock.summary()}
    report = BenchmarkReport(metrics, timings, cfg.to_dict(), records)
    if out_dir is not None:
        write_report(report, out_dir, recall_curve(records, db, positions, cfg))
    return report


# ---------------------------------------------------------------------------
# Output
# ---------------------------------------------------------------------------

CSV_FIELDS = ("query", "noise_sigma", "error", "before_top", "before_dist", "before_pr_success",
              "before_reg_rre", "before_reg_rte", "before_reg_success", "before_reg_error",
              "after_top", "after_dist", "after_pr_success", "after_reg_rre", "after_reg_rte",
              "after_reg_success", "after_reg_error") + tuple(f"{s}_ms" for s in STAGES)


def write_report(report: BenchmarkReport, out_dir, curve=()) -> Path:
    """``report.json`` (everything), ``metrics.json`` (no timings), ``queries.csv``, ``recall.tsv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True))
    (out / "metrics.json").write_text(report.metric_json())
    with open(out / "queries.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for r in report.records:
            writer.writerow(r)
    with open(out / "recall.tsv", "w") as fh:
        fh.write("# k\trecall_before\trecall_after\n")
        for k, b, a in curve:
            fh.write(f"{k}\t{b:.4f}\t{a:.4f}\n")
    return out


def small_config(cfg: PipelineConfig, queries: int, map_size: float | None = None) -> PipelineConfig:
    """Copy of ``cfg`` with a reduced benchmark, for smoke runs."""
    bench = replace(cfg.bench, queries=queries,
                    map_size=cfg.bench.map_size if map_size is None else map_size)
    return replace(cfg, bench=bench).validate()

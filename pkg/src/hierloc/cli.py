"""``hierloc`` command line: synth, db build/query, rerank, register, bench.

Exit codes: 0 success, 2 configuration error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import PRESETS, config_from_dict, load_config
from .errors import ConfigError, DataError, HierlocError
from .msgv import rerank
from .pipeline import featurize
from .harness.timing import StageClock
from .pointcloud import FORMATS, load_cloud, load_pose, pose_to_json, save_cloud
from .registration import evaluate_pose, register_features
from .retrieval import build_database, load_database, query_topk, save_database

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3
CLOUD_SUFFIXES = (".ply", ".xyz", ".txt")


def _threads() -> int | None:
    raw = os.environ.get("HIERLOC_THREADS")
    if raw is None or raw == "":
        return None
    if not raw.strip().isdigit() or int(raw) < 1:
        raise ConfigError(f"HIERLOC_THREADS must be a positive integer, got {raw!r}")
    return int(raw)


def _config(args):
    cfg = load_config(args.config)
    if args.preset:
        data = cfg.to_dict()
        data["preset"] = args.preset
        # the preset only fills values the file left at their defaults
        base = load_config(None).to_dict()
        for section, key in (("msgv", "sigma_d"), ("reg", "tau_a")):
            if data[section][key] == base[section][key]:
                del data[section][key]
        cfg = config_from_dict(data)
    return cfg


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _read_positions(path) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"poses file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt poses file {path}: {exc}") from None
    out = {}
    for key, value in raw.items():
        m = np.asarray(value, dtype=np.float64)
        out[key] = m[:3, 3] if m.shape == (4, 4) else m.reshape(-1)
    return out


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def cmd_synth(args, cfg) -> int:
    from .harness.scenes import SceneConfig, synth_scene
    try:
        scene = SceneConfig(seed=args.seed, extent=args.extent, tree_count=args.trees,
                            viewpoint=args.viewpoint, occlusion_arc=args.occlusion,
                            noise_sigma=args.noise, clutter_fraction=args.clutter,
                            ground_roughness=args.roughness).validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    cloud = synth_scene(scene, args.sample)
    save_cloud(cloud, args.out, args.format)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_db_build(args, cfg) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise DataError(f"input directory not found: {src}")
    paths = sorted(p for p in src.iterdir() if p.suffix.lower() in CLOUD_SUFFIXES)
    if not paths:
        raise DataError(f"no .ply/.xyz/.txt clouds in {src}")
    poses = args.poses or (src / "poses.json" if (src / "poses.json").is_file() else None)
    positions = _read_positions(poses)
    items = []
    for path in paths:
        if positions and path.stem not in positions:
            raise DataError(f"no pose for {path.stem!r} in {poses}")
        items.append((path.stem, featurize(load_cloud(path), cfg), positions.get(path.stem, np.zeros(3))))
    try:
        db = build_database(items)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    save_database(db, args.out)
    print(f"indexed {len(db)} clouds into {args.out}")
    return EXIT_OK


def _retrieve(args, cfg):
    db = load_database(args.db)
    feats = featurize(load_cloud(args.cloud), cfg)
    res = query_topk(db, feats.global_desc, args.k, Path(args.cloud).stem)
    return db, feats, res


def cmd_db_query(args, cfg) -> int:
    _, _, res = _retrieve(args, cfg)
    _emit({"query": res.query_id,
           "candidates": [{"id": i, "similarity": s} for i, s in res.candidates]}, args.out)
    return EXIT_OK


def cmd_rerank(args, cfg) -> int:
    db, feats, res = _retrieve(args, cfg)
    if len(res) == 0:
        _emit({"query": res.query_id, "candidates": []}, args.out)
        return EXIT_OK
    rr = rerank(feats, [db.pyramids[db.index_of(i)] for i in res.ids], cfg.msgv)
    _emit({"query": res.query_id,
           "candidates": [{"id": res.ids[j], "beta": rr.betas[j], "retrieval_rank": j + 1,
                           "similarity": res.similarities[j],
                           "per_scale": rr.reports[j].per_scale,
                           "eigen_iterations": rr.iterations[j]} for j in rr.order]}, args.out)
    return EXIT_OK


def cmd_register(args, cfg) -> int:
    reg = replace(cfg.reg, method=args.method) if args.method else cfg.reg
    clock = StageClock()
    query, target = load_cloud(args.query), load_cloud(args.target)
    fq, _ = clock.run("feat_extract", lambda: featurize(query, cfg))
    fp, _ = clock.run("feat_extract", lambda: featurize(target, cfg))
    res, _ = clock.run("metric_loc", lambda: register_features(fq, fp, reg))
    out = {"transform": pose_to_json(res.transform), "method": reg.method,
           "inliers": res.inlier_count, "inlier_ratio": res.inlier_ratio,
           "correspondences": res.correspondence_count, "candidates": res.candidate_count,
           "iterations": res.iterations_run,
           "timing_ms": {k: sum(v.samples_ms) for k, v in clock.stages.items()}}
    if args.gt:
        err = evaluate_pose(res.transform, load_pose(args.gt))
        out.update(rre=err.rre, rte=err.rte, success=err.success)
    _emit(out, args.out)
    return EXIT_OK


def cmd_bench(args, cfg) -> int:
    from .harness.bench import run_benchmark
    bench = cfg.bench
    if args.seed is not None:
        bench = replace(bench, seed=args.seed)
    if args.queries is not None:
        bench = replace(bench, queries=args.queries)
    if args.map_size is not None:
        bench = replace(bench, map_size=args.map_size)
    cfg = replace(cfg, bench=bench).validate()
    report = run_benchmark(args.dataset, cfg, workers=_threads(), out_dir=args.out)
    m = report.metrics
    for stage in ("before", "after"):
        print(f"{stage:>6}: recall@1 {m[f'recall@1_{stage}']:.1f}  "
              f"success {m[f'success_rate_{stage}']:.1f}%  "
              f"mean RTE {m[f'mean_rte_{stage}']}  mean RRE {m[f'mean_rre_{stage}']}")
    print(f"report written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--preset", choices=PRESETS, help="per-dataset sensitivity and inlier radius")

    p = argparse.ArgumentParser(prog="hierloc", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"hierloc {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic forest scan")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--sample", type=int, default=0, help="independent re-scan index")
    s.add_argument("--extent", type=float, default=30.0)
    s.add_argument("--trees", type=int, default=45)
    s.add_argument("--roughness", type=float, default=1.5)
    s.add_argument("--clutter", type=float, default=0.02)
    s.add_argument("--viewpoint", choices=("ground", "aerial"), default="ground")
    s.add_argument("--occlusion", type=float, default=0.0, help="occluded arc in degrees")
    s.add_argument("--noise", type=float, default=0.0, help="point noise sigma in metres")
    s.add_argument("--format", choices=FORMATS, default="ply-binary-le")
    s.set_defaults(func=cmd_synth)

    db = sub.add_parser("db", help="descriptor database")
    dbsub = db.add_subparsers(dest="db_verb", required=True)
    b = dbsub.add_parser("build", parents=[common], help="index clouds")
    b.add_argument("--input", required=True, help="directory of .ply/.xyz/.txt clouds")
    b.add_argument("--out", required=True, help="database directory")
    b.add_argument("--poses", help="JSON mapping cloud stem to a 4x4 pose or an xyz position "
                                   "(default: poses.json inside --input, if present)")
    b.set_defaults(func=cmd_db_build)
    q = dbsub.add_parser("query", parents=[common], help="top-k retrieval")
    q.add_argument("--db", required=True)
    q.add_argument("--cloud", required=True)
    q.add_argument("--k", type=int, default=20)
    q.add_argument("--out")
    q.set_defaults(func=cmd_db_query)

    r = sub.add_parser("rerank", parents=[common], help="retrieve then re-rank by geometric verification")
    r.add_argument("--db", required=True)
    r.add_argument("--query", dest="cloud", required=True)
    r.add_argument("--k", type=int, default=20)
    r.add_argument("--out")
    r.set_defaults(func=cmd_rerank)

    g = sub.add_parser("register", parents=[common], help="estimate the pose of query in target's frame")
    g.add_argument("--query", required=True)
    g.add_argument("--target", required=True)
    g.add_argument("--method", choices=("lgr", "ransac"))
    g.add_argument("--gt", help="ground-truth 4x4 pose JSON; adds RRE/RTE to the output")
    g.add_argument("--out")
    g.set_defaults(func=cmd_register)

    n = sub.add_parser("bench", parents=[common], help="end-to-end benchmark")
    n.add_argument("--out", required=True, help="report directory")
    n.add_argument("--dataset", help="dataset directory; synthetic suite when omitted")
    n.add_argument("--seed", type=int)
    n.add_argument("--queries", type=int)
    n.add_argument("--map-size", type=float)
    n.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HierlocError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        # remaining ValueErrors come from out-of-range parameters
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

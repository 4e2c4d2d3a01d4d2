"""Global-descriptor database, exact top-k retrieval and Recall@k.

A database on disk is a directory holding ``index.json`` (ids, positions and
byte ranges) next to ``features.hlfp``, the concatenated feature containers of
every entry. Local pyramids travel with the globals because re-ranking and
registration need them.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .descriptors import FeaturePyramid
from .errors import DataError

INDEX_NAME = "index.json"
FEATURES_NAME = "features.hlfp"
INDEX_VERSION = 1
UNIT_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class DescriptorDB:
    ids: list[str]
    globals: np.ndarray            # (n, d) unit rows
    positions: np.ndarray          # (n, 3) ground-truth locations, metres
    pyramids: list[FeaturePyramid]

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.globals.shape[1]

    def index_of(self, entry_id: str) -> int:
        try:
            return self._lookup[entry_id]
        except KeyError:
            raise KeyError(f"no entry {entry_id!r} in database") from None

    @property
    def _lookup(self) -> dict:
        cache = self.__dict__.get("_ids_cache")
        if cache is None:
            cache = {k: i for i, k in enumerate(self.ids)}
            object.__setattr__(self, "_ids_cache", cache)
        return cache


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ids: list[str]                 # best first
    similarities: list[float]      # non-increasing

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def candidates(self) -> list[tuple[str, float]]:
        return list(zip(self.ids, self.similarities))


def build_database(items: Iterable[tuple[str, FeaturePyramid, Sequence[float]]]) -> DescriptorDB:
    """Database from ``(id, pyramid, position)`` triples in insertion order."""
    ids, globs, positions, pyramids = [], [], [], []
    seen = set()
    for entry_id, pyr, pos in items:
        entry_id = str(entry_id)
        if entry_id in seen:
            raise ValueError(f"duplicate database id {entry_id!r}")
        seen.add(entry_id)
        g = np.asarray(pyr.global_desc, dtype=np.float64)
        if globs and len(g) != len(globs[0]):
            raise ValueError(f"global dimension {len(g)} of {entry_id!r} differs from {len(globs[0])}")
        if abs(np.linalg.norm(g) - 1.0) > UNIT_TOL:
            raise ValueError(f"global descriptor of {entry_id!r} is not unit norm")
        pos = np.asarray(pos, dtype=np.float64).reshape(-1)
        if pos.shape != (3,) or not np.all(np.isfinite(pos)):
            raise ValueError(f"position of {entry_id!r} must be a finite 3-vector")
        ids.append(entry_id)
        globs.append(g)
        positions.append(pos)
        pyramids.append(pyr)
    G = np.stack(globs) if globs else np.zeros((0, 0))
    P = np.stack(positions) if positions else np.zeros((0, 3))
    return DescriptorDB(ids, G, P, pyramids)


def query_topk(db: DescriptorDB, query, k: int, query_id: str = "") -> RetrievalResult:
    """Exact cosine ranking over the whole database; equal similarities go by ascending id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(db) == 0:
        return RetrievalResult(query_id, [], [])
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if len(q) != db.dim:
        raise ValueError(f"query dimension {len(q)} does not match database dimension {db.dim}")
    if abs(np.linalg.norm(q) - 1.0) > UNIT_TOL:
        raise ValueError("query descriptor must be unit norm")
    sims = db.globals @ q
    order = np.lexsort((np.asarray(db.ids), -sims))[:k]
    return RetrievalResult(query_id, [db.ids[i] for i in order], [float(sims[i]) for i in order])


def recall_at_k(results: Sequence[RetrievalResult], db: DescriptorDB, query_positions,
                r: float, k: int) -> float:
    """Percentage of queries with at least one of the top ``k`` candidates within ``r`` metres."""
    if k < 1 or not r >= 0:
        raise ValueError("need k >= 1 and r >= 0")
    if len(results) == 0:
        raise ValueError("recall needs at least one query")
    if query_positions is None or len(query_positions) != len(results):
        raise DataError("every query needs a ground-truth position")
    hits = 0
    for res, qpos in zip(results, query_positions):
        if qpos is None:
            raise DataError(f"query {res.query_id!r} has no position")
        qpos = np.asarray(qpos, dtype=np.float64)
        if len(res) < min(k, len(db)):
            raise ValueError(f"result for {res.query_id!r} holds fewer than {k} candidates")
        top = [db.index_of(i) for i in res.ids[:k]]
        if top and np.any(np.linalg.norm(db.positions[top] - qpos, axis=1) <= r):
            hits += 1
    return 100.0 * hits / len(results)


def save_database(db: DescriptorDB, path) -> Path:
    """Write ``index.json`` and ``features.hlfp`` into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for entry_id, pos, pyr in zip(db.ids, db.positions, db.pyramids):
        blob = pyr.to_bytes()
        entries.append({"id": entry_id, "position": [float(v) for v in pos],
                        "offset": offset, "length": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    _atomic_write(out / FEATURES_NAME, b"".join(blobs))
    index = {"version": INDEX_VERSION, "dim": db.dim if len(db) else 0, "entries": entries}
    _atomic_write(out / INDEX_NAME, json.dumps(index, indent=1).encode())
    return out


def load_database(path) -> DescriptorDB:
    root = Path(path)
    try:
        index = json.loads((root / INDEX_NAME).read_text())
        buf = (root / FEATURES_NAME).read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"not a descriptor database: {exc.filename} is missing") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt database index: {exc}") from None
    if index.get("version") != INDEX_VERSION:
        raise DataError(f"unsupported database index version {index.get('version')!r}")
    items = []
    for e in index["entries"]:
        pyr, end = FeaturePyramid.from_bytes(buf, e["offset"])
        if end - e["offset"] != e["length"]:
            raise DataError(f"entry {e['id']!r} length disagrees with its index record")
        items.append((e["id"], pyr, e["position"]))
    return build_database(items)


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)

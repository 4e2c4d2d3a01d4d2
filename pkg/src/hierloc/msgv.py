"""Multi-scale geometric verification for re-ranking retrieval candidates.

For every pyramid level, query features are matched to candidate features by
nearest descriptor, the best matches are scored for pairwise length
consistency, and the leading eigenvector of the consistency matrix gives a
per-correspondence inlier association. The sorted, min-max normalised
eigenvectors of all levels are fused into one fitness score ``beta`` and the
candidates are re-ordered by it.

The fusion is a fixed weighted head-mean instead of a trained network: for
each level it averages the largest ``head_fraction`` of the normalised
eigenvector (zero-padded to the level's correspondence budget).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .descriptors import FeatureLevel, FeaturePyramid

DEFAULT_LAMBDAS = (512, 256, 128)
SIGMA_D = {"cs-wild-places": 5.0, "wild-places": 1.6, "mulran": 0.4}


@dataclass
class MSGVConfig:
    lambdas: tuple[int, ...] = DEFAULT_LAMBDAS
    sigma_d: float = SIGMA_D["wild-places"]
    weights: tuple[float, ...] | None = None  # None -> equal weights over lambdas
    head_fraction: float = 0.25
    tol: float = 1e-8
    max_iter: int = 1000
    scales: tuple[int, ...] | None = None  # 1-based levels to use; None -> all
    # nearest-neighbour search is quadratic in the octant count, so larger
    # levels are thinned to an even spread along the Morton order first
    max_octants: int | None = 2048

    def level_ids(self) -> tuple[int, ...]:
        return self.scales if self.scales is not None else tuple(range(1, len(self.lambdas) + 1))

    def scale_weights(self) -> np.ndarray:
        ids = self.level_ids()
        if self.weights is None:
            return np.full(len(ids), 1.0 / len(ids))
        return np.asarray(self.weights, dtype=np.float64)


class ScaleCorrespondences(NamedTuple):
    level: int
    q_index: np.ndarray     # query feature index per pair
    p_index: np.ndarray     # candidate feature index per pair
    q_centroids: np.ndarray
    p_centroids: np.ndarray
    distances: np.ndarray   # ascending descriptor distance

    def __len__(self) -> int:
        return len(self.distances)


class EigenResult(NamedTuple):
    vector: np.ndarray
    iterations: int
    converged: bool


@dataclass
class ConsistencyArtifacts:
    correspondences: ScaleCorrespondences
    matrix: np.ndarray
    eig: EigenResult
    normalized: np.ndarray
    degenerate: bool = False


@dataclass
class FitnessReport:
    beta: float
    per_scale: list[float] = field(default_factory=list)


@dataclass
class RerankResult:
    order: list[int]                 # candidate positions, best first
    betas: list[float]               # beta per candidate, input order
    reports: list[FitnessReport]     # input order
    iterations: list[list[int]]      # eigen iterations per candidate per scale


# ---------------------------------------------------------------------------

def nearest_neighbours(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Index into ``b`` and Euclidean distance of the nearest row for each row of ``a``.

    Ties go to the lowest index in ``b``.
    """
    bb = np.einsum("ij,ij->i", b, b)
    idx = np.empty(len(a), dtype=np.int64)
    dist = np.empty(len(a))
    for lo in range(0, len(a), chunk):
        blk = a[lo:lo + chunk]
        # the row's own squared norm does not change its argmin
        part = bb[None, :] - 2.0 * (blk @ b.T)
        j = np.argmin(part, axis=1)
        idx[lo:lo + chunk] = j
        d2 = np.einsum("ij,ij->i", blk, blk) + part[np.arange(len(blk)), j]
        dist[lo:lo + chunk] = np.sqrt(np.maximum(d2, 0.0))
    return idx, dist


def thin_level(level: FeatureLevel, cap: int | None) -> FeatureLevel:
    """At most ``cap`` octants, evenly spaced in Morton order (so spread over space)."""
    if cap is None or len(level) <= cap:
        return level
    keep = np.unique(np.linspace(0, len(level) - 1, cap).round().astype(np.int64))
    return FeatureLevel(level.keys[keep], level.centroids[keep], level.descriptors[keep])


def match_scale(fq: FeatureLevel, fp: FeatureLevel, lambda_s: int, level: int = 0) -> ScaleCorrespondences:
    """Nearest-neighbour putative correspondences from query to candidate, best ``lambda_s`` kept."""
    if len(fq) == 0 or len(fp) == 0:
        raise ValueError("match_scale needs non-empty feature sets")
    if lambda_s < 1:
        raise ValueError("lambda_s must be >= 1")
    nn, dist = nearest_neighbours(fq.descriptors, fp.descriptors)
    # stable sort keeps query order among equal distances
    keep = np.argsort(dist, kind="stable")[:lambda_s]
    return ScaleCorrespondences(level, keep, nn[keep], fq.centroids[keep], fp.centroids[nn[keep]], dist[keep])


def consistency_matrix(q: np.ndarray, p: np.ndarray, sigma_d: float) -> np.ndarray:
    """Pairwise length consistency ``max(1 - (|q_i - q_j| - |p_i - p_j|)^2 / sigma_d^2, 0)``.

    ``q`` and ``p`` are the matched centroids, row ``i`` of each forming a pair.
    """
    if not sigma_d > 0:
        raise ValueError("sigma_d must be positive")
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if len(q) < 2 or len(q) != len(p):
        raise ValueError("need at least 2 correspondences with matching q/p counts")
    dq = np.sqrt(np.maximum(_sqdist(q), 0.0))
    dp = np.sqrt(np.maximum(_sqdist(p), 0.0))
    m = np.maximum(1.0 - (dq - dp) ** 2 / sigma_d ** 2, 0.0)
    np.fill_diagonal(m, 1.0)
    return m


def _sqdist(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def leading_eigenvector(matrix: np.ndarray, tol: float = 1e-8, max_iter: int = 1000) -> EigenResult:
    """Power iteration from the uniform vector on a symmetric non-negative matrix."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("matrix must be square")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
        raise ValueError("matrix must be symmetric")
    if not tol > 0:
        raise ValueError("tol must be positive")
    res = leading_eigenvectors(m[None], tol, max_iter)
    return EigenResult(res.vector[0], int(res.iterations[0]), bool(res.converged[0]))


def leading_eigenvectors(mats: np.ndarray, tol: float = 1e-8, max_iter: int = 1000) -> EigenResult:
    """Batched power iteration over a (B, n, n) stack; each matrix stops on its own.

    Matrices padded with all-zero rows/columns keep zero entries there, so
    stacks of differently sized problems can share one call.
    """
    B, n, _ = mats.shape
    # uniform start over the non-padding rows; padding rows stay zero anyway
    v = (np.abs(mats).sum(axis=2) > 0).astype(np.float64)
    nrm = np.linalg.norm(v, axis=1, keepdims=True)
    v = np.divide(v, nrm, out=np.zeros_like(v), where=nrm > 0)
    iters = np.zeros(B, dtype=np.int64)
    done = nrm[:, 0] == 0
    idx = np.flatnonzero(~done)
    active = mats[idx]
    for it in range(1, max_iter + 1):
        if idx.size == 0:
            break
        w = np.matmul(active, v[idx][:, :, None])[:, :, 0]
        nrm = np.linalg.norm(w, axis=1, keepdims=True)
        w = np.divide(w, nrm, out=v[idx].copy(), where=nrm > 0)
        delta = np.abs(w - v[idx]).max(axis=1)
        v[idx] = w
        iters[idx] = it
        stop = (delta < tol) | (nrm[:, 0] == 0)
        if stop.any():
            done[idx[stop]] = True
            idx = idx[~stop]
            active = active[~stop]
    return EigenResult(np.maximum(v, 0.0), iters, done)


def normalize_sorted(v) -> np.ndarray:
    """Sort descending and min-max scale to [0, 1]; constant input maps to all ones."""
    v = np.sort(np.asarray(v, dtype=np.float64).reshape(-1))[::-1]
    if v.size == 0:
        raise ValueError("cannot normalise an empty vector")
    lo, hi = v[-1], v[0]
    if hi - lo <= 0:
        return np.ones_like(v)
    return (v - lo) / (hi - lo)


def fitness_score(normed: Sequence[np.ndarray], lambdas: Sequence[int], weights=None,
                  head_fraction: float = 0.25) -> FitnessReport:
    """Weighted mean over scales of the mean of the top ``ceil(head_fraction * lambda_s)`` entries."""
    if len(normed) != len(lambdas):
        raise ValueError(f"{len(normed)} vectors for {len(lambdas)} scales")
    w = np.full(len(lambdas), 1.0 / len(lambdas)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(w) != len(lambdas) or np.any(w < 0) or not math.isclose(w.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("weights must be non-negative, one per scale, summing to 1")
    if not 0 < head_fraction <= 1:
        raise ValueError("head_fraction must lie in (0, 1]")
    contrib = []
    for vec, lam in zip(normed, lambdas):
        padded = np.zeros(lam)
        vec = np.sort(np.asarray(vec, dtype=np.float64))[::-1][:lam]
        padded[:len(vec)] = vec
        head = max(1, math.ceil(head_fraction * lam))
        contrib.append(float(padded[:head].mean()))
    beta = float(np.clip(np.dot(w, contrib), 0.0, 1.0))
    return FitnessReport(beta, contrib)


def scale_artifacts(fq: FeatureLevel, fp: FeatureLevel, lambda_s: int, sigma_d: float,
                    level: int = 0, tol: float = 1e-8, max_iter: int = 1000) -> ConsistencyArtifacts | None:
    """Full per-scale chain; ``None`` when fewer than two correspondences exist."""
    corr = match_scale(fq, fp, lambda_s, level)
    if len(corr) < 2:
        return None
    m = consistency_matrix(corr.q_centroids, corr.p_centroids, sigma_d)
    eig = leading_eigenvector(m, tol, max_iter)
    normed = normalize_sorted(eig.vector)
    return ConsistencyArtifacts(corr, m, eig, normed, degenerate=bool(np.ptp(eig.vector) == 0))


def rerank(query: FeaturePyramid, candidates: Sequence[FeaturePyramid],
           cfg: MSGVConfig | None = None) -> RerankResult:
    """Score every candidate and stable-sort by descending beta.

    The eigenproblems of all candidates at one scale are solved together in a
    single zero-padded batch.
    """
    cfg = cfg or MSGVConfig()
    if len(candidates) == 0:
        raise ValueError("rerank needs at least one candidate")
    levels = cfg.level_ids()
    lambdas = [cfg.lambdas[s - 1] for s in levels]
    weights = cfg.scale_weights()
    normed = [[np.zeros(0)] * len(levels) for _ in candidates]
    iters = [[0] * len(levels) for _ in candidates]
    for k, (s, lam) in enumerate(zip(levels, lambdas)):
        fq = thin_level(query.level(s), cfg.max_octants)
        corrs = [match_scale(fq, thin_level(c.level(s), cfg.max_octants), lam, s) for c in candidates]
        n = max(len(c) for c in corrs)
        if n < 2:
            continue
        stack = np.zeros((len(candidates), n, n))
        valid = []
        for i, corr in enumerate(corrs):
            if len(corr) >= 2:
                stack[i, :len(corr), :len(corr)] = consistency_matrix(corr.q_centroids, corr.p_centroids, cfg.sigma_d)
                valid.append(i)
        eig = leading_eigenvectors(stack[valid], cfg.tol, cfg.max_iter)
        for j, i in enumerate(valid):
            normed[i][k] = normalize_sorted(eig.vector[j, :len(corrs[i])])
            iters[i][k] = int(eig.iterations[j])
    reports = [fitness_score(nv, lambdas, weights, cfg.head_fraction) for nv in normed]
    betas = [r.beta for r in reports]
    order = sorted(range(len(candidates)), key=lambda i: (-betas[i], i))
    return RerankResult(order, betas, reports, iters)

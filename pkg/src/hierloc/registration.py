"""Keypoint-free coarse-to-fine rigid registration.

Pipeline: coarsest-level descriptors are correlated with a Gaussian kernel,
dual-normalised, and the strongest ``n_c`` entries become patch (superpoint)
pairs. Each patch pair is expanded to its finest-level octants, matched with
dustbin-augmented Sinkhorn, and filtered by confidence and mutual top-k.
Every patch proposes a weighted least-squares transform; the proposal with the
most inliers over all fine correspondences wins and is refined on its inliers.

A 3-point RANSAC over the same correspondences serves as a runtime baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .descriptors import FeaturePyramid
from .errors import DegenerateGeometryError, HierlocError
from .octree import OctreePyramid, patch_ranges
from .pointcloud import RigidTransform

TAU_A = {"cs-wild-places": 1.6, "wild-places": 1.6, "mulran": 0.6}
SUCCESS_RTE = 2.0
SUCCESS_RRE = 5.0


class NoValidPatchError(HierlocError, ValueError):
    """No patch carries the three confident pairs needed for a hypothesis."""


@dataclass
class RegistrationConfig:
    n_c: int = 256
    gamma_z: float = 0.05
    alpha: float = 1.0
    sinkhorn_iters: int = 100
    k_mutual: int = 3
    tau_a: float = TAU_A["wild-places"]
    n_r: int = 5
    # descriptors are unit vectors, so raw similarities sit in a narrow band;
    # the gain (squared) sharpens the transport plan
    feature_gain: float = 48.0
    # coarse octants with fewer finest-level children cannot yield a hypothesis
    min_patch_octants: int = 3
    method: str = "lgr"
    ransac_iters: int = 50_000
    seed: int = 0

    def validate(self) -> "RegistrationConfig":
        if self.n_c < 1 or self.k_mutual < 1 or self.n_r < 1 or self.sinkhorn_iters < 1:
            raise ValueError("n_c, k_mutual, n_r and sinkhorn_iters must be >= 1")
        if not 0 <= self.gamma_z < 1:
            raise ValueError("gamma_z must lie in [0, 1)")
        if not self.tau_a > 0 or not self.feature_gain > 0:
            raise ValueError("tau_a and feature_gain must be positive")
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.min_patch_octants < 0 or self.ransac_iters < 1:
            raise ValueError("min_patch_octants must be >= 0 and ransac_iters >= 1")
        if self.method not in ("lgr", "ransac"):
            raise ValueError(f"unknown registration method {self.method!r}")
        return self


class CoarseMatchSet(NamedTuple):
    q_index: np.ndarray
    p_index: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.scores)


@dataclass
class PatchCorrespondence:
    q_coarse: int
    p_coarse: int
    score: float
    q_indices: np.ndarray     # finest-level octant indices
    p_indices: np.ndarray
    q_centroids: np.ndarray
    p_centroids: np.ndarray
    q_features: np.ndarray
    p_features: np.ndarray
    assignment: np.ndarray | None = None   # Z without dustbin
    fine_q: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    fine_p: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    fine_z: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_pairs(self) -> int:
        return len(self.fine_z)


@dataclass
class RegistrationResult:
    transform: RigidTransform
    inlier_count: int
    inlier_ratio: float
    candidate_count: int
    iterations_run: int
    per_candidate_inliers: list[int] = field(default_factory=list)
    correspondence_count: int = 0


class PoseError(NamedTuple):
    rre: float
    rte: float
    success: bool


# ---------------------------------------------------------------------------
# Coarse matching
# ---------------------------------------------------------------------------

def coarse_correlation(fq: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """``exp(-|a - b|^2)`` between L2-normalised rows of ``fq`` and ``fp``."""
    fq = np.asarray(fq, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    if len(fq) == 0 or len(fp) == 0:
        raise ValueError("coarse_correlation needs non-empty feature sets")
    fq = fq / np.linalg.norm(fq, axis=1, keepdims=True)
    fp = fp / np.linalg.norm(fp, axis=1, keepdims=True)
    d2 = np.maximum(2.0 - 2.0 * (fq @ fp.T), 0.0)
    return np.exp(-d2)


def dual_normalize(G: np.ndarray) -> np.ndarray:
    """Elementwise product of the row-normalised and column-normalised matrix."""
    G = np.asarray(G, dtype=np.float64)
    rows = G.sum(axis=1, keepdims=True)
    cols = G.sum(axis=0, keepdims=True)
    if np.any(rows <= 0) or np.any(cols <= 0):
        raise ValueError("dual_normalize needs every row and column to have positive mass")
    return (G / rows) * (G / cols)


def select_coarse(G: np.ndarray, n_c: int) -> CoarseMatchSet:
    """Global top ``n_c`` entries, ties broken by (row, col)."""
    if n_c < 1:
        raise ValueError("n_c must be >= 1")
    flat = np.asarray(G, dtype=np.float64).ravel()
    if n_c < flat.size:
        # everything tied with the n_c-th largest value joins the exact sort
        kth = np.partition(flat, flat.size - n_c)[flat.size - n_c]
        cand = np.flatnonzero(flat >= kth)
    else:
        cand = np.arange(flat.size)
    order = cand[np.argsort(-flat[cand], kind="stable")][:n_c]
    rows, cols = np.divmod(order, G.shape[1])
    return CoarseMatchSet(rows, cols, flat[order])


# ---------------------------------------------------------------------------
# Patch expansion and fine matching
# ---------------------------------------------------------------------------

def _check_consistent(pyr: OctreePyramid | None, feats: FeaturePyramid) -> None:
    if pyr is None:
        return
    if pyr.num_levels != feats.num_levels or any(
            not np.array_equal(a.keys, b.keys) for a, b in zip(pyr.levels, feats.levels)):
        raise ValueError("feature pyramid does not belong to this octree pyramid")


def expand_patches(pyr_q: OctreePyramid | None, pyr_p: OctreePyramid | None,
                   feats_q: FeaturePyramid, feats_p: FeaturePyramid,
                   coarse: CoarseMatchSet) -> list[PatchCorrespondence]:
    """Gather the finest-level octants under each matched coarse octant.

    Octree keys are stored in the feature pyramids, so the octree pyramids are
    only used to check consistency and may be ``None``.
    """
    _check_consistent(pyr_q, feats_q)
    _check_consistent(pyr_p, feats_p)
    S = feats_q.num_levels
    if feats_p.num_levels != S:
        raise ValueError("query and target pyramids have different level counts")
    fine_q, fine_p = feats_q.level(1), feats_p.level(1)
    rq = patch_ranges(fine_q.keys, feats_q.level(S).keys, S - 1)
    rp = patch_ranges(fine_p.keys, feats_p.level(S).keys, S - 1)
    patches = []
    for i, j, score in zip(coarse.q_index, coarse.p_index, coarse.scores):
        qi = np.arange(*rq[i])
        pj = np.arange(*rp[j])
        if qi.size == 0 or pj.size == 0:
            raise ValueError(f"coarse octant pair ({i}, {j}) has an empty patch")
        patches.append(PatchCorrespondence(
            int(i), int(j), float(score), qi, pj,
            fine_q.centroids[qi], fine_p.centroids[pj],
            fine_q.descriptors[qi], fine_p.descriptors[pj]))
    return patches


def patch_cost(fq: np.ndarray, fp: np.ndarray, d1: int | None = None) -> np.ndarray:
    """Scaled similarity ``fq @ fp.T / sqrt(d1)``."""
    fq = np.asarray(fq, dtype=np.float64)
    fp = np.asarray(fp, dtype=np.float64)
    d1 = fq.shape[1] if d1 is None else d1
    if fq.shape[1] != d1 or fp.shape[1] != d1:
        raise ValueError(f"feature dims {fq.shape[1]}/{fp.shape[1]} do not match d1={d1}")
    return fq @ fp.T / math.sqrt(d1)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        return np.squeeze(np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx, axis=axis)


def sinkhorn_batch(costs: Sequence[np.ndarray], alpha: float, iters: int) -> list[np.ndarray]:
    """Dustbin-augmented log-domain Sinkhorn on several cost matrices at once.

    Each (m, n) cost gains a last row and column of ``alpha``; real rows and
    columns carry unit mass, the dustbin row ``n`` and the dustbin column ``m``.
    Returns the (m + 1, n + 1) assignment of each problem.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not costs:
        return []
    if not math.isfinite(alpha) or any(not np.all(np.isfinite(c)) for c in costs):
        raise ValueError("sinkhorn input must be finite")
    B = len(costs)
    M = max(c.shape[0] for c in costs)
    N = max(c.shape[1] for c in costs)
    ms = np.array([c.shape[0] for c in costs])
    ns = np.array([c.shape[1] for c in costs])
    row_ok = np.arange(M + 1)[None, :] < ms[:, None]
    col_ok = np.arange(N + 1)[None, :] < ns[:, None]
    row_ok[:, M] = True
    col_ok[:, N] = True
    Z = np.full((B, M + 1, N + 1), -np.inf)
    for b, c in enumerate(costs):
        m, n = c.shape
        Z[b, :m, :n] = c
        Z[b, :m, N] = alpha
        Z[b, M, :n] = alpha
        Z[b, M, N] = alpha
    with np.errstate(divide="ignore"):
        log_mu = np.where(row_ok, 0.0, -np.inf)
        log_nu = np.where(col_ok, 0.0, -np.inf)
        log_mu[:, M] = np.log(ns)
        log_nu[:, N] = np.log(ms)
    u = np.zeros((B, M + 1))
    v = np.zeros((B, N + 1))
    with np.errstate(invalid="ignore"):
        for _ in range(iters):
            u = np.where(row_ok, log_mu - _logsumexp(Z + v[:, None, :], axis=2), -np.inf)
            v = np.where(col_ok, log_nu - _logsumexp(Z + u[:, :, None], axis=1), -np.inf)
        P = np.exp(Z + u[:, :, None] + v[:, None, :])
    P = np.nan_to_num(P, nan=0.0)
    out = []
    for b in range(B):
        m, n = ms[b], ns[b]
        full = np.empty((m + 1, n + 1))
        full[:m, :n] = P[b, :m, :n]
        full[:m, n] = P[b, :m, N]
        full[m, :n] = P[b, M, :n]
        full[m, n] = P[b, M, N]
        out.append(full)
    return out


def sinkhorn(C: np.ndarray, alpha: float, iters: int = 100) -> np.ndarray:
    return sinkhorn_batch([np.asarray(C, dtype=np.float64)], alpha, iters)[0]


def fine_matches(Z: np.ndarray, gamma_z: float, k_mutual: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rows, cols, confidences) of entries above ``gamma_z`` that are mutual top-k."""
    Z = np.asarray(Z, dtype=np.float64)
    if not 0 <= gamma_z < 1:
        raise ValueError("gamma_z must lie in [0, 1)")
    if k_mutual < 1:
        raise ValueError("k_mutual must be >= 1")
    m, n = Z.shape
    if m == 0 or n == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0)
    row_top = np.zeros((m, n), dtype=bool)
    kr = min(k_mutual, n)
    rt = np.argsort(-Z, axis=1, kind="stable")[:, :kr]
    row_top[np.arange(m)[:, None], rt] = True
    col_top = np.zeros((m, n), dtype=bool)
    kc = min(k_mutual, m)
    ct = np.argsort(-Z, axis=0, kind="stable")[:kc, :]
    col_top[ct, np.arange(n)[None, :]] = True
    rows, cols = np.nonzero(row_top & col_top & (Z >= gamma_z))
    return rows, cols, Z[rows, cols]


# ---------------------------------------------------------------------------
# Rigid fitting
# ---------------------------------------------------------------------------

def _kabsch_from_moments(H: np.ndarray, qc: np.ndarray, pc: np.ndarray):
    """Batched rotation/translation from cross-covariances (B, 3, 3) and centroids."""
    U, s, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.transpose(Vt, (0, 2, 1)) @ np.transpose(U, (0, 2, 1))))
    d = np.where(d == 0, 1.0, d)
    D = np.zeros_like(H)
    D[:, 0, 0] = 1.0
    D[:, 1, 1] = 1.0
    D[:, 2, 2] = d
    R = np.transpose(Vt, (0, 2, 1)) @ D @ np.transpose(U, (0, 2, 1))
    t = pc - np.einsum("bij,bj->bi", R, qc)
    ok = s[:, 1] > 1e-12 * np.maximum(s[:, 0], 1e-300)
    return R, t, ok


def weighted_kabsch(q, p, w=None) -> RigidTransform:
    """Closed-form minimiser of ``sum w_j |R q_j + t - p_j|^2`` with det(R) = +1."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    w = np.ones(len(q)) if w is None else np.asarray(w, dtype=np.float64).reshape(-1)
    if len(q) != len(p) or len(w) != len(q):
        raise ValueError("q, p and w must have the same length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if len(q) < 3 or w.sum() <= 0:
        raise DegenerateGeometryError("need at least 3 pairs with positive total weight")
    ws = w / w.sum()
    qc = ws @ q
    pc = ws @ p
    H = (q - qc).T @ ((p - pc) * ws[:, None])
    R, t, ok = _kabsch_from_moments(H[None], qc[None], pc[None])
    if not ok[0]:
        raise DegenerateGeometryError("correspondences are collinear or coincident")
    return RigidTransform(R[0], t[0])


def segment_kabsch(q: np.ndarray, p: np.ndarray, w: np.ndarray, seg: np.ndarray, n_seg: int):
    """Weighted Kabsch for each segment of a flat correspondence list.

    Returns (R, t, ok) with ``ok`` false for segments with fewer than three
    weighted pairs or rank-deficient geometry.
    """
    wsum = np.bincount(seg, w, n_seg)
    cnt = np.bincount(seg, (w > 0).astype(np.float64), n_seg)
    safe = np.where(wsum > 0, wsum, 1.0)
    qc = np.stack([np.bincount(seg, w * q[:, a], n_seg) for a in range(3)], axis=1) / safe[:, None]
    pc = np.stack([np.bincount(seg, w * p[:, a], n_seg) for a in range(3)], axis=1) / safe[:, None]
    dq = q - qc[seg]
    dp = p - pc[seg]
    H = np.empty((n_seg, 3, 3))
    for a in range(3):
        for b in range(3):
            H[:, a, b] = np.bincount(seg, w * dq[:, a] * dp[:, b], n_seg) / safe
    R, t, ok = _kabsch_from_moments(H, qc, pc)
    return R, t, ok & (cnt >= 3) & (wsum > 0)


def _residuals(R: np.ndarray, t: np.ndarray, q: np.ndarray, p: np.ndarray) -> np.ndarray:
    """(H, N) residual norms of N pairs under H transforms."""
    diff = np.matmul(q[None], np.swapaxes(R, 1, 2))
    diff += t[:, None, :] - p[None]
    return np.sqrt(np.einsum("hni,hni->hn", diff, diff))


def _score_hypotheses(R, t, q, p, tau, chunk_elems=4_000_000):
    """Inlier counts and mean inlier residuals of each hypothesis."""
    H = len(R)
    counts = np.zeros(H, dtype=np.int64)
    mean_res = np.full(H, np.inf)
    step = max(1, chunk_elems // max(len(q), 1))
    for lo in range(0, H, step):
        res = _residuals(R[lo:lo + step], t[lo:lo + step], q, p)
        inl = res < tau
        c = inl.sum(axis=1)
        counts[lo:lo + step] = c
        s = np.where(inl, res, 0.0).sum(axis=1)
        mean_res[lo:lo + step] = np.where(c > 0, s / np.maximum(c, 1), np.inf)
    return counts, mean_res


def local_to_global(patches: Sequence, tau_a: float, n_r: int = 5) -> RegistrationResult:
    """Per-patch weighted hypotheses, global inlier vote, then refinement on inliers.

    ``patches`` holds :class:`PatchCorrespondence` objects or ``(q, p, z)``
    tuples of fine pairs. Patches with fewer than three pairs propose nothing
    but their pairs still count in the vote.
    """
    if not tau_a > 0:
        raise ValueError("tau_a must be positive")
    if n_r < 1:
        raise ValueError("n_r must be >= 1")
    qs, ps, zs, segs = [], [], [], []
    for i, patch in enumerate(patches):
        q, p, z = ((patch.fine_q, patch.fine_p, patch.fine_z)
                   if isinstance(patch, PatchCorrespondence) else patch)
        q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
        qs.append(q)
        ps.append(np.asarray(p, dtype=np.float64).reshape(-1, 3))
        zs.append(np.asarray(z, dtype=np.float64).reshape(-1))
        segs.append(np.full(len(q), i, dtype=np.int64))
    if not qs:
        raise NoValidPatchError("no patches supplied")
    q, p, z, seg = (np.concatenate(a) for a in (qs, ps, zs, segs))
    n_total = len(z)
    R, t, ok = segment_kabsch(q, p, z, seg, len(qs))
    valid = np.flatnonzero(ok)
    if valid.size == 0:
        raise NoValidPatchError("every patch has fewer than 3 usable correspondences")
    counts, mean_res = _score_hypotheses(R[valid], t[valid], q, p, tau_a)
    # max count, then lower mean residual, then lower patch index
    best = int(np.lexsort((valid, mean_res, -counts))[0])
    per_candidate = np.zeros(len(qs), dtype=np.int64)
    per_candidate[valid] = counts
    best_T = RigidTransform(R[valid[best]], t[valid[best]])
    best_count, best_res = int(counts[best]), float(mean_res[best])

    iterations = 0
    prev_mask = None
    for _ in range(n_r):
        res = _residuals(best_T.rotation[None], best_T.translation[None], q, p)[0]
        inl = res < tau_a
        if inl.sum() < 3 or (prev_mask is not None and np.array_equal(inl, prev_mask)):
            break
        prev_mask = inl
        try:
            cand = weighted_kabsch(q[inl], p[inl], z[inl])
        except DegenerateGeometryError:
            break
        iterations += 1
        c, r = _score_hypotheses(cand.rotation[None], cand.translation[None], q, p, tau_a)
        if c[0] < best_count:
            # refinement lost inliers; keep the previous estimate
            break
        best_T, best_count, best_res = cand, int(c[0]), float(r[0])
    return RegistrationResult(best_T, best_count, best_count / n_total if n_total else 0.0,
                              int(valid.size), iterations, per_candidate.tolist(), n_total)


def ransac_register(q, p, tau_a: float, max_iters: int = 50_000, seed: int = 0,
                    confidence: float | None = None, batch: int = 256) -> RegistrationResult:
    """3-point RANSAC with a Kabsch hypothesis per sample and a final inlier refit.

    Runs ``max_iters`` hypotheses unless every pair is already an inlier or,
    when ``confidence`` is set, the usual adaptive bound is met.
    """
    q = np.asarray(q, dtype=np.float64).reshape(-1, 3)
    p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
    n = len(q)
    if n < 3 or len(p) != n:
        raise DegenerateGeometryError("RANSAC needs at least 3 correspondences")
    rng = np.random.default_rng(seed)
    best_count, best_res = -1, np.inf
    best_T = RigidTransform.identity()
    done = 0
    needed = max_iters
    while done < min(max_iters, needed):
        b = min(batch, min(max_iters, needed) - done)
        idx = np.stack([rng.choice(n, 3, replace=False) for _ in range(b)]) if n < 16 else _sample3(rng, n, b)
        qs, ps = q[idx], p[idx]
        qc, pc = qs.mean(axis=1), ps.mean(axis=1)
        H = np.einsum("bki,bkj->bij", qs - qc[:, None], ps - pc[:, None])
        R, t, ok = _kabsch_from_moments(H, qc, pc)
        done += b
        if not ok.any():
            continue
        R, t = R[ok], t[ok]
        counts, mres = _score_hypotheses(R, t, q, p, tau_a)
        k = int(np.lexsort((mres, -counts))[0])
        if counts[k] > best_count or (counts[k] == best_count and mres[k] < best_res):
            best_count, best_res = int(counts[k]), float(mres[k])
            best_T = RigidTransform(R[k], t[k])
            if confidence is not None and best_count > 0:
                frac = best_count / n
                denom = math.log(max(1e-12, 1.0 - frac ** 3))
                needed = done if frac >= 1 else max(done, int(math.ceil(math.log(1 - confidence) / denom)))
        if best_count == n:
            break
    iterations = done
    if best_count >= 3:
        res = _residuals(best_T.rotation[None], best_T.translation[None], q, p)[0]
        inl = res < tau_a
        try:
            best_T = weighted_kabsch(q[inl], p[inl])
            c, _ = _score_hypotheses(best_T.rotation[None], best_T.translation[None], q, p, tau_a)
            best_count = int(c[0])
        except DegenerateGeometryError:
            pass
    best_count = max(best_count, 0)
    return RegistrationResult(best_T, best_count, best_count / n, iterations, 1, [], n)


def _sample3(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    """``b`` draws of 3 distinct indices in [0, n)."""
    i = rng.integers(0, n, size=b)
    j = rng.integers(0, n - 1, size=b)
    k = rng.integers(0, n - 2, size=b)
    # map j, k onto the remaining indices so the triple has no repeats
    j = j + (j >= i)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k = k + (k >= lo)
    k = k + (k >= hi)
    return np.stack([i, j, k], axis=1)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def rotation_angle_deg(R: np.ndarray) -> float:
    c = (np.trace(R) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def evaluate_pose(T_est: RigidTransform, T_gt: RigidTransform,
                  max_rte: float = SUCCESS_RTE, max_rre: float = SUCCESS_RRE) -> PoseError:
    """Relative rotation error (deg), translation error (m) and strict success test."""
    rre = rotation_angle_deg(T_gt.rotation.T @ T_est.rotation)
    rte = float(np.linalg.norm(T_gt.translation - T_est.translation))
    return PoseError(rre, rte, rte < max_rte and rre < max_rre)


# ---------------------------------------------------------------------------
# End-to-end
# ---------------------------------------------------------------------------

def match_patches(feats_q: FeaturePyramid, feats_p: FeaturePyramid, cfg: RegistrationConfig,
                  pyr_q: OctreePyramid | None = None, pyr_p: OctreePyramid | None = None
                  ) -> list[PatchCorrespondence]:
    """Coarse selection, patch expansion and Sinkhorn fine matching."""
    S = feats_q.num_levels
    G = coarse_correlation(feats_q.level(S).descriptors, feats_p.level(S).descriptors)
    Gn = dual_normalize(G)
    if cfg.min_patch_octants > 0:
        size_q = np.diff(patch_ranges(feats_q.level(1).keys, feats_q.level(S).keys, S - 1), axis=1)[:, 0]
        size_p = np.diff(patch_ranges(feats_p.level(1).keys, feats_p.level(S).keys, S - 1), axis=1)[:, 0]
        Gn = Gn * ((size_q >= cfg.min_patch_octants)[:, None] & (size_p >= cfg.min_patch_octants)[None, :])
    coarse = select_coarse(Gn, cfg.n_c)
    patches = expand_patches(pyr_q, pyr_p, feats_q, feats_p, coarse)
    d1 = feats_q.level(1).dim
    gain2 = cfg.feature_gain ** 2
    costs = [gain2 * patch_cost(pc.q_features, pc.p_features, d1) for pc in patches]
    for pc, Zbar in zip(patches, _sinkhorn_grouped(costs, cfg.alpha, cfg.sinkhorn_iters)):
        Z = Zbar[:-1, :-1]
        pc.assignment = Z
        r, c, conf = fine_matches(Z, cfg.gamma_z, cfg.k_mutual)
        pc.fine_q = pc.q_centroids[r]
        pc.fine_p = pc.p_centroids[c]
        pc.fine_z = conf
    return patches


def _sinkhorn_grouped(costs, alpha, iters, group=64):
    """Run Sinkhorn in batches of similarly sized problems to limit padding."""
    order = sorted(range(len(costs)), key=lambda i: (costs[i].shape[0] * costs[i].shape[1], i))
    out = [None] * len(costs)
    for lo in range(0, len(order), group):
        ids = order[lo:lo + group]
        for i, Z in zip(ids, sinkhorn_batch([costs[i] for i in ids], alpha, iters)):
            out[i] = Z
    return out


def register_features(feats_q: FeaturePyramid, feats_p: FeaturePyramid,
                      cfg: RegistrationConfig | None = None) -> RegistrationResult:
    """Estimate T with ``T(query) ~ target`` from two feature pyramids."""
    cfg = (cfg or RegistrationConfig()).validate()
    patches = match_patches(feats_q, feats_p, cfg)
    if cfg.method == "lgr":
        return local_to_global(patches, cfg.tau_a, cfg.n_r)
    if cfg.method == "ransac":
        q = np.concatenate([pc.fine_q for pc in patches])
        p = np.concatenate([pc.fine_p for pc in patches])
        return ransac_register(q, p, cfg.tau_a, cfg.ransac_iters, cfg.seed)
    raise ValueError(f"unknown registration method {cfg.method!r}")

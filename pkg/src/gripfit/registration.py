"""Rigid point-cloud alignment for instrument initialization: exact nearest
neighbors (k-d tree), Kabsch, congruent-triplet RANSAC, point-to-point ICP,
Chamfer distance and the full instrument fitting pipeline
(RANSAC -> ICP -> coordinate-descent articulation refinement).
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .instrument import InstrumentState, articulate
from .meshutils import point_triangle_distances, sample_surface


@dataclass
class RansacParams:
    iterations: int = 4096
    sample_size: int = 3
    inlier_thresh: float = 0.005  # meters
    seed: int = 0


@dataclass
class IcpParams:
    max_iters: int = 50
    corr_dist: float = 0.010  # meters
    tol: float = 1e-7         # RMSE improvement, meters
    trim_fraction: float = 0.0  # discard this fraction of worst matches


@dataclass
class FitParams:
    ransac: RansacParams = field(default_factory=RansacParams)
    icp: IcpParams = field(default_factory=IcpParams)
    n_surface_samples: int = 2048
    surface_seed: int = 0
    alpha_refine_iters: int = 6


@dataclass
class RegistrationResult:
    rotation: np.ndarray
    translation: np.ndarray
    inlier_rmse: float = 0.0
    fitness: float = 0.0
    converged: bool = True

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        return np.asarray(pts) @ self.rotation.T + self.translation


class NearestNeighborIndex:
    """Exact nearest-neighbor queries over a fixed point set."""

    def __init__(self, points):
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        if len(points) == 0:
            raise ValueError("cannot index an empty point set")
        self.points = points
        self._tree = cKDTree(points)

    def __len__(self):
        return len(self.points)

    def query(self, queries, k=1):
        d, i = self._tree.query(np.asarray(queries, dtype=float), k=k)
        return i, d

    def query_radius_counts(self, queries, r):
        return np.asarray(
            self._tree.query_ball_point(np.asarray(queries, dtype=float),
                                        r, return_length=True))


def nn_query(index, points):
    i, d = index.query(points)
    return i, d


def kabsch(source, target, weights=None):
    """Least-squares rigid transform mapping source onto target."""
    src = np.asarray(source, dtype=float)
    tgt = np.asarray(target, dtype=float)
    if weights is None:
        weights = np.ones(len(src))
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    sc = (src * w[:, None]).sum(axis=0)
    tc = (tgt * w[:, None]).sum(axis=0)
    H = (src - sc).T @ ((tgt - tc) * w[:, None])
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    D = np.diag([1.0, 1.0, d])
    R = Vt.T @ D @ U.T
    t = tc - R @ sc
    return R, t


def chamfer(a, b):
    """Symmetric mean nearest-neighbor distance between two clouds (meters).

    chamfer(a, b) = mean_a min_b ||.|| + mean_b min_a ||.||
    """
    pa = a.points if hasattr(a, "points") else np.asarray(a, dtype=float)
    pb = b.points if hasattr(b, "points") else np.asarray(b, dtype=float)
    if len(pa) == 0 or len(pb) == 0:
        raise ValueError("chamfer distance of an empty cloud is undefined")
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return float(d_ab.mean() + d_ba.mean())


def _score(R, t, src, tgt_tree, thresh):
    d, _ = tgt_tree.query(src @ R.T + t)
    inliers = d < thresh
    n = int(inliers.sum())
    rmse = float(np.sqrt((d[inliers] ** 2).mean())) if n else np.inf
    return n, rmse, inliers


def ransac_align(source, target, params=None):
    """Coarse global rigid registration.

    Hypotheses are congruent 3-point correspondences: a random source
    triplet is matched against target triplets with compatible pairwise
    distances (rejecting mismatches above the inlier threshold), solved by
    Kabsch and scored by inlier count. After the search, the best transform
    is re-fit on its nearest-neighbor inliers. Deterministic for a fixed
    seed; ties resolve by (inliers, -rmse, earliest iteration).
    """
    params = params or RansacParams()
    src = source.points if hasattr(source, "points") else np.asarray(source, dtype=float)
    tgt = target.points if hasattr(target, "points") else np.asarray(target, dtype=float)
    if len(src) < params.sample_size or len(tgt) < params.sample_size:
        raise ValueError("clouds smaller than the RANSAC sample size")
    rng = np.random.default_rng(params.seed)
    tgt_tree = cKDTree(tgt)
    thresh = params.inlier_thresh
    # score hypotheses on a fixed subsample; full refit happens at the end
    score_idx = (np.arange(len(src)) if len(src) <= 256
                 else rng.choice(len(src), size=256, replace=False))
    score_src = src[score_idx]

    best = None  # (n_inliers, -rmse, R, t)
    for _ in range(params.iterations):
        si = rng.choice(len(src), size=3, replace=False)
        s3 = src[si]
        d01 = np.linalg.norm(s3[0] - s3[1])
        d02 = np.linalg.norm(s3[0] - s3[2])
        d12 = np.linalg.norm(s3[1] - s3[2])
        a = tgt[rng.integers(len(tgt))]
        # candidates for the second point at compatible distance from a
        cb = np.asarray(tgt_tree.query_ball_point(a, d01 + thresh), dtype=int)
        if cb.size:
            cb = cb[np.abs(np.linalg.norm(tgt[cb] - a, axis=1) - d01) < thresh]
        if not cb.size:
            continue
        b = tgt[cb[rng.integers(len(cb))]]
        cc = np.asarray(tgt_tree.query_ball_point(a, d02 + thresh), dtype=int)
        if cc.size:
            cc = cc[(np.abs(np.linalg.norm(tgt[cc] - a, axis=1) - d02) < thresh)
                    & (np.abs(np.linalg.norm(tgt[cc] - b, axis=1) - d12) < thresh)]
        if not cc.size:
            continue
        c = tgt[cc[rng.integers(len(cc))]]
        R, t = kabsch(s3, np.stack([a, b, c]))
        n, rmse, _ = _score(R, t, score_src, tgt_tree, thresh)
        if n >= 3 and (best is None or (n, -rmse) > (best[0], best[1])):
            best = (n, -rmse, R, t)
            if n >= 0.95 * len(score_src):
                break

    if best is None:
        return RegistrationResult(np.eye(3), np.zeros(3), np.inf, 0.0, False)
    _, _, R, t = best
    # refit on all inlier correspondences of the winning hypothesis
    for _ in range(2):
        d, idx = tgt_tree.query(src @ R.T + t)
        inl = d < thresh
        if inl.sum() >= 3:
            R, t = kabsch(src[inl], tgt[idx[inl]])
    n, rmse, inl = _score(R, t, src, tgt_tree, thresh)
    return RegistrationResult(R, t, rmse, n / len(src), n >= 3)


def icp(source, target, init=None, params=None):
    """Point-to-point ICP with optional trimming; RMSE is monotone
    non-increasing over accepted iterations."""
    params = params or IcpParams()
    src = source.points if hasattr(source, "points") else np.asarray(source, dtype=float)
    tgt = target.points if hasattr(target, "points") else np.asarray(target, dtype=float)
    init = init or RegistrationResult.identity()
    R = init.rotation.copy()
    t = init.translation.copy()
    tree = cKDTree(tgt)

    prev_rmse = np.inf
    fitness = 0.0
    rmse = np.inf
    for _ in range(params.max_iters):
        moved = src @ R.T + t
        d, idx = tree.query(moved)
        corr = d < params.corr_dist
        if params.trim_fraction > 0 and corr.sum() > 10:
            cutoff = np.quantile(d[corr], 1.0 - params.trim_fraction)
            corr &= d <= cutoff
        n = int(corr.sum())
        if n < 3:
            return RegistrationResult(R, t, rmse, fitness, False)
        rmse = float(np.sqrt((d[corr] ** 2).mean()))
        fitness = n / len(src)
        if prev_rmse - rmse < params.tol:
            break
        prev_rmse = rmse
        R, t = kabsch(src[corr], tgt[idx[corr]])
    return RegistrationResult(R, t, rmse, fitness, True)


def _refine_alpha(eval_fn, alpha0, lo=0.0, hi=1.0, coarse=11, iters=16):
    """1-D articulation refinement: coarse grid then golden-section."""
    grid = np.linspace(lo, hi, coarse)
    vals = [eval_fn(a) for a in grid]
    k = int(np.argmin(vals))
    a, b = grid[max(0, k - 1)], grid[min(coarse - 1, k + 1)]
    phi = (np.sqrt(5.0) - 1.0) / 2.0
    x1 = b - phi * (b - a)
    x2 = a + phi * (b - a)
    f1, f2 = eval_fn(x1), eval_fn(x2)
    for _ in range(iters):
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - phi * (b - a)
            f1 = eval_fn(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + phi * (b - a)
            f2 = eval_fn(x2)
    return float(np.clip(0.5 * (a + b), 0.0, 1.0))


def sample_model_surface(model, alpha, n, seed=0):
    verts = articulate(model, alpha)
    return sample_surface(verts, model.faces(), n, seed=seed)


def fit_instrument(model, obj_cloud, params=None, init_state=None):
    """Recover the 6-DoF pose + articulation of an instrument from its
    segmented world-frame cloud.

    Pipeline: sample the rest-pose model surface, RANSAC global alignment
    (skipped when a warm-start state is given), point-to-point ICP, then a
    few rounds of coordinate descent alternating ICP over (R, t) with a
    golden-section search over alpha on the exact cloud-to-mesh distance. A RANSAC
    failure propagates converged=False with the best-effort state.
    """
    params = params or FitParams()
    obj_pts = obj_cloud.points if hasattr(obj_cloud, "points") else np.asarray(obj_cloud, dtype=float)
    if len(obj_pts) < 3:
        return InstrumentState.identity(), RegistrationResult(
            np.eye(3), np.zeros(3), np.inf, 0.0, False)

    sample_cache = {}

    def samples_at(alpha):
        key = round(float(alpha), 4)
        if key not in sample_cache:
            sample_cache[key] = sample_model_surface(
                model, key, params.n_surface_samples, seed=params.surface_seed)
        return sample_cache[key]

    rest_samples = samples_at(0.0)
    converged = True
    if init_state is not None:
        reg = RegistrationResult(init_state.rotation.copy(),
                                 init_state.translation.copy())
        alpha = float(init_state.articulation)
    else:
        reg = ransac_align(rest_samples, obj_pts, params.ransac)
        converged = reg.converged
        alpha = 0.0

    reg = icp(rest_samples if alpha == 0.0 else samples_at(alpha),
              obj_pts, reg, params.icp)
    converged = converged and reg.converged

    if model.is_articulated:
        n_base = len(model.base_vertices)
        for it in range(params.alpha_refine_iters):
            R, t = reg.rotation, reg.translation
            # exact cloud-to-mesh distance in the model frame: no sampling
            # noise, so the 1-D search resolves alpha to well below 0.01
            local = (obj_pts - t) @ R
            if len(local) > 1024:
                local = local[:: len(local) // 1024 + 1]
            # the base part does not move with alpha: compute it once
            d_base = point_triangle_distances(
                local, model.base_vertices, model.base_faces)

            def obj(a):
                d_mov = point_triangle_distances(
                    local, articulate(model, a)[n_base:], model.moving_faces)
                return float(np.mean(np.minimum(d_base, d_mov)))

            prev = alpha
            if it == 0:
                alpha = _refine_alpha(obj, alpha)
            else:
                lo = max(0.0, alpha - 0.1)
                hi = min(1.0, alpha + 0.1)
                alpha = _refine_alpha(obj, alpha, lo=lo, hi=hi, coarse=5)
            reg = icp(samples_at(alpha), obj_pts, reg, params.icp)
            if abs(alpha - prev) < 5e-4:
                break
    # final polish with a denser sample set: sampling noise limits the
    # rotation accuracy of point-to-point ICP on mostly-smooth bodies
    dense = sample_surface(articulate(model, alpha), model.faces(),
                           4 * params.n_surface_samples,
                           seed=params.surface_seed + 1)
    reg = icp(dense, obj_pts, reg, params.icp)
    state = InstrumentState(reg.rotation, reg.translation, alpha)
    return state, RegistrationResult(reg.rotation, reg.translation,
                                     reg.inlier_rmse, reg.fitness, converged)

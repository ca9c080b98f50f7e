"""Objective terms for the two trajectory-fitting stages.

The public per-term losses (loss_2d, loss_sil, ...) are plain numpy and exist
so each term can be probed in isolation. The stage energies used by the
optimizer live in TrajectoryEnergy: a single differentiable objective over
the full trajectory of both hands (stage II) plus per-frame instrument poses
(stage III), evaluated and differentiated with jax in float64.

Nearest-neighbor correspondences for the point-cloud term, penetration
indicator data, and contact anchor sets are refreshed between outer
optimizer iterations (update_correspondences) and held constant inside each
energy evaluation, so the reported gradient is exact for the function being
minimized at that iteration.
"""

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from . import _jaxcfg  # noqa: F401  (configures float64 before jax use)
import jax
import jax.numpy as jnp

from .geometry import HAND_LABELS, project
from .hand_model import (ABDUCTION_AXIS, FLEXION_AXIS, TWIST_AXIS,
                         _rodrigues_batch, forward, lbs_forward,
                         template_arrays)
from .instrument import articulate, pose_mesh
from .meshutils import (mesh_aabb, point_triangle_distances,
                        points_inside_mesh, vertex_normals)
from .rasterizer import (DEFAULT_SHARPNESS, pixel_grid, rasterize_soft,
                         soft_silhouette_jnp)
from .transforms import geodesic_distance, matrix_to_axis_angle

GM_SIGMA_PX = 10.0          # Geman-McClure scale for 2D residuals
CONTACT_THRESHOLD = 0.005   # anchors: hand vertices within 5 mm (closed)
N_CONTACT_REGIONS = 6       # five fingertips + palm base
_LOG_2PI = float(np.log(2.0 * np.pi))


# ---------------------------------------------------------------------------
# weights and observation containers

@dataclass
class EnergyWeights:
    """Per-term weights; lam_A defaults to 1 - lam_R when unset."""
    lam_2d: float = 0.001
    lam_sil: float = 2.0
    lam_smooth: float = 10.0
    lam_3d: float = 10.0
    lam_theta: float = 0.04
    lam_beta: float = 0.05
    lam_z: float = 1.0
    lam_ja: float = 1.0
    lam_bl: float = 1.0
    lam_palm: float = 1.0
    lam_angle: float = 1.0
    lam_inter: float = 0.0
    lam_sdf: float = 0.0
    lam_R: float = 0.5
    lam_A: float | None = None
    stage: str = "II"

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if name in ("stage", "lam_A"):
                continue
            if v < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.lam_A is not None and self.lam_A < 0:
            raise ValueError("lam_A must be non-negative")
        if self.stage not in ("II", "III"):
            raise ValueError("stage must be 'II' or 'III'")

    @property
    def effective_lam_A(self):
        return (1.0 - self.lam_R) if self.lam_A is None else self.lam_A

    @classmethod
    def stage2(cls):
        return cls(stage="II")

    @classmethod
    def stage3(cls):
        return cls(lam_2d=0.001, lam_sil=2.0, lam_smooth=10.0, lam_3d=10.0,
                   lam_theta=0.04, lam_beta=0.05, lam_z=200.0, lam_ja=1.0,
                   lam_bl=1.0, lam_palm=1.0, lam_angle=1.0, lam_inter=1.0,
                   lam_sdf=10.0, lam_R=0.5, stage="III")


@dataclass
class Keypoints2DObservation:
    pixels: np.ndarray       # (21, 2)
    confidence: np.ndarray   # (21,) in [0, 1]
    visibility: np.ndarray   # (21,) in {0, 1}

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        n = len(self.pixels)
        self.confidence = np.asarray(self.confidence, dtype=float).reshape(n)
        self.visibility = np.asarray(self.visibility, dtype=float).reshape(n)
        if np.any(self.confidence < 0) or np.any(self.confidence > 1):
            raise ValueError("confidences must lie in [0, 1]")


@dataclass
class TrajectoryObservations:
    """Fused per-frame observations consumed by the trajectory energies.

    keypoints/keypoint_vis are indexed (frame, view, hand, joint); the hand
    axis follows `hands`. masks[t][v] is a label image. Per-entity clouds may
    be None on frames where segmentation produced nothing.
    """
    hands: tuple                 # e.g. ("left", "right")
    keypoints: np.ndarray        # (T, V, H, 21, 2)
    keypoint_vis: np.ndarray     # (T, V, H, 21)
    masks: list                  # [t][v] -> (H, W) int labels
    hand_clouds: dict            # hand -> [PointCloud | None] * T
    instruments: tuple = ()
    instr_clouds: dict = field(default_factory=dict)

    @property
    def n_frames(self):
        return self.keypoints.shape[0]

    @property
    def n_views(self):
        return self.keypoints.shape[1]


@dataclass(frozen=True)
class MotionPriorParams:
    """Linear Gaussian encoder over windows of pose trajectories.

    Latent z, mean mu and log-sigma are affine in the flattened window of
    per-joint rotations; sigma = exp(.) keeps it positive. The default prior
    ties z_map to mu_map so z == mu on every trajectory (uninformative: only
    the normalization constant survives).
    """
    window: int
    z_map: np.ndarray            # (L, F)
    mu_map: np.ndarray           # (L, F)
    mu_bias: np.ndarray          # (L,)
    logsig_map: np.ndarray       # (L, F)
    logsig_bias: np.ndarray      # (L,)

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        L, F = np.shape(self.z_map)
        for name in ("mu_map", "logsig_map"):
            if np.shape(getattr(self, name)) != (L, F):
                raise ValueError(f"{name} shape mismatch")
        for name in ("mu_bias", "logsig_bias"):
            if np.shape(getattr(self, name)) != (L,):
                raise ValueError(f"{name} shape mismatch")

    @property
    def latent_dim(self):
        return self.z_map.shape[0]

    @classmethod
    def default(cls, n_joints=15, window=8, latent_dim=8, seed=0):
        F = window * n_joints * 3
        rng = np.random.default_rng(seed)
        m = rng.normal(scale=0.1, size=(latent_dim, F))
        return cls(window, m, m.copy(), np.zeros(latent_dim),
                   np.zeros((latent_dim, F)), np.zeros(latent_dim))

    def encode(self, pose_traj, xp=np):
        """pose_traj (T, J, 3) -> (z, mu, sigma), each (n_windows, L)."""
        T = pose_traj.shape[0]
        W = self.window
        flat = pose_traj.reshape(T, -1)
        if T < W:
            pad = xp.repeat(flat[-1:], W - T, axis=0)
            flat = xp.concatenate([flat, pad], axis=0)
            T = W
        starts = np.arange(T - W + 1)
        idx = starts[:, None] + np.arange(W)[None]       # (Nw, W)
        feats = flat[idx].reshape(len(starts), -1)       # (Nw, W*J*3)
        z = feats @ xp.asarray(self.z_map).T
        mu = feats @ xp.asarray(self.mu_map).T + xp.asarray(self.mu_bias)
        sig = xp.exp(feats @ xp.asarray(self.logsig_map).T
                     + xp.asarray(self.logsig_bias))
        return z, mu, sig


def gaussian_nll(z, mu, sigma):
    """Sum of -log N(z; mu, diag sigma^2) over all entries."""
    z, mu, sigma = (np.asarray(a, dtype=float) for a in (z, mu, sigma))
    return float(np.sum(np.log(sigma) + 0.5 * _LOG_2PI
                        + 0.5 * ((z - mu) / sigma) ** 2))


@dataclass(frozen=True)
class BiomechLimits:
    """Joint-angle hulls and interval bounds; see loss_bio.

    hulls[j] is a convex CCW polygon over (flexion, abduction) in radians.
    Bone intervals index the 20 keypoint bones (child keypoints 1..20).
    Palm curvature covers the 3 interior knuckle-arc angles, palm angular
    distance the 4 angles between adjacent wrist->finger-base bones. The
    twist interval applies to the constrained joint subset (DIP by default).
    """
    hulls: np.ndarray            # (J, K, 2)
    bone_min: np.ndarray         # (20,)
    bone_max: np.ndarray
    curv_min: np.ndarray         # (3,)
    curv_max: np.ndarray
    angdist_min: np.ndarray      # (4,)
    angdist_max: np.ndarray
    twist_min: float
    twist_max: float
    twist_joints: np.ndarray     # indices into the local pose

    def __post_init__(self):
        object.__setattr__(self, "hulls", np.asarray(self.hulls, dtype=float))
        for lo, hi in (("bone_min", "bone_max"), ("curv_min", "curv_max"),
                       ("angdist_min", "angdist_max")):
            a = np.asarray(getattr(self, lo), dtype=float)
            b = np.asarray(getattr(self, hi), dtype=float)
            object.__setattr__(self, lo, a)
            object.__setattr__(self, hi, b)
            if np.any(a > b):
                raise ValueError(f"empty interval in {lo}/{hi}")
        if self.twist_min > self.twist_max:
            raise ValueError("empty twist interval")
        object.__setattr__(self, "twist_joints",
                           np.asarray(self.twist_joints, dtype=int))
        # convexity + CCW: every cross product non-negative
        h = self.hulls
        e = np.roll(h, -1, axis=1) - h
        cr = (e[:, :, 0] * np.roll(e, -1, axis=1)[:, :, 1]
              - e[:, :, 1] * np.roll(e, -1, axis=1)[:, :, 0])
        if np.any(cr < -1e-12):
            raise ValueError("hull polygons must be convex and CCW")

    @classmethod
    def for_template(cls, template, bone_slack=0.3, angle_slack=0.25):
        """Generic limits centered on the template's rest geometry."""
        J = template.n_joints
        rect = np.array([[-0.25, -0.5], [1.9, -0.5], [1.9, 0.5], [-0.25, 0.5]])
        hulls = np.repeat(rect[None], J, axis=0)
        kp = template.joint_regressor @ template.rest_vertices
        par = keypoint_parents(template)
        blen = np.linalg.norm(kp[1:] - kp[par[1:]], axis=1)
        curv, angd = palm_arc_angles(kp)
        return cls(
            hulls=hulls,
            bone_min=blen * (1.0 - bone_slack),
            bone_max=blen * (1.0 + bone_slack),
            curv_min=np.maximum(curv - angle_slack, 0.0),
            curv_max=curv + angle_slack,
            angdist_min=np.maximum(angd - angle_slack, 0.0),
            angdist_max=angd + angle_slack,
            twist_min=-0.35, twist_max=0.35,
            twist_joints=np.arange(2, J, 3),   # distal joint of each finger
        )


PALM_BASE_KEYPOINTS = np.array([1, 4, 7, 10, 13])


def keypoint_parents(template):
    """Parent index of each of the 21 keypoints (wrist = -1)."""
    tree = template.kinematic_tree
    J = template.n_joints
    tips_parent = [j for j in range(1, J + 1)
                   if j not in set(tree[1:])]       # chain ends, finger order
    return np.concatenate([tree, np.asarray(tips_parent, dtype=int)])


def palm_arc_angles(keypoints):
    """(curvature angles (3,), angular distances (4,)) of the palm base."""
    kp = np.asarray(keypoints, dtype=float)
    base = kp[PALM_BASE_KEYPOINTS]
    u = base - kp[0]
    u = u / np.linalg.norm(u, axis=1, keepdims=True)
    angd = np.array([_angle(u[f], u[f + 1]) for f in range(4)])
    v = base[1:] - base[:-1]
    v = v / np.linalg.norm(v, axis=1, keepdims=True)
    curv = np.array([_angle(v[f], v[f + 1]) for f in range(3)])
    return curv, angd


def _angle(a, b):
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


# ---------------------------------------------------------------------------
# elementary penalties

def robust_gm(r, sigma=GM_SIGMA_PX):
    """Geman-McClure rho(r) = sigma^2 r^2 / (r^2 + sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    r2 = np.square(np.asarray(r, dtype=float))
    out = sigma * sigma * r2 / (r2 + sigma * sigma)
    return float(out) if out.ndim == 0 else out


def interval_penalty(x, lo, hi):
    """max(0, lo - x)^2 + max(0, x - hi)^2 -- zero on [lo, hi], C^1."""
    x = np.asarray(x, dtype=float)
    out = np.maximum(0.0, lo - x) ** 2 + np.maximum(0.0, x - hi) ** 2
    return float(out) if out.ndim == 0 else out


def _poly_sq_dist(pts, poly, xp=np):
    """Squared distance from points (..., 2) to a convex CCW polygon (K, 2);
    zero inside."""
    a = poly                                   # (K,2)
    b = xp.concatenate([poly[1:], poly[:1]], axis=0)
    p = pts[..., None, :]                      # (...,1,2)
    e = b - a                                  # (K,2)
    w = p - a                                  # (...,K,2)
    cross = e[:, 0] * w[..., 1] - e[:, 1] * w[..., 0]
    inside = xp.all(cross >= 0, axis=-1)
    tt = (w * e).sum(-1) / (e * e).sum(-1)
    tt = xp.clip(tt, 0.0, 1.0)
    closest = a + tt[..., None] * e
    d2 = ((p - closest) ** 2).sum(-1).min(-1)
    return xp.where(inside, 0.0, d2)


def hull_distance_sq(point, hull):
    """Squared Euclidean distance from a (flexion, abduction) point to the
    convex hull polygon; 0 inside."""
    return float(_poly_sq_dist(np.asarray(point, dtype=float),
                               np.asarray(hull, dtype=float)))


# ---------------------------------------------------------------------------
# per-term losses (numpy reference implementations)

def loss_2d(hand_states, templates, rig, observations, sigma=GM_SIGMA_PX):
    """Sum over hands/frames/views of robustified, visibility-masked
    keypoint reprojection residuals.

    observations[t][v] maps hand name -> Keypoints2DObservation (missing
    entries are simply skipped).
    """
    total = 0.0
    for hand, states in hand_states.items():
        tmpl = templates[hand]
        for t, state in enumerate(states):
            _, kp = forward(tmpl, state)
            for v, (intr, extr) in enumerate(rig.views):
                obs = observations[t][v].get(hand)
                if obs is None:
                    continue
                pix, valid = project(kp.joints, intr, extr)
                r = np.where(valid[:, None], pix - obs.pixels, 0.0)
                r2 = (r ** 2).sum(axis=1)
                rho = sigma * sigma * r2 / (r2 + sigma * sigma)
                total += float((obs.visibility * valid * rho).sum())
    return total


def loss_sil(meshes_by_frame, rig, masks_by_frame, sharpness=DEFAULT_SHARPNESS):
    """Sum over frames/views of the mean |soft silhouette - gt mask|.

    meshes_by_frame[t] is a list of (vertices, faces); masks_by_frame[t][v]
    is a binary (float or bool) image whose shape sets the render resolution.
    """
    total = 0.0
    for meshes, masks in zip(meshes_by_frame, masks_by_frame):
        for (intr, extr), gt in zip(rig.views, masks):
            gt = np.asarray(gt, dtype=float)
            _check_mask_resolution(intr, gt.shape)
            sil = rasterize_soft(meshes, intr, extr,
                                 resolution=gt.shape, sharpness=sharpness)
            total += float(np.abs(sil.values - gt).mean())
    return total


def _check_mask_resolution(intr, shape):
    h, w = shape
    if intr.height * w != intr.width * h:
        raise ValueError("mask resolution does not match camera aspect")


def loss_3d(mesh, cloud):
    """Point-to-plane cloud consistency.

    For each mesh vertex v_i with normal n_i, pair it with its nearest cloud
    point p and accumulate |(p - v_i) . n_i| / N_V.
    """
    verts = np.asarray(mesh.vertices, dtype=float)
    pts = cloud.points if hasattr(cloud, "points") else np.asarray(cloud)
    if len(pts) == 0:
        warnings.warn("loss_3d: empty cloud contributes zero")
        return 0.0
    normals = vertex_normals(verts, mesh.faces)
    _, idx = cKDTree(pts).query(verts)
    dots = ((pts[idx] - verts) * normals).sum(axis=1)
    return float(np.abs(dots).mean())


def loss_smooth(keypoint_trajs, pose_trajs):
    """Sum_h sum_t ||J_{t+1} - J_t||^2 + g(theta_{t+1}, theta_t)^2 with g the
    sum of per-joint geodesic distances."""
    total = 0.0
    for hand, J in keypoint_trajs.items():
        J = np.asarray(J, dtype=float)
        th = np.asarray(pose_trajs[hand], dtype=float)
        if len(J) < 2:
            raise ValueError("loss_smooth needs at least two frames")
        total += float(((J[1:] - J[:-1]) ** 2).sum())
        for t in range(len(th) - 1):
            g = sum(geodesic_distance(th[t, j], th[t + 1, j])
                    for j in range(th.shape[1]))
            total += g * g
    return total


def loss_prior(pose_trajs, shapes, prior, lam_theta, lam_beta):
    """L_z (windowed Gaussian NLL of the prior latent) + pose/shape rest
    regularizers."""
    total = 0.0
    for hand, th in pose_trajs.items():
        th = np.asarray(th, dtype=float)
        z, mu, sig = prior.encode(th)
        total += gaussian_nll(z, mu, sig)
        total += lam_theta * float((th ** 2).sum())
        total += lam_beta * float((np.asarray(shapes[hand]) ** 2).sum())
    return total


def loss_bio(hand_states, templates, limits, weights):
    """Biomechanical plausibility: joint-angle hulls, bone-length / palm /
    twist interval penalties."""
    ja = bl = palm = angle = 0.0
    for hand, states in hand_states.items():
        tmpl = templates[hand]
        par = keypoint_parents(tmpl)
        for state in states:
            th = state.local_pose
            pts = th[:, (FLEXION_AXIS, ABDUCTION_AXIS)]
            ja += sum(hull_distance_sq(pts[j], limits.hulls[j])
                      for j in range(len(th)))
            _, kp = forward(tmpl, state)
            blen = np.linalg.norm(kp.joints[1:] - kp.joints[par[1:]],
                                  axis=1)
            bl += interval_penalty(blen, limits.bone_min,
                                   limits.bone_max).sum()
            curv, angd = palm_arc_angles(kp.joints)
            palm += interval_penalty(curv, limits.curv_min,
                                     limits.curv_max).sum()
            palm += interval_penalty(angd, limits.angdist_min,
                                     limits.angdist_max).sum()
            tw = th[limits.twist_joints, TWIST_AXIS]
            angle += float((tw ** 2).sum())
            angle += interval_penalty(tw, limits.twist_min,
                                      limits.twist_max).sum()
    return (weights.lam_ja * ja + weights.lam_bl * bl
            + weights.lam_palm * palm + weights.lam_angle * angle)


def contact_anchors(hand_mesh, instrument_mesh, region_labels,
                    threshold=CONTACT_THRESHOLD):
    """Hand vertices within `threshold` (closed) of the instrument surface,
    grouped into the 6 anatomical contact regions. Returns a list of index
    arrays, one per region."""
    d = point_triangle_distances(hand_mesh.vertices,
                                 instrument_mesh.vertices,
                                 instrument_mesh.faces)
    close = d <= threshold
    labels = np.asarray(region_labels)
    return [np.nonzero(close & (labels == r))[0]
            for r in range(N_CONTACT_REGIONS)]


def loss_inter(hand_mesh, instrument_mesh, lam_R, region_labels,
               threshold=CONTACT_THRESHOLD):
    """lam_R * L_R + (1 - lam_R) * L_A.

    L_A sums, over the 6 contact regions, the mean surface distance of that
    region's anchor vertices; L_R sums, over hand vertices inside the
    instrument, their distance to the surface.
    """
    d = point_triangle_distances(hand_mesh.vertices,
                                 instrument_mesh.vertices,
                                 instrument_mesh.faces)
    inside = points_inside_mesh(hand_mesh.vertices,
                                instrument_mesh.vertices,
                                instrument_mesh.faces)
    L_R = float(d[inside].sum())
    labels = np.asarray(region_labels)
    close = d <= threshold
    L_A = 0.0
    for r in range(N_CONTACT_REGIONS):
        sel = close & (labels == r)
        if np.any(sel):
            L_A += float(d[sel].mean())
    return lam_R * L_R + (1.0 - lam_R) * L_A


# ---------------------------------------------------------------------------
# signed distance field

@dataclass(frozen=True)
class SdfGrid:
    origin: np.ndarray   # (3,) world position of voxel (0,0,0)
    voxel: float
    values: np.ndarray   # (nx, ny, nz), negative inside

    def __post_init__(self):
        object.__setattr__(self, "origin",
                           np.asarray(self.origin, dtype=float).reshape(3))
        object.__setattr__(self, "values",
                           np.asarray(self.values, dtype=float))
        if self.voxel <= 0:
            raise ValueError("voxel size must be positive")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("SDF values must be finite")

    @property
    def dims(self):
        return self.values.shape


def build_sdf(vertices, faces, voxel_size=0.004, padding=0.01, bounds=None):
    """Voxelized signed distance field over the mesh AABB plus padding.

    `bounds` optionally fixes the box (lo, hi) so grids built for different
    articulations share dims/origin.
    """
    if voxel_size <= 0:
        raise ValueError("voxel size must be positive")
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    if len(v) < 4 or len(f) < 4:
        raise ValueError("degenerate mesh for SDF")
    if bounds is None:
        lo, hi = mesh_aabb(v)
    else:
        lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    origin = lo - padding
    dims = np.ceil((hi - lo + 2 * padding) / voxel_size).astype(int) + 1
    axes = [origin[k] + voxel_size * np.arange(dims[k]) for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    d = point_triangle_distances(pts, v, f)
    sign = np.where(points_inside_mesh(pts, v, f), -1.0, 1.0)
    return SdfGrid(origin, float(voxel_size), (sign * d).reshape(tuple(dims)))


def _sdf_trilinear(origin, voxel, values, pts, xp=np):
    """Trilinear SDF lookup; queries outside the grid return the clamped
    boundary value plus the distance to the grid box (always positive
    there)."""
    dims = values.shape
    rel = (pts - origin) / voxel
    hi = xp.asarray([d - 1 - 1e-9 for d in dims])
    cl = xp.clip(rel, 0.0, hi)
    i0 = xp.floor(cl).astype(int)
    fr = cl - i0
    # xp.minimum guards the +1 corner on the boundary cell
    i1 = xp.minimum(i0 + 1, xp.asarray([d - 1 for d in dims]))

    def at(ix, iy, iz):
        return values[ix, iy, iz]

    c = 0.0
    for dx, wx in ((0, 1 - fr[..., 0]), (1, fr[..., 0])):
        for dy, wy in ((0, 1 - fr[..., 1]), (1, fr[..., 1])):
            for dz, wz in ((0, 1 - fr[..., 2]), (1, fr[..., 2])):
                ix = i1[..., 0] if dx else i0[..., 0]
                iy = i1[..., 1] if dy else i0[..., 1]
                iz = i1[..., 2] if dz else i0[..., 2]
                c = c + wx * wy * wz * at(ix, iy, iz)
    out_sq = ((rel - cl) ** 2).sum(-1) * (voxel * voxel)
    return c + xp.sqrt(out_sq + 1e-24)


def sdf_query(grid, pts):
    """Signed distance at world points (same frame as the grid)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    return _sdf_trilinear(grid.origin, grid.voxel, grid.values, pts, xp=np)


def loss_sdf(hand_mesh, grid):
    """Sum over hand vertices of max(0, -phi(v))^2."""
    phi = sdf_query(grid, hand_mesh.vertices)
    return float((np.maximum(0.0, -phi) ** 2).sum())


# ---------------------------------------------------------------------------
# parameter packing

HAND_PARAMS_PER_FRAME = 51   # 45 pose + 3 orient + 3 translation
INSTR_PARAMS_PER_FRAME = 7   # 3 rotation increment + 3 translation + 1 raw alpha


def pack_hand_trajectory(states_by_hand, hands):
    """Flatten {hand: [HandState] * T} -> x (per hand: beta, then per frame
    theta/phi/tau). Shapes are shared across the trajectory (frame 0's)."""
    parts = []
    for hand in hands:
        states = states_by_hand[hand]
        parts.append(np.asarray(states[0].shape, dtype=float))
        for s in states:
            parts.append(np.asarray(s.local_pose, dtype=float).ravel())
            parts.append(np.asarray(s.global_orient, dtype=float))
            parts.append(np.asarray(s.translation, dtype=float))
    return np.concatenate(parts)


def unpack_hand_trajectory(x, n_hands, n_frames, n_joints=15, xp=np):
    """Inverse of pack_hand_trajectory -> (beta (H,10), theta (H,T,J,3),
    phi (H,T,3), tau (H,T,3))."""
    per_hand = 10 + n_frames * HAND_PARAMS_PER_FRAME
    betas, thetas, phis, taus = [], [], [], []
    for h in range(n_hands):
        blk = x[h * per_hand:(h + 1) * per_hand]
        betas.append(blk[:10])
        fr = blk[10:].reshape(n_frames, HAND_PARAMS_PER_FRAME)
        thetas.append(fr[:, :45].reshape(n_frames, n_joints, 3))
        phis.append(fr[:, 45:48])
        taus.append(fr[:, 48:51])
    return (xp.stack(betas), xp.stack(thetas), xp.stack(phis),
            xp.stack(taus))


def hand_block_size(n_hands, n_frames):
    return n_hands * (10 + n_frames * HAND_PARAMS_PER_FRAME)


def states_from_vector(x, hands, templates, n_frames):
    """Rebuild {hand: [HandState]} from a packed vector."""
    from .hand_model import HandState
    beta, theta, phi, tau = unpack_hand_trajectory(
        np.asarray(x, dtype=float), len(hands), n_frames)
    out = {}
    for h, hand in enumerate(hands):
        out[hand] = [HandState(theta[h, t], beta[h], phi[h, t], tau[h, t],
                               handedness=templates[hand].handedness)
                     for t in range(n_frames)]
    return out


def pack_instrument_trajectory(states_by_slot, slots):
    """Per slot, per frame: zero rotation increment, translation, logit
    alpha. The reference rotations are held by TrajectoryEnergy."""
    parts = []
    for slot in slots:
        for st in states_by_slot[slot]:
            a = np.clip(st.articulation, 1e-4, 1.0 - 1e-4)
            parts.append(np.zeros(3))
            parts.append(np.asarray(st.translation, dtype=float))
            parts.append([np.log(a / (1.0 - a))])
    return np.concatenate(parts) if parts else np.zeros(0)


# ---------------------------------------------------------------------------
# differentiable helpers (jax)

def _vertex_normals_jnp(verts, faces):
    fn = jnp.cross(verts[faces[:, 1]] - verts[faces[:, 0]],
                   verts[faces[:, 2]] - verts[faces[:, 0]])
    vn = jnp.zeros_like(verts)
    for k in range(3):
        vn = vn.at[faces[:, k]].add(fn)
    norm = jnp.linalg.norm(vn, axis=1, keepdims=True)
    return vn / jnp.maximum(norm, 1e-12)


def _geodesic_sq_sum_jnp(rots_a, rots_b):
    """g^2 where g = sum_j geodesic(Ra_j, Rb_j); rots (..., J, 3, 3)."""
    tr = jnp.einsum("...ab,...ab->...", rots_a, rots_b)
    u = jnp.clip((3.0 - tr) / 4.0, 0.0, 1.0)
    ang = 2.0 * jnp.arcsin(jnp.sqrt(u + 1e-18))
    g = ang.sum(axis=-1)
    return (g * g).sum()


def _rodrigues_jnp(rvec):
    return _rodrigues_batch(rvec.reshape(1, 3), jnp)[0]


# ---------------------------------------------------------------------------
# trajectory energies

class TrajectoryEnergy:
    """Differentiable stage-II / stage-III objective over a trajectory.

    Hands are always present; passing instrument models activates the
    stage-III terms (union silhouette, instrument cloud alignment,
    interaction, SDF). Callable as objective(x) -> (value, gradient) for
    optim.minimize. Call update_correspondences(x) between outer iterations
    to refresh nearest-neighbor pairings, penetration data, contact anchors
    and the instrument reference rotations (the latter returns a rebased x).
    """

    def __init__(self, templates, observations, rig, weights,
                 prior=None, limits=None, instruments=None,
                 init_instrument_states=None, sil_scale=4,
                 sharpness=DEFAULT_SHARPNESS, sdf_voxel=0.005,
                 gm_sigma=GM_SIGMA_PX):
        self.hands = tuple(observations.hands)
        self.templates = templates
        self.observations = observations
        self.rig = rig
        self.weights = weights
        self.sharpness = float(sharpness)
        self.gm_sigma = float(gm_sigma)
        self.sil_scale = int(sil_scale)
        self.sdf_voxel = float(sdf_voxel)
        self.prior = prior or MotionPriorParams.default()
        self.limits = limits or BiomechLimits.for_template(
            templates[self.hands[0]])
        self.instruments = instruments or {}
        self.slots = tuple(observations.instruments) if instruments else ()
        T = observations.n_frames
        V = observations.n_views
        H = len(self.hands)
        self.n_frames, self.n_views, self.n_hands = T, V, H
        self.n_hand_params = hand_block_size(H, T)
        self.n_params = self.n_hand_params + len(self.slots) * T * \
            INSTR_PARAMS_PER_FRAME

        self._tmpl_arrays = []
        self._faces = []
        for hand in self.hands:
            arrs = template_arrays(templates[hand])
            self._tmpl_arrays.append(tuple(
                jnp.asarray(a) if k < 5 else a for k, a in enumerate(arrs)))
            self._faces.append(np.asarray(templates[hand].faces))
        self.n_verts = len(templates[self.hands[0]].rest_vertices)

        # camera stacks
        self._R = jnp.asarray([e.rotation for _, e in rig.views])
        self._t = jnp.asarray([e.translation for _, e in rig.views])
        intr = [i for i, _ in rig.views]
        self._fx = jnp.asarray([i.fx for i in intr])
        self._fy = jnp.asarray([i.fy for i in intr])
        self._cx = jnp.asarray([i.cx for i in intr])
        self._cy = jnp.asarray([i.cy for i in intr])
        s = self.sil_scale
        for i in intr:
            if i.height % s or i.width % s:
                raise ValueError("sil_scale must divide the resolution")
        self._sil_res = (intr[0].height // s, intr[0].width // s)
        si = [i.scaled(1.0 / s) for i in intr]
        self._sfx = jnp.asarray([i.fx for i in si])
        self._sfy = jnp.asarray([i.fy for i in si])
        self._scx = jnp.asarray([i.cx for i in si])
        self._scy = jnp.asarray([i.cy for i in si])
        self._pix = jnp.asarray(pixel_grid(self._sil_res))

        # observations as arrays (hand axis first)
        self._kp = jnp.asarray(
            np.transpose(observations.keypoints, (2, 0, 1, 3, 4)))
        self._vis = jnp.asarray(
            np.transpose(observations.keypoint_vis, (2, 0, 1, 3)))
        self._gt_sil = jnp.asarray(self._downsampled_masks())

        # mutable per-outer-iteration data
        self._corr = np.zeros((H, T, self.n_verts, 3))
        self._corr_w = np.zeros((H, T))
        self._instr_consts = []
        self._instr_corr = []
        self._instr_corr_w = []
        self._sdf_vals = []
        self._sdf_meta = []
        self._base_rot = {}
        self._sdf_cache = {}
        if self.slots:
            self._setup_instruments(init_instrument_states)
        self._anchor_idx = np.zeros(
            (len(self.slots), H, T, N_CONTACT_REGIONS, 1), dtype=int)
        self._anchor_w = np.zeros(
            (len(self.slots), H, T, N_CONTACT_REGIONS, 1))
        self.lam_R_current = weights.lam_R

        self._vg = jax.jit(jax.value_and_grad(self._energy, has_aux=True))

    # -- setup ----------------------------------------------------------

    def _downsampled_masks(self):
        s = self.sil_scale
        out = np.zeros((self.n_frames, self.n_views) + self._sil_res)
        for t in range(self.n_frames):
            for v in range(self.n_views):
                m = np.asarray(self.observations.masks[t][v])
                if self.slots:
                    b = (m > 0).astype(float)
                else:
                    b = np.isin(m, HAND_LABELS).astype(float)
                h, w = b.shape
                out[t, v] = b.reshape(h // s, s, w // s, s).mean(axis=(1, 3))
        return out

    def _setup_instruments(self, init_states):
        T = self.n_frames
        for slot in self.slots:
            model = self.instruments[slot]
            consts = {
                "base": jnp.asarray(model.base_vertices),
                "faces": np.asarray(model.faces()),
                "n_base": len(model.base_vertices),
            }
            if model.is_articulated:
                rest = model.rest_relative_pose
                mx = model.max_relative_pose
                omega = matrix_to_axis_angle(rest.rotation.T @ mx.rotation)
                consts["local"] = jnp.asarray(
                    (model.moving_vertices - rest.translation)
                    @ rest.rotation)
                consts["R_rest"] = jnp.asarray(rest.rotation)
                consts["omega"] = jnp.asarray(omega)
                consts["t_rest"] = jnp.asarray(rest.translation)
                consts["t_max"] = jnp.asarray(mx.translation)
                lo0, hi0 = mesh_aabb(articulate(model, 0.0))
                lo1, hi1 = mesh_aabb(articulate(model, 1.0))
                consts["bounds"] = (np.minimum(lo0, lo1),
                                    np.maximum(hi0, hi1))
            else:
                consts["bounds"] = mesh_aabb(model.base_vertices)
            self._instr_consts.append(consts)
            nV = len(model.base_vertices) + (
                len(model.moving_vertices) if model.is_articulated else 0)
            self._instr_corr.append(np.zeros((T, nV, 3)))
            self._instr_corr_w.append(np.zeros(T))
            states = init_states[slot]
            self._base_rot[slot] = np.stack([s.rotation for s in states])
            grid0 = self._grid_for(slot, 0.0)
            self._sdf_meta.append((jnp.asarray(grid0.origin), grid0.voxel))
            self._sdf_vals.append(np.repeat(grid0.values[None], T, axis=0))

    def _grid_for(self, slot, alpha):
        key = (slot, round(float(alpha), 2))
        if key not in self._sdf_cache:
            model = self.instruments[slot]
            consts = self._instr_consts[self.slots.index(slot)]
            verts = articulate(model, key[1])
            self._sdf_cache[key] = build_sdf(
                verts, model.faces(), self.sdf_voxel, padding=0.01,
                bounds=consts["bounds"])
        return self._sdf_cache[key]

    # -- per-iteration refresh -------------------------------------------

    def update_correspondences(self, x):
        """Refresh NN pairings / anchors / penetration data / instrument
        reference rotations at x. Returns the (possibly rebased) x."""
        x = np.asarray(x, dtype=float).copy()
        beta, theta, phi, tau = unpack_hand_trajectory(
            x[:self.n_hand_params], self.n_hands, self.n_frames)
        hand_verts = np.zeros((self.n_hands, self.n_frames, self.n_verts, 3))
        for h in range(self.n_hands):
            for t in range(self.n_frames):
                v, _ = lbs_forward(
                    template_arrays(self.templates[self.hands[h]]),
                    theta[h, t], beta[h], phi[h, t], tau[h, t], xp=np)
                hand_verts[h, t] = v
            clouds = self.observations.hand_clouds[self.hands[h]]
            for t, cloud in enumerate(clouds):
                pts = None if cloud is None else np.asarray(cloud.points)
                if pts is None or len(pts) == 0:
                    self._corr_w[h, t] = 0.0
                    continue
                _, idx = cKDTree(pts).query(hand_verts[h, t])
                self._corr[h, t] = pts[idx]
                self._corr_w[h, t] = 1.0

        if self.slots:
            x = self._update_instrument_data(x, hand_verts)
        return x

    def _update_instrument_data(self, x, hand_verts):
        T = self.n_frames
        blk = x[self.n_hand_params:].reshape(
            len(self.slots), T, INSTR_PARAMS_PER_FRAME)
        from .transforms import axis_angle_to_matrix
        for o, slot in enumerate(self.slots):
            model = self.instruments[slot]
            clouds = self.observations.instr_clouds.get(slot,
                                                        [None] * T)
            for t in range(T):
                delta, tr, a_raw = blk[o, t, :3], blk[o, t, 3:6], blk[o, t, 6]
                R = self._base_rot[slot][t] @ axis_angle_to_matrix(delta)
                self._base_rot[slot][t] = R
                blk[o, t, :3] = 0.0
                alpha = float(1.0 / (1.0 + np.exp(-a_raw)))
                verts_l = articulate(model, alpha)
                verts_w = verts_l @ R.T + tr
                cloud = clouds[t]
                pts = None if cloud is None else np.asarray(cloud.points)
                if pts is None or len(pts) == 0:
                    self._instr_corr_w[o][t] = 0.0
                else:
                    _, idx = cKDTree(pts).query(verts_w)
                    self._instr_corr[o][t] = pts[idx]
                    self._instr_corr_w[o][t] = 1.0
                grid = self._grid_for(slot, alpha)
                self._sdf_vals[o][t] = grid.values
                for h in range(self.n_hands):
                    local = (hand_verts[h, t] - tr) @ R
                    d = point_triangle_distances(
                        local, verts_l, model.faces())
                    labels = self.templates[self.hands[h]].region_labels
                    close = d <= CONTACT_THRESHOLD
                    self._set_anchors(o, h, t, close, labels)
        x[self.n_hand_params:] = blk.ravel()
        return x

    def _set_anchors(self, o, h, t, close, labels):
        sets = [np.nonzero(close & (labels == r))[0]
                for r in range(N_CONTACT_REGIONS)]
        amax = max(1, max(len(s) for s in sets))
        if amax > self._anchor_idx.shape[-1]:
            grow = amax - self._anchor_idx.shape[-1]
            pad = [(0, 0)] * 4 + [(0, grow)]
            self._anchor_idx = np.pad(self._anchor_idx, pad)
            self._anchor_w = np.pad(self._anchor_w, pad)
        self._anchor_idx[o, h, t] = 0
        self._anchor_w[o, h, t] = 0.0
        for r, s in enumerate(sets):
            self._anchor_idx[o, h, t, r, :len(s)] = s
            self._anchor_w[o, h, t, r, :len(s)] = 1.0

    # -- evaluation --------------------------------------------------------

    def _aux_args(self):
        return (jnp.asarray(self._corr), jnp.asarray(self._corr_w),
                tuple(jnp.asarray(c) for c in self._instr_corr),
                tuple(jnp.asarray(w) for w in self._instr_corr_w),
                tuple(jnp.asarray(v) for v in self._sdf_vals),
                tuple(jnp.asarray(self._base_rot[s]) for s in self.slots),
                jnp.asarray(self._anchor_idx), jnp.asarray(self._anchor_w),
                jnp.asarray(self.lam_R_current))

    def __call__(self, x):
        (val, _), grad = self._vg(jnp.asarray(x), *self._aux_args())
        return float(val), np.asarray(grad)

    def breakdown(self, x):
        """Per-term values (unweighted) at x."""
        (_, terms), _ = self._vg(jnp.asarray(x), *self._aux_args())
        return {k: float(v) for k, v in terms.items()}

    def value(self, x):
        (val, _), _ = self._vg(jnp.asarray(x), *self._aux_args())
        return float(val)

    # the whole objective; traced by jax
    def _energy(self, x, corr, corr_w, icorr, icorr_w, sdf_vals, base_rot,
                anchor_idx, anchor_w, lam_R):
        w = self.weights
        H, T, V = self.n_hands, self.n_frames, self.n_views
        beta, theta, phi, tau = unpack_hand_trajectory(
            x[:self.n_hand_params], H, T, xp=jnp)

        verts, joints = [], []
        for h in range(H):
            arrs = self._tmpl_arrays[h]
            bh = beta[h]

            def fk(th, ph, ta, arrs=arrs, bh=bh):
                return lbs_forward(arrs, th, bh, ph, ta, xp=jnp)

            v, j = jax.vmap(fk)(theta[h], phi[h], tau[h])
            verts.append(v)
            joints.append(j)
        verts = jnp.stack(verts)     # (H,T,Vn,3)
        joints = jnp.stack(joints)   # (H,T,21,3)

        # instruments
        instr_world = []
        instr_alpha = []
        instr_Rt = []
        if self.slots:
            blk = x[self.n_hand_params:].reshape(
                len(self.slots), T, INSTR_PARAMS_PER_FRAME)
            for o in range(len(self.slots)):
                c = self._instr_consts[o]
                delta, tr = blk[o, :, :3], blk[o, :, 3:6]
                alpha = jax.nn.sigmoid(blk[o, :, 6])
                Rinc = _rodrigues_batch(delta, jnp)         # (T,3,3)
                R = jnp.einsum("tab,tbc->tac", base_rot[o], Rinc)

                def posed(a, Rt, tt, c=c):
                    vl = self._articulate_jnp(c, a)
                    return vl @ Rt.T + tt, vl

                vw, vl = jax.vmap(posed)(alpha, R, tr)
                instr_world.append(vw)
                instr_alpha.append(alpha)
                instr_Rt.append((R, tr))

        # L_2d: robustified keypoint reprojection
        cam = jnp.einsum("vab,htkb->htvka", self._R, joints) + \
            self._t[None, None, :, None, :]
        z = jnp.where(jnp.abs(cam[..., 2]) > 1e-9, cam[..., 2], 1e-9)
        u = self._fx[None, None, :, None] * cam[..., 0] / z + \
            self._cx[None, None, :, None]
        vpix = self._fy[None, None, :, None] * cam[..., 1] / z + \
            self._cy[None, None, :, None]
        res2 = (u - self._kp[..., 0]) ** 2 + (vpix - self._kp[..., 1]) ** 2
        s2 = self.gm_sigma ** 2
        L2d = (self._vis * s2 * res2 / (res2 + s2)).sum()

        # L_sil: union soft silhouette vs downsampled gt
        union_faces = [self._faces[h] + h * self.n_verts for h in range(H)]
        offset = H * self.n_verts
        for o, vw in enumerate(instr_world):
            union_faces.append(self._instr_consts[o]["faces"] + offset)
            offset += vw.shape[1]
        union_faces = jnp.asarray(np.concatenate(union_faces))
        hand_flat = jnp.moveaxis(verts, 0, 1).reshape(T, -1, 3)
        if instr_world:
            all_flat = jnp.concatenate(
                [hand_flat] + [vw for vw in instr_world], axis=1)
        else:
            all_flat = hand_flat

        def sil_frame(vw_t, gt_t):
            def sil_view(Rv, tv, fxv, fyv, cxv, cyv, gtv):
                cov = soft_silhouette_jnp(vw_t, union_faces, self._pix,
                                          Rv, tv, fxv, fyv, cxv, cyv,
                                          self.sharpness)
                return jnp.abs(cov - gtv.ravel()).mean()
            return jax.vmap(sil_view)(self._R, self._t, self._sfx,
                                      self._sfy, self._scx, self._scy,
                                      gt_t).sum()

        Lsil = jax.vmap(sil_frame)(all_flat, self._gt_sil).sum()

        # L_3d: point-to-plane against per-entity clouds
        L3d = 0.0
        for h in range(H):
            faces = jnp.asarray(self._faces[h])
            normals = jax.vmap(lambda v: _vertex_normals_jnp(v, faces))(
                verts[h])
            dots = ((corr[h] - verts[h]) * normals).sum(-1)
            L3d = L3d + (corr_w[h] * jnp.abs(dots).mean(-1)).sum()
        for o, vw in enumerate(instr_world):
            faces = jnp.asarray(self._instr_consts[o]["faces"])
            normals = jax.vmap(lambda v: _vertex_normals_jnp(v, faces))(vw)
            dots = ((icorr[o] - vw) * normals).sum(-1)
            L3d = L3d + (icorr_w[o] * jnp.abs(dots).mean(-1)).sum()

        # L_smooth
        dJ = joints[:, 1:] - joints[:, :-1]
        rots = _rodrigues_batch(theta.reshape(-1, 3), jnp).reshape(
            H, T, -1, 3, 3)
        Lsm = (dJ ** 2).sum() + _geodesic_sq_sum_jnp(rots[:, :-1],
                                                     rots[:, 1:])

        # L_prior
        Lz = 0.0
        for h in range(H):
            zh, mu, sig = self.prior.encode(theta[h], xp=jnp)
            Lz = Lz + (jnp.log(sig) + 0.5 * _LOG_2PI
                       + 0.5 * ((zh - mu) / sig) ** 2).sum()
        Lth = (theta ** 2).sum()
        Lb = (beta ** 2).sum()

        # L_bio
        pts2 = theta[..., (FLEXION_AXIS, ABDUCTION_AXIS)]   # (H,T,J,2)
        hulls = jnp.asarray(self.limits.hulls)              # (J,K,2)
        a = hulls
        b = jnp.concatenate([hulls[:, 1:], hulls[:, :1]], axis=1)
        e = b - a                                           # (J,K,2)
        wv = pts2[..., None, :] - a                          # (H,T,J,K,2)
        cross = e[..., 0] * wv[..., 1] - e[..., 1] * wv[..., 0]
        inside = jnp.all(cross >= 0, axis=-1)
        tt = jnp.clip((wv * e).sum(-1) / (e * e).sum(-1), 0.0, 1.0)
        d2 = ((pts2[..., None, :] - (a + tt[..., None] * e)) ** 2
              ).sum(-1).min(-1)
        Lja = jnp.where(inside, 0.0, d2).sum()

        par = keypoint_parents(self.templates[self.hands[0]])
        bvec = joints[:, :, 1:] - joints[:, :, par[1:]]
        blen = jnp.sqrt((bvec ** 2).sum(-1) + 1e-24)
        Lbl = self._interval_jnp(blen, jnp.asarray(self.limits.bone_min),
                                 jnp.asarray(self.limits.bone_max)).sum()

        base = joints[:, :, PALM_BASE_KEYPOINTS]
        uu = base - joints[:, :, :1]
        uu = uu / jnp.sqrt((uu ** 2).sum(-1, keepdims=True) + 1e-24)
        angd = self._safe_angle((uu[:, :, :-1] * uu[:, :, 1:]).sum(-1))
        vv = base[:, :, 1:] - base[:, :, :-1]
        vv = vv / jnp.sqrt((vv ** 2).sum(-1, keepdims=True) + 1e-24)
        curv = self._safe_angle((vv[:, :, :-1] * vv[:, :, 1:]).sum(-1))
        Lpalm = (self._interval_jnp(curv, jnp.asarray(self.limits.curv_min),
                                    jnp.asarray(self.limits.curv_max)).sum()
                 + self._interval_jnp(angd,
                                      jnp.asarray(self.limits.angdist_min),
                                      jnp.asarray(self.limits.angdist_max)
                                      ).sum())
        tw = theta[:, :, self.limits.twist_joints, TWIST_AXIS]
        Lang = (tw ** 2).sum() + self._interval_jnp(
            tw, self.limits.twist_min, self.limits.twist_max).sum()
        Lbio = (w.lam_ja * Lja + w.lam_bl * Lbl + w.lam_palm * Lpalm
                + w.lam_angle * Lang)

        # stage-III interaction terms
        LR = LA = Lsdf = 0.0
        for o in range(len(self.slots)):
            R_o, t_o = instr_Rt[o]
            origin, voxel = self._sdf_meta[o]
            ivw = instr_world[o]
            for h in range(H):
                def phi_frame(vh, Rt, tt, vals):
                    local = (vh - tt) @ Rt
                    return _sdf_trilinear(origin, voxel, vals, local, xp=jnp)
                phi = jax.vmap(phi_frame)(verts[h], R_o, t_o, sdf_vals[o])
                pen = jnp.maximum(0.0, -phi)
                LR = LR + pen.sum()
                Lsdf = Lsdf + (pen ** 2).sum()

                av = jax.vmap(lambda v, i: v[i])(verts[h], anchor_idx[o, h])
                diff = av[:, :, :, None, :] - ivw[:, None, None, :, :]
                dist = jnp.sqrt((diff ** 2).sum(-1) + 1e-24).min(-1)
                wgt = anchor_w[o, h]
                denom = jnp.maximum(wgt.sum(-1), 1e-12)
                LA = LA + ((wgt * dist).sum(-1) / denom).sum()
        Linter = lam_R * LR + (1.0 - lam_R) * LA

        E = (w.lam_2d * L2d + w.lam_sil * Lsil + w.lam_smooth * Lsm
             + w.lam_3d * L3d + Lbio
             + w.lam_z * Lz + w.lam_theta * Lth + w.lam_beta * Lb
             + w.lam_inter * Linter + w.lam_sdf * Lsdf)
        terms = {"2d": L2d, "sil": Lsil, "smooth": Lsm, "3d": L3d,
                 "bio": Lbio, "z": Lz, "theta": Lth, "beta": Lb,
                 "inter": Linter, "sdf": Lsdf}
        return E, terms

    @staticmethod
    def _interval_jnp(x, lo, hi):
        return jnp.maximum(0.0, lo - x) ** 2 + jnp.maximum(0.0, x - hi) ** 2

    @staticmethod
    def _safe_angle(cosv):
        return jnp.arccos(jnp.clip(cosv, -1.0 + 1e-9, 1.0 - 1e-9))

    def _articulate_jnp(self, c, alpha):
        if "local" not in c:
            return c["base"]
        Rrel = _rodrigues_jnp(alpha * c["omega"])
        Ra = c["R_rest"] @ Rrel
        ta = (1.0 - alpha) * c["t_rest"] + alpha * c["t_max"]
        moved = c["local"] @ Ra.T + ta
        return jnp.concatenate([c["base"], moved], axis=0)


def energy_stage2(x, templates, observations, rig, weights,
                  prior=None, limits=None, **kwargs):
    """One-shot stage-II evaluation: (value, gradient) at x with fresh
    correspondences. Build a TrajectoryEnergy directly for repeated use."""
    if weights.stage != "II":
        raise ValueError("stage-II weights required")
    e = TrajectoryEnergy(templates, observations, rig, weights,
                         prior=prior, limits=limits, **kwargs)
    x = e.update_correspondences(x)
    return e(x)


def energy_stage3(x, templates, observations, rig, weights, instruments,
                  init_instrument_states, prior=None, limits=None, **kwargs):
    """One-shot stage-III evaluation; x appends per-frame instrument blocks
    (rotation increment, translation, logit articulation) per slot."""
    if weights.stage != "III":
        raise ValueError("stage-III weights required")
    e = TrajectoryEnergy(templates, observations, rig, weights,
                         prior=prior, limits=limits, instruments=instruments,
                         init_instrument_states=init_instrument_states,
                         **kwargs)
    x = e.update_correspondences(x)
    return e(x)

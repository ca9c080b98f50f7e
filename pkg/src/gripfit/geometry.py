"""Camera models, coordinate transforms and multi-view point-cloud machinery.

World/camera conventions follow standard computer vision: the extrinsics map
world to camera (x_cam = R @ x_world + t), camera z points into the scene and
pixels are (u right, v down). All distances are meters; depth images are
uint16 millimeters (RealSense convention, conversion factor configurable).

Mask label semantics: 0 background, 1 left hand, 2 right hand, 3 left-hand
instrument, 4 right-hand instrument.
"""

from dataclasses import dataclass, field

import numpy as np

from .transforms import axis_angle_to_matrix, matrix_to_axis_angle, is_rotation

MASK_BACKGROUND = 0
MASK_LEFT_HAND = 1
MASK_RIGHT_HAND = 2
MASK_LEFT_INSTRUMENT = 3
MASK_RIGHT_INSTRUMENT = 4
HAND_LABELS = (MASK_LEFT_HAND, MASK_RIGHT_HAND)
INSTRUMENT_LABELS = (MASK_LEFT_INSTRUMENT, MASK_RIGHT_INSTRUMENT)

DEPTH_SCALE = 0.001  # meters per uint16 unit

# z-buffer slack when deciding whether a reprojected point is occluded
OCCLUSION_SLACK = 0.005


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self):
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, factor):
        """Intrinsics for an image resized by `factor` (e.g. 0.25)."""
        return CameraIntrinsics(
            fx=self.fx * factor, fy=self.fy * factor,
            cx=self.cx * factor, cy=self.cy * factor,
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


@dataclass(frozen=True)
class CameraExtrinsics:
    rotation: np.ndarray  # 3x3 world -> camera
    translation: np.ndarray  # 3-vector, meters

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not is_rotation(R, tol=1e-9):
            raise ValueError("extrinsic rotation must be orthonormal, det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def world_to_camera_points(self, pts):
        return np.asarray(pts) @ self.rotation.T + self.translation

    def camera_to_world_points(self, pts):
        return (np.asarray(pts) - self.translation) @ self.rotation

    @property
    def camera_center(self):
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class CameraRig:
    views: tuple  # of (CameraIntrinsics, CameraExtrinsics)

    def __post_init__(self):
        views = tuple(self.views)
        if len(views) < 1:
            raise ValueError("rig needs at least one view")
        object.__setattr__(self, "views", views)

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)


@dataclass
class PointCloud:
    points: np.ndarray  # N x 3, meters
    normals: np.ndarray | None = None  # N x 3, unit

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals shape mismatch")
            norms = np.linalg.norm(self.normals, axis=1)
            if self.normals.size and np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("normals must be unit length")

    def __len__(self):
        return len(self.points)

    def select(self, idx):
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx])


@dataclass
class MaskImage:
    labels: np.ndarray  # H x W uint8 in {0..4}

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("mask must be H x W")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 4):
            raise ValueError("mask labels must lie in {0..4}")
        self.labels = self.labels.astype(np.uint8)

    @property
    def shape(self):
        return self.labels.shape

    def binary(self, labels=HAND_LABELS + INSTRUMENT_LABELS):
        return np.isin(self.labels, labels)


def project(points_world, intr, extr):
    """Perspective projection of world points into one view.

    Returns (pixels N x 2, valid N) where valid is False for points at or
    behind the camera plane (those pixel rows are NaN, never silently
    dropped).
    """
    pts = np.asarray(points_world, dtype=float).reshape(-1, 3)
    if not np.all(np.isfinite(pts)):
        raise ValueError("non-finite input points")
    cam = extr.world_to_camera_points(pts)
    z = cam[:, 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    pix = np.stack([u, v], axis=1)
    pix[~valid] = np.nan
    return pix, valid


def backproject(u, v, z, intr):
    """Pixel + metric depth -> camera-frame 3D point(s)."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ValueError("backprojection requires positive depth")
    x = z * (u - intr.cx) / intr.fx
    y = z * (v - intr.cy) / intr.fy
    return np.stack(np.broadcast_arrays(x, y, z), axis=-1)


def camera_to_world(orient_cam, trans_cam, extr):
    """Map an axis-angle orientation + translation from camera to world frame."""
    R = extr.rotation
    R_cam = axis_angle_to_matrix(orient_cam)
    orient_world = matrix_to_axis_angle(R.T @ R_cam)
    trans_world = R.T @ np.asarray(trans_cam, dtype=float) - R.T @ extr.translation
    return orient_world, trans_world


def world_to_camera(orient_world, trans_world, extr):
    """Inverse of camera_to_world."""
    R = extr.rotation
    R_world = axis_angle_to_matrix(orient_world)
    orient_cam = matrix_to_axis_angle(R @ R_world)
    trans_cam = R @ np.asarray(trans_world, dtype=float) + extr.translation
    return orient_cam, trans_cam


def depth_to_cloud(depth, intr, extr, mask=None, depth_scale=DEPTH_SCALE):
    """Back-project a uint16 depth image into a world-frame point cloud.

    Zero-depth pixels are skipped; an optional mask restricts output to
    foreground labels (> 0).
    """
    depth = np.asarray(depth)
    if depth.shape != (intr.height, intr.width):
        raise ValueError(
            f"depth shape {depth.shape} does not match intrinsics "
            f"({intr.height}, {intr.width})")
    keep = depth > 0
    if mask is not None:
        if mask.shape != depth.shape:
            raise ValueError("mask shape does not match depth")
        keep &= mask.labels > 0
    vs, us = np.nonzero(keep)
    if len(us) == 0:
        return PointCloud(np.zeros((0, 3)))
    z = depth[vs, us].astype(float) * depth_scale
    cam = backproject(us.astype(float), vs.astype(float), z, intr)
    return PointCloud(extr.camera_to_world_points(cam))


def merge_clouds(clouds):
    pts = [c.points for c in clouds if len(c)]
    if not pts:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.concatenate(pts, axis=0))


def _foreground_votes(cloud, masks, rig, labels_of_interest=None):
    """Per-point per-view foreground label under reprojection + z-buffer
    occlusion.

    Returns an N x V int array of labels (0 where off-image, occluded or
    background). The z-buffer is built from the cloud itself at mask
    resolution; a point more than OCCLUSION_SLACK behind the nearest cloud
    point at its pixel counts as occluded.
    """
    n = len(cloud)
    votes = np.zeros((n, len(rig)), dtype=np.int32)
    if n == 0:
        return votes
    for vi, ((intr, extr), mask) in enumerate(zip(rig, masks)):
        h, w = mask.shape
        pix, valid = project(cloud.points, intr, extr)
        cam = extr.world_to_camera_points(cloud.points)
        z = cam[:, 2]
        u = np.full(n, -1, dtype=np.int64)
        v = np.full(n, -1, dtype=np.int64)
        u[valid] = np.floor(pix[valid, 0] + 0.5).astype(np.int64)
        v[valid] = np.floor(pix[valid, 1] + 0.5).astype(np.int64)
        inside = valid & (u >= 0) & (u < w) & (v >= 0) & (v < h)
        # z-buffer at mask resolution from the cloud itself
        zbuf = np.full((h, w), np.inf)
        ii = np.nonzero(inside)[0]
        np.minimum.at(zbuf, (v[ii], u[ii]), z[ii])
        visible = inside.copy()
        visible[ii] = z[ii] <= zbuf[v[ii], u[ii]] + OCCLUSION_SLACK
        jj = np.nonzero(visible)[0]
        votes[jj, vi] = mask.labels[v[jj], u[jj]]
    return votes


def cross_view_filter(cloud, masks, rig):
    """Keep points whose reprojection is foreground in strictly more than
    half of the views ("more than half" is strict: an even-view tie drops
    the point)."""
    if len(masks) != len(rig):
        raise ValueError("mask count must equal rig view count")
    votes = _foreground_votes(cloud, masks, rig)
    fg_count = (votes > 0).sum(axis=1)
    keep = fg_count * 2 > len(rig)
    return cloud.select(keep)


def segment_cloud(cloud, masks, rig):
    """Split a (filtered) cloud into hand and instrument parts by majority
    vote of foreground labels across views; ties go to the hand."""
    votes = _foreground_votes(cloud, masks, rig)
    hand_votes = np.isin(votes, HAND_LABELS).sum(axis=1)
    obj_votes = np.isin(votes, INSTRUMENT_LABELS).sum(axis=1)
    is_hand = hand_votes >= obj_votes
    return cloud.select(is_hand), cloud.select(~is_hand)

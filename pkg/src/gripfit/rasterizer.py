"""Silhouette rendering: a hard z-buffered rasterizer (numpy) used for
evaluation masks, depth and label images, and a soft differentiable variant
(jax) used by the silhouette energy.

The soft silhouette is sigmoid(sharpness * d), where d is the signed 2D
distance in pixels from the pixel center to the silhouette boundary of the
projected triangle union, positive inside. It converges pointwise to the
hard rasterization as sharpness grows. Back-face culling is off everywhere
(open meshes render fine).

Pixel (row i, col j) has center (u=j, v=i).
"""

from dataclasses import dataclass

import numpy as np

from . import _jaxcfg  # noqa: F401
import jax
import jax.numpy as jnp

from .geometry import project

DEFAULT_SHARPNESS = 50.0


@dataclass
class SilhouetteImage:
    values: np.ndarray  # H x W in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.min() < -1e-9 or self.values.max() > 1 + 1e-9:
            raise ValueError("silhouette values must lie in [0, 1]")

    @property
    def shape(self):
        return self.values.shape


def _resolution(intr, resolution):
    if resolution is None:
        return intr.height, intr.width
    return resolution


def _scale_intr(intr, resolution):
    h, w = resolution
    sx = w / intr.width
    sy = h / intr.height
    return intr.fx * sx, intr.fy * sy, intr.cx * sx, intr.cy * sy


def raster_buffers(meshes, intr, extr, resolution=None, labels=None):
    """Z-buffer rasterization of a list of meshes.

    Returns (depth H x W in meters with inf where empty, label H x W int).
    `labels` gives the integer written per mesh (default 1 for all).
    Triangles with any vertex at or behind the camera are skipped (no
    partial clipping; scene content is assumed in front of the cameras).
    """
    h, w = _resolution(intr, resolution)
    fx, fy, cx, cy = _scale_intr(intr, (h, w))
    depth = np.full((h, w), np.inf)
    label_img = np.zeros((h, w), dtype=np.int32)
    if labels is None:
        labels = [1] * len(meshes)
    for mesh, lab in zip(meshes, labels):
        verts = getattr(mesh, "vertices", mesh[0] if isinstance(mesh, tuple) else None)
        faces = getattr(mesh, "faces", mesh[1] if isinstance(mesh, tuple) else None)
        if verts is None or len(faces) == 0:
            continue
        cam = extr.world_to_camera_points(np.asarray(verts, dtype=float))
        z = cam[:, 2]
        u = fx * cam[:, 0] / np.where(z > 0, z, 1.0) + cx
        v = fy * cam[:, 1] / np.where(z > 0, z, 1.0) + cy
        for tri in np.asarray(faces, dtype=int):
            tz = z[tri]
            if np.any(tz <= 1e-9):
                continue
            tu, tv = u[tri], v[tri]
            j0 = max(int(np.ceil(tu.min() - 0.5)), 0)
            j1 = min(int(np.floor(tu.max() + 0.5)), w - 1)
            i0 = max(int(np.ceil(tv.min() - 0.5)), 0)
            i1 = min(int(np.floor(tv.max() + 0.5)), h - 1)
            if j0 > j1 or i0 > i1:
                continue
            jj, ii = np.meshgrid(np.arange(j0, j1 + 1), np.arange(i0, i1 + 1))
            px = jj.astype(float)
            py = ii.astype(float)
            d = (tu[1] - tu[0]) * (tv[2] - tv[0]) - (tu[2] - tu[0]) * (tv[1] - tv[0])
            if abs(d) < 1e-12:
                continue
            w1 = ((px - tu[0]) * (tv[2] - tv[0]) - (py - tv[0]) * (tu[2] - tu[0])) / d
            w2 = ((tu[1] - tu[0]) * (py - tv[0]) - (tv[1] - tv[0]) * (px - tu[0])) / d
            w0 = 1.0 - w1 - w2
            inside = (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
            if not inside.any():
                continue
            inv_z = w0 / tz[0] + w1 / tz[1] + w2 / tz[2]
            zpix = 1.0 / np.where(inv_z > 0, inv_z, np.inf)
            closer = inside & (zpix < depth[i0:i1 + 1, j0:j1 + 1])
            depth[i0:i1 + 1, j0:j1 + 1] = np.where(closer, zpix, depth[i0:i1 + 1, j0:j1 + 1])
            label_img[i0:i1 + 1, j0:j1 + 1] = np.where(closer, lab, label_img[i0:i1 + 1, j0:j1 + 1])
    return depth, label_img


def rasterize_hard(meshes, intr, extr, resolution=None):
    """Binary coverage image of the mesh union under z-buffering."""
    depth, _ = raster_buffers(meshes, intr, extr, resolution)
    return SilhouetteImage(np.isfinite(depth).astype(float))


def _point_segment_dist(p, a, b):
    """Pixel-space distance from points (P,2) to segments (T,2) pairs,
    broadcast to (P,T)."""
    ab = b - a  # (T,2)
    ap = p[:, None, :] - a[None]  # (P,T,2)
    denom = (ab * ab).sum(-1) + 1e-30
    t = jnp.clip((ap * ab[None]).sum(-1) / denom[None], 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    diff = p[:, None, :] - closest
    return jnp.sqrt((diff * diff).sum(-1) + 1e-30)


def signed_distance_2d(pix, tri2d, valid):
    """Signed pixel distance (P,) from pixel centers to the union silhouette
    of projected triangles (T,3,2); positive inside. Invalid triangles are
    ignored. The union distance is the max over per-triangle signed
    distances (exact inside each triangle, a tight lower bound elsewhere)."""
    a, b, c = tri2d[:, 0], tri2d[:, 1], tri2d[:, 2]
    d_ab = _point_segment_dist(pix, a, b)
    d_bc = _point_segment_dist(pix, b, c)
    d_ca = _point_segment_dist(pix, c, a)
    d_edge = jnp.minimum(d_ab, jnp.minimum(d_bc, d_ca))  # (P,T)

    # inside test via consistent-sign cross products
    def cross(o, q, p):
        return ((q[:, 0] - o[:, 0])[None] * (p[:, None, 1] - o[None, :, 1])
                - (q[:, 1] - o[:, 1])[None] * (p[:, None, 0] - o[None, :, 0]))

    c1 = cross(a, b, pix)
    c2 = cross(b, c, pix)
    c3 = cross(c, a, pix)
    inside = ((c1 >= 0) & (c2 >= 0) & (c3 >= 0)) | ((c1 <= 0) & (c2 <= 0) & (c3 <= 0))
    signed = jnp.where(inside, d_edge, -d_edge)
    signed = jnp.where(valid[None], signed, -1e9)
    return signed.max(axis=1)


def project_vertices_jnp(verts_world, R, t, fx, fy, cx, cy):
    """Differentiable perspective projection; returns (pix (V,2), z (V,))."""
    cam = verts_world @ R.T + t
    z = cam[:, 2]
    zsafe = jnp.where(jnp.abs(z) > 1e-9, z, 1e-9)
    u = fx * cam[:, 0] / zsafe + cx
    v = fy * cam[:, 1] / zsafe + cy
    return jnp.stack([u, v], axis=1), z


def soft_silhouette_jnp(verts_world, faces, pix, R, t, fx, fy, cx, cy,
                        sharpness=DEFAULT_SHARPNESS):
    """Soft coverage values (P,) for pixel centers `pix`, differentiable in
    the world vertices."""
    pv, z = project_vertices_jnp(verts_world, R, t, fx, fy, cx, cy)
    tri2d = pv[faces]            # (T,3,2)
    valid = jnp.all(z[faces] > 1e-6, axis=1)
    d = signed_distance_2d(pix, tri2d, valid)
    return jax.nn.sigmoid(sharpness * d)


def pixel_grid(resolution):
    h, w = resolution
    jj, ii = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    return np.stack([jj.ravel(), ii.ravel()], axis=1)


def rasterize_soft(meshes, intr, extr, resolution=None,
                   sharpness=DEFAULT_SHARPNESS, return_grad=False):
    """Soft silhouette of the mesh union; optionally also the gradient of the
    total coverage w.r.t. each mesh's vertices."""
    if sharpness <= 0:
        raise ValueError("sharpness must be positive")
    h, w = _resolution(intr, resolution)
    fx, fy, cx, cy = _scale_intr(intr, (h, w))
    pix = jnp.asarray(pixel_grid((h, w)))
    R = jnp.asarray(extr.rotation)
    t = jnp.asarray(extr.translation)

    meshes = [m for m in meshes if len(getattr(m, "faces", [])) > 0]
    if not meshes:
        img = SilhouetteImage(np.zeros((h, w)))
        if return_grad:
            return img, []
        return img

    offsets = np.cumsum([0] + [len(m.vertices) for m in meshes])
    all_faces = np.concatenate(
        [np.asarray(m.faces, dtype=int) + offsets[i] for i, m in enumerate(meshes)], axis=0)
    all_verts = np.concatenate([np.asarray(m.vertices, dtype=float) for m in meshes], axis=0)

    def coverage(verts):
        return soft_silhouette_jnp(verts, jnp.asarray(all_faces), pix,
                                   R, t, fx, fy, cx, cy, sharpness)

    values = np.asarray(coverage(jnp.asarray(all_verts))).reshape(h, w)
    img = SilhouetteImage(np.clip(values, 0.0, 1.0))
    if not return_grad:
        return img

    grad_all = np.asarray(jax.grad(lambda v: coverage(v).sum())(jnp.asarray(all_verts)))
    grads = [grad_all[offsets[i]:offsets[i + 1]] for i in range(len(meshes))]
    return img, grads

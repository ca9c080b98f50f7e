"""Triangle-mesh helpers: normals, area-weighted surface sampling, exact
point-to-mesh distance and inside/outside tests.

The inside test uses parity ray casting along a slightly jittered direction
(robust to rays grazing edges) and assumes meshes are watertight enough for
the parity to be well defined, which holds for all instrument models and the
toy hand used here.
"""

import numpy as np


def face_normals_areas(vertices, faces):
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    e1 = v[f[:, 1]] - v[f[:, 0]]
    e2 = v[f[:, 2]] - v[f[:, 0]]
    cross = np.cross(e1, e2)
    norms = np.linalg.norm(cross, axis=1)
    areas = 0.5 * norms
    with np.errstate(invalid="ignore", divide="ignore"):
        normals = cross / np.where(norms > 0, norms, 1.0)[:, None]
    return normals, areas


def vertex_normals(vertices, faces):
    """Area-weighted vertex normals (unit length; degenerate fans fall back
    to +z)."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    fn, areas = face_normals_areas(v, f)
    weighted = fn * areas[:, None]
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, f[:, k], weighted)
    norms = np.linalg.norm(out, axis=1)
    bad = norms < 1e-14
    out[bad] = (0.0, 0.0, 1.0)
    norms[bad] = 1.0
    return out / norms[:, None]


def sample_surface(vertices, faces, n, seed=0):
    """Uniform-by-area surface samples; deterministic for a fixed seed."""
    rng = np.random.default_rng(seed)
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    _, areas = face_normals_areas(v, f)
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    probs = areas / total
    idx = rng.choice(len(f), size=n, p=probs)
    r1 = rng.random(n)
    r2 = rng.random(n)
    sqrt_r1 = np.sqrt(r1)
    a = 1.0 - sqrt_r1
    b = sqrt_r1 * (1.0 - r2)
    c = sqrt_r1 * r2
    tri = v[f[idx]]
    return a[:, None] * tri[:, 0] + b[:, None] * tri[:, 1] + c[:, None] * tri[:, 2]


def point_triangle_distances(points, vertices, faces, chunk=2048):
    """Exact unsigned distance from each point to the closest triangle."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        out[s:s + chunk] = np.sqrt(_point_tri_sq(p, a, b, c).min(axis=1))
    return out


def _point_tri_sq(p, a, b, c):
    """Squared distance from each point (P,3) to each triangle (T,3 corners).

    Ericson's closest-point-on-triangle, vectorized over P x T.
    """
    p = p[:, None, :]  # P,1,3
    ab = (b - a)[None]  # 1,T,3
    ac = (c - a)[None]
    ap = p - a[None]
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b[None]
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c[None]
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    # default: interior projection; edge/vertex regions overwrite below
    with np.errstate(divide="ignore", invalid="ignore"):
        v_int = vb / np.where(denom != 0, denom, 1.0)
        w_int = vc / np.where(denom != 0, denom, 1.0)
    closest = a[None] + v_int[..., None] * ab + w_int[..., None] * ac
    # edge AC
    with np.errstate(divide="ignore", invalid="ignore"):
        w_ac = (d2 - d6) / np.where((d2 - d6) + (d5 - d1) != 0, (d2 - d6) + (d5 - d1), 1.0)
    w_ac = np.clip(w_ac, 0.0, 1.0)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    cand = a[None] + w_ac[..., None] * ac
    closest = np.where(on_ac[..., None], cand, closest)
    # edge BC
    with np.errstate(divide="ignore", invalid="ignore"):
        w_bc = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) + (d5 - d6), 1.0)
    w_bc = np.clip(w_bc, 0.0, 1.0)
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    cand = b[None] + w_bc[..., None] * (c - b)[None]
    closest = np.where(on_bc[..., None], cand, closest)
    # edge AB
    with np.errstate(divide="ignore", invalid="ignore"):
        v_ab = d1 / np.where(d1 - d3 != 0, d1 - d3, 1.0)
    v_ab = np.clip(v_ab, 0.0, 1.0)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    cand = a[None] + v_ab[..., None] * ab
    closest = np.where(on_ab[..., None], cand, closest)
    # vertex regions last (they win)
    on_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(on_a[..., None], np.broadcast_to(a[None], closest.shape), closest)
    on_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(on_b[..., None], np.broadcast_to(b[None], closest.shape), closest)
    on_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(on_c[..., None], np.broadcast_to(c[None], closest.shape), closest)
    diff = p - closest
    return np.einsum("ptk,ptk->pt", diff, diff)


# Fixed, slightly irrational ray direction: avoids axis-aligned edge grazing.
_RAY_DIR = np.array([0.57973, 0.33188, 0.74426])
_RAY_DIR = _RAY_DIR / np.linalg.norm(_RAY_DIR)


def points_inside_mesh(points, vertices, faces, chunk=1024):
    """Parity-based inside test for watertight meshes (True = inside)."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=int)
    if len(f) == 0:
        raise ValueError("degenerate mesh: no faces")
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    d = _RAY_DIR
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)  # T,3
    det = np.einsum("tk,tk->t", e1, pvec)
    ok = np.abs(det) > 1e-14
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    out = np.zeros(len(points), dtype=bool)
    for s in range(0, len(points), chunk):
        p = points[s:s + chunk]
        tvec = p[:, None, :] - a[None]  # P,T,3
        u = np.einsum("ptk,tk->pt", tvec, pvec) * inv_det[None]
        qvec = np.cross(tvec, e1[None])
        vv = np.einsum("ptk,k->pt", qvec, d) * inv_det[None]
        t = (qvec * e2[None]).sum(-1) * inv_det[None]
        hit = ok[None] & (u >= 0) & (vv >= 0) & (u + vv <= 1) & (t > 1e-12)
        out[s:s + chunk] = (hit.sum(axis=1) % 2) == 1
    return out


def mesh_aabb(vertices, padding=0.0):
    v = np.asarray(vertices, dtype=float)
    return v.min(axis=0) - padding, v.max(axis=0) + padding


def box_mesh(half_extents, center=(0.0, 0.0, 0.0)):
    """Axis-aligned box with outward-facing triangles."""
    hx, hy, hz = half_extents
    cx, cy, cz = center
    corners = np.array([
        [sx * hx + cx, sy * hy + cy, sz * hz + cz]
        for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)
    ], dtype=float)
    # index = 4*sx + 2*sy + sz with (-1 -> 0, 1 -> 1)
    quads = [
        (0, 1, 3, 2),  # x-
        (4, 6, 7, 5),  # x+
        (0, 4, 5, 1),  # y-
        (2, 3, 7, 6),  # y+
        (0, 2, 6, 4),  # z-
        (1, 5, 7, 3),  # z+
    ]
    faces = []
    for a, b, c, d in quads:
        faces.append((a, b, c))
        faces.append((a, c, d))
    return corners, np.asarray(faces, dtype=int)


def cylinder_mesh(radius, length, axis=1, n_sides=12, n_rings=4, center=(0.0, 0.0, 0.0)):
    """Closed cylinder aligned with a coordinate axis, centered at `center`."""
    ts = np.linspace(-0.5 * length, 0.5 * length, n_rings)
    angles = np.linspace(0.0, 2 * np.pi, n_sides, endpoint=False)
    verts = []
    for t in ts:
        for ang in angles:
            p = np.zeros(3)
            p[axis] = t
            u, v = [k for k in range(3) if k != axis]
            p[u] = radius * np.cos(ang)
            p[v] = radius * np.sin(ang)
            verts.append(p)
    cap0 = len(verts)
    p = np.zeros(3); p[axis] = -0.5 * length
    verts.append(p.copy())
    cap1 = len(verts)
    p[axis] = 0.5 * length
    verts.append(p.copy())
    faces = []
    for r in range(n_rings - 1):
        for s in range(n_sides):
            s2 = (s + 1) % n_sides
            a = r * n_sides + s
            b = r * n_sides + s2
            c = (r + 1) * n_sides + s2
            d = (r + 1) * n_sides + s
            faces.append((a, b, c))
            faces.append((a, c, d))
    for s in range(n_sides):
        s2 = (s + 1) % n_sides
        faces.append((cap0, s2, s))
        last = (n_rings - 1) * n_sides
        faces.append((cap1, last + s, last + s2))
    verts = np.asarray(verts) + np.asarray(center, dtype=float)
    return verts, np.asarray(faces, dtype=int)

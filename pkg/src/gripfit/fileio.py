"""On-disk formats: calibration JSON, raw depth binary, mask PNGs, ASCII PLY
point clouds and Wavefront OBJ meshes.

Depth format: three little-endian int32 (rows, cols, type tag) followed by a
row-major uint16 payload in millimeters. The type tag is 2 (uint16) and is
validated on read.
"""

import json
import struct

import numpy as np
from PIL import Image

from .geometry import CameraExtrinsics, CameraIntrinsics, CameraRig, MaskImage, PointCloud

DEPTH_TYPE_TAG = 2  # uint16


def save_calibration(path, rig):
    views = []
    for intr, extr in rig:
        views.append({
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "R": [float(x) for x in np.asarray(extr.rotation).reshape(9)],
            "t": [float(x) for x in np.asarray(extr.translation).reshape(3)],
        })
    with open(path, "w") as f:
        json.dump({"views": views}, f, indent=1)


def load_calibration(path):
    with open(path) as f:
        data = json.load(f)
    if "views" not in data or not data["views"]:
        raise ValueError(f"{path}: calibration file has no views")
    views = []
    for i, v in enumerate(data["views"]):
        try:
            intr = CameraIntrinsics(
                fx=v["fx"], fy=v["fy"], cx=v["cx"], cy=v["cy"],
                width=int(v["width"]), height=int(v["height"]))
            extr = CameraExtrinsics(
                np.asarray(v["R"], dtype=float).reshape(3, 3),
                np.asarray(v["t"], dtype=float).reshape(3))
        except (KeyError, ValueError) as e:
            raise ValueError(f"{path}: invalid view {i}: {e}") from e
        views.append((intr, extr))
    return CameraRig(tuple(views))


def save_depth(path, depth_mm):
    depth_mm = np.ascontiguousarray(depth_mm, dtype=np.uint16)
    rows, cols = depth_mm.shape
    with open(path, "wb") as f:
        f.write(struct.pack("<iii", rows, cols, DEPTH_TYPE_TAG))
        f.write(depth_mm.tobytes())


def load_depth(path):
    with open(path, "rb") as f:
        header = f.read(12)
        if len(header) < 12:
            raise ValueError(f"{path}: truncated depth header")
        rows, cols, tag = struct.unpack("<iii", header)
        if tag != DEPTH_TYPE_TAG:
            raise ValueError(f"{path}: unsupported depth type tag {tag}")
        payload = f.read(rows * cols * 2)
    if len(payload) != rows * cols * 2:
        raise ValueError(f"{path}: truncated depth payload")
    return np.frombuffer(payload, dtype="<u2").reshape(rows, cols)


def save_mask(path, mask):
    Image.fromarray(mask.labels, mode="L").save(path)


def load_mask(path):
    return MaskImage(np.asarray(Image.open(path), dtype=np.uint8))


def save_ply(path, cloud):
    has_normals = cloud.normals is not None
    lines = [
        "ply", "format ascii 1.0",
        f"element vertex {len(cloud)}",
        "property float x", "property float y", "property float z",
    ]
    if has_normals:
        lines += ["property float nx", "property float ny", "property float nz"]
    lines.append("end_header")
    rows = []
    for i in range(len(cloud)):
        vals = list(cloud.points[i])
        if has_normals:
            vals += list(cloud.normals[i])
        rows.append(" ".join(f"{v:.9g}" for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines + rows) + "\n")


def load_ply(path):
    with open(path) as f:
        lines = [ln.strip() for ln in f]
    if not lines or lines[0] != "ply":
        raise ValueError(f"{path}: not a PLY file")
    n = None
    props = []
    i = 1
    while i < len(lines) and lines[i] != "end_header":
        parts = lines[i].split()
        if parts[:2] == ["element", "vertex"]:
            n = int(parts[2])
        elif parts and parts[0] == "property":
            props.append(parts[2])
        i += 1
    if n is None or i == len(lines):
        raise ValueError(f"{path}: malformed PLY header")
    data = np.array([[float(x) for x in ln.split()] for ln in lines[i + 1:i + 1 + n]])
    if data.shape[0] != n:
        raise ValueError(f"{path}: expected {n} vertices, found {data.shape[0]}")
    normals = data[:, 3:6] if "nx" in props else None
    return PointCloud(data[:, :3], normals)


def save_ply_mesh(path, vertices, faces):
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces, dtype=int)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(vertices)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write(f"element face {len(faces)}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v in vertices:
            f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in faces:
            f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def save_obj(path, vertices, faces):
    with open(path, "w") as f:
        for v in np.asarray(vertices, dtype=float):
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in np.asarray(faces, dtype=int):
            f.write(f"f {face[0] + 1} {face[1] + 1} {face[2] + 1}\n")


def load_obj(path):
    vertices, faces = [], []
    with open(path) as f:
        for ln in f:
            parts = ln.split()
            if not parts:
                continue
            if parts[0] == "v":
                vertices.append([float(x) for x in parts[1:4]])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) - 1 for p in parts[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not vertices:
        raise ValueError(f"{path}: OBJ file has no vertices")
    return np.asarray(vertices, dtype=float), np.asarray(faces, dtype=int)


def dump_json(path, obj):
    """Canonical JSON writer used for all result artifacts (stable key order
    and float formatting so equal results are byte-identical)."""
    with open(path, "w") as f:
        json.dump(obj, f, indent=1, sort_keys=True)
        f.write("\n")

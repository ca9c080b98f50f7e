"""Articulated rigid instruments: canonical two-part geometry posed by a
6-DoF transform plus a scalar articulation factor in [0, 1].

Articulation interpolates the moving part between its rest and maximum
relative pose: rotation along the geodesic, translation linearly. alpha = 0
reproduces the rest geometry exactly, alpha = 1 the maximum.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist

from . import fileio
from .transforms import axis_angle_to_matrix, is_rotation, matrix_to_axis_angle, slerp_matrix


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray     # 3x3
    translation: np.ndarray  # 3

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if not is_rotation(R, tol=1e-8):
            raise ValueError("not a valid rigid rotation")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, pts):
        return np.asarray(pts) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class InstrumentModel:
    name: str
    base_vertices: np.ndarray
    base_faces: np.ndarray
    moving_vertices: np.ndarray | None = None   # canonical (rest) positions
    moving_faces: np.ndarray | None = None
    rest_relative_pose: RigidTransform | None = None
    max_relative_pose: RigidTransform | None = None

    def __post_init__(self):
        object.__setattr__(self, "base_vertices",
                           np.asarray(self.base_vertices, dtype=float))
        object.__setattr__(self, "base_faces",
                           np.asarray(self.base_faces, dtype=int))
        if self.moving_vertices is not None:
            object.__setattr__(self, "moving_vertices",
                               np.asarray(self.moving_vertices, dtype=float))
            object.__setattr__(self, "moving_faces",
                               np.asarray(self.moving_faces, dtype=int))
            if self.rest_relative_pose is None or self.max_relative_pose is None:
                raise ValueError("articulated model needs rest and max relative poses")
        if self.diameter <= 0:
            raise ValueError("instrument diameter must be positive")

    @property
    def is_articulated(self):
        return self.moving_vertices is not None

    @property
    def n_vertices(self):
        n = len(self.base_vertices)
        if self.is_articulated:
            n += len(self.moving_vertices)
        return n

    @property
    def diameter(self):
        """Max pairwise vertex distance at rest; cached after first use."""
        cached = getattr(self, "_diameter", None)
        if cached is None:
            verts = articulate(self, 0.0)
            cached = float(pdist(verts).max()) if len(verts) > 1 else 0.0
            object.__setattr__(self, "_diameter", cached)
        return cached

    def faces(self):
        """All faces, with moving-part indices offset past the base part."""
        if not self.is_articulated:
            return self.base_faces
        return np.concatenate(
            [self.base_faces, self.moving_faces + len(self.base_vertices)], axis=0)


@dataclass
class InstrumentState:
    rotation: np.ndarray     # 3x3 world pose
    translation: np.ndarray  # 3, meters
    articulation: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not is_rotation(self.rotation, tol=1e-6):
            raise ValueError("instrument rotation must be orthonormal, det +1")
        if not (0.0 <= self.articulation <= 1.0):
            raise ValueError("articulation must lie in [0, 1]")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), 0.0)

    def copy(self):
        return InstrumentState(self.rotation.copy(), self.translation.copy(),
                               float(self.articulation))


@dataclass
class InstrumentMesh:
    vertices: np.ndarray
    faces: np.ndarray


def articulation_transform(model, alpha):
    """Rigid transform of the moving part at articulation alpha (canonical
    frame): geodesic rotation interpolation, linear translation."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("articulation factor must lie in [0, 1]")
    rest, mx = model.rest_relative_pose, model.max_relative_pose
    R = slerp_matrix(rest.rotation, mx.rotation, alpha)
    t = (1.0 - alpha) * rest.translation + alpha * mx.translation
    return RigidTransform(R, t)


def articulate(model, alpha):
    """Canonical-frame vertices at articulation alpha (base part unchanged)."""
    if not model.is_articulated:
        if not (0.0 <= alpha <= 1.0):
            raise ValueError("articulation factor must lie in [0, 1]")
        return model.base_vertices.copy()
    xf = articulation_transform(model, alpha)
    rest = model.rest_relative_pose
    # moving_vertices are stored at rest articulation; move them by the
    # relative transform from rest to alpha
    local = (model.moving_vertices - rest.translation) @ rest.rotation
    moved = local @ xf.rotation.T + xf.translation
    return np.concatenate([model.base_vertices, moved], axis=0)


def pose_mesh(model, state):
    """World-frame instrument mesh for a 6-DoF + articulation state."""
    verts = articulate(model, state.articulation)
    world = verts @ state.rotation.T + state.translation
    return InstrumentMesh(world, model.faces())


def diameter(model):
    return model.diameter


def state_to_dict(state):
    return {
        "rotation_aa": [float(x) for x in matrix_to_axis_angle(state.rotation)],
        "translation": [float(x) for x in state.translation],
        "articulation": float(state.articulation),
    }


def state_from_dict(d):
    return InstrumentState(
        axis_angle_to_matrix(np.asarray(d["rotation_aa"], dtype=float)),
        np.asarray(d["translation"], dtype=float),
        float(d["articulation"]))


def save_model(dirpath, model):
    """Model bundle directory: model.json + base.obj (+ moving.obj)."""
    os.makedirs(dirpath, exist_ok=True)
    fileio.save_obj(os.path.join(dirpath, "base.obj"),
                    model.base_vertices, model.base_faces)
    manifest = {"name": model.name, "articulated": model.is_articulated}
    if model.is_articulated:
        fileio.save_obj(os.path.join(dirpath, "moving.obj"),
                        model.moving_vertices, model.moving_faces)
        for key, xf in (("rest_relative_pose", model.rest_relative_pose),
                        ("max_relative_pose", model.max_relative_pose)):
            manifest[key] = {
                "R": [float(x) for x in xf.rotation.reshape(9)],
                "t": [float(x) for x in xf.translation],
            }
    with open(os.path.join(dirpath, "model.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_model(dirpath):
    with open(os.path.join(dirpath, "model.json")) as f:
        manifest = json.load(f)
    bv, bf = fileio.load_obj(os.path.join(dirpath, "base.obj"))
    if not manifest.get("articulated"):
        return InstrumentModel(manifest["name"], bv, bf)
    mv, mf = fileio.load_obj(os.path.join(dirpath, "moving.obj"))
    poses = {}
    for key in ("rest_relative_pose", "max_relative_pose"):
        d = manifest[key]
        poses[key] = RigidTransform(
            np.asarray(d["R"], dtype=float).reshape(3, 3),
            np.asarray(d["t"], dtype=float))
    return InstrumentModel(manifest["name"], bv, bf, mv, mf,
                           poses["rest_relative_pose"], poses["max_relative_pose"])


def _merge_meshes(parts):
    verts, faces = [], []
    off = 0
    for v, f in parts:
        verts.append(v)
        faces.append(np.asarray(f, dtype=int) + off)
        off += len(v)
    return np.concatenate(verts, axis=0), np.concatenate(faces, axis=0)


def make_toy_rod():
    """Rigid rod with an off-axis tab (the tab breaks roll symmetry so pose
    recovery is well defined)."""
    from .meshutils import box_mesh, cylinder_mesh
    shaft = cylinder_mesh(0.004, 0.12, axis=1, n_sides=12, n_rings=5)
    tab = box_mesh((0.003, 0.010, 0.012), center=(0.0, -0.045, 0.012))
    v, f = _merge_meshes([shaft, tab])
    return InstrumentModel("rod", v, f)


def make_toy_forceps(max_angle=0.5):
    """Hinged forceps: fixed handle + jaw, and a second jaw rotating about a
    hinge at the jaw base. alpha=0 closed, alpha=1 open by `max_angle` rad."""
    from .meshutils import box_mesh, cylinder_mesh
    handle = cylinder_mesh(0.005, 0.09, axis=1, n_sides=10, n_rings=4,
                           center=(0.0, -0.045, 0.0))
    jaw_fixed = box_mesh((0.002, 0.025, 0.003), center=(0.0045, 0.025, 0.0))
    # one-sided thumb rest: breaks the near 2-fold symmetry about the handle
    thumb = box_mesh((0.005, 0.012, 0.016), center=(0.014, -0.050, 0.006))
    base_v, base_f = _merge_meshes([handle, jaw_fixed, thumb])
    moving_v, moving_f = box_mesh((0.002, 0.025, 0.003),
                                  center=(-0.0045, 0.025, 0.0))
    pivot = np.array([0.0, 0.0, 0.0])
    axis = np.array([0.0, 0.0, 1.0])  # jaws open in the x-y plane
    R_max = axis_angle_to_matrix(axis * max_angle)
    rest = RigidTransform.identity()
    mx = RigidTransform(R_max, pivot - R_max @ pivot)
    return InstrumentModel("forceps", base_v, base_f, moving_v, moving_f, rest, mx)


def make_toy_syringe(travel=0.03):
    """Sliding syringe: barrel plus a plunger translating along the axis by
    `travel` meters at alpha=1 (identity rotations throughout)."""
    from .meshutils import box_mesh, cylinder_mesh
    barrel = cylinder_mesh(0.007, 0.08, axis=1, n_sides=12, n_rings=4)
    # single off-axis finger wing (asymmetric on purpose)
    wing = box_mesh((0.014, 0.002, 0.005), center=(0.018, -0.036, 0.006))
    base_v, base_f = _merge_meshes([barrel, wing])
    plunger = cylinder_mesh(0.0035, 0.05, axis=1, n_sides=10, n_rings=3,
                            center=(0.0, 0.062, 0.0))
    knob = box_mesh((0.009, 0.002, 0.009), center=(0.0, 0.088, 0.0))
    mv, mf = _merge_meshes([plunger, knob])
    rest = RigidTransform.identity()
    mx = RigidTransform(np.eye(3), np.array([0.0, -travel, 0.0]))
    return InstrumentModel("syringe", base_v, base_f, mv, mf, rest, mx)


TOY_INSTRUMENTS = {
    "rod": make_toy_rod,
    "forceps": make_toy_forceps,
    "syringe": make_toy_syringe,
}

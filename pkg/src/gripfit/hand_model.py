"""Parametric skinned hand: shape blend shapes + forward kinematics + linear
blend skinning, producing a mesh and 21 regressed keypoints.

The skeleton is a rooted tree: joint 0 is the wrist, followed by 5 fingers of
`n_segments` articulated joints each (15 for the default 3-segment fingers).
Pose-corrective blend shapes are intentionally not modeled; `forward` applies
only shape blend shapes before skinning. Keypoint order: 0 wrist, 1..5n the
articulated joints finger-major (thumb, index, middle, ring, pinky, proximal
to distal), then the 5 fingertips.

The differentiable core (`lbs_forward`) is written against a pluggable array
namespace so the same code runs under numpy and jax.
"""

import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .meshutils import vertex_normals
from .transforms import geodesic_distance  # noqa: F401  (part of this module's API)

FINGER_NAMES = ("thumb", "index", "middle", "ring", "pinky")
REGION_PALM = 5  # contact-region ids: 0..4 fingertips, 5 palm base

# local joint rotation axes for the toy skeleton (fingers point along +y)
FLEXION_AXIS = 0   # x
TWIST_AXIS = 1     # y
ABDUCTION_AXIS = 2  # z


@dataclass
class HandState:
    """Per-frame hand parameters (axis-angle pose, shape, global transform)."""
    local_pose: np.ndarray   # (n_joints, 3) axis-angle, radians
    shape: np.ndarray        # (10,)
    global_orient: np.ndarray  # (3,) axis-angle
    translation: np.ndarray    # (3,) meters
    handedness: str = "right"

    def __post_init__(self):
        self.local_pose = np.asarray(self.local_pose, dtype=float)
        self.shape = np.asarray(self.shape, dtype=float).reshape(-1)
        self.global_orient = np.asarray(self.global_orient, dtype=float).reshape(3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if self.handedness not in ("left", "right"):
            raise ValueError("handedness must be 'left' or 'right'")
        for arr in (self.local_pose, self.shape, self.global_orient, self.translation):
            if not np.all(np.isfinite(arr)):
                raise ValueError("hand state contains non-finite values")

    @classmethod
    def rest(cls, n_joints=15, n_shape=10, handedness="right"):
        return cls(np.zeros((n_joints, 3)), np.zeros(n_shape),
                   np.zeros(3), np.zeros(3), handedness)

    def copy(self):
        return HandState(self.local_pose.copy(), self.shape.copy(),
                         self.global_orient.copy(), self.translation.copy(),
                         self.handedness)


@dataclass
class HandMesh:
    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray     # (F, 3)
    vertex_normals: np.ndarray  # (V, 3) unit


@dataclass
class Keypoints3D:
    joints: np.ndarray  # (21, 3); joint 0 is the wrist


@dataclass(frozen=True)
class HandTemplate:
    rest_vertices: np.ndarray       # (V, 3)
    faces: np.ndarray               # (F, 3)
    skinning_weights: np.ndarray    # (V, K) rows sum to 1, non-negative
    shape_blend_shapes: np.ndarray  # (V, 3, 10)
    joint_regressor: np.ndarray     # (21, V) rows sum to 1
    rest_joint_regressor: np.ndarray  # (K, V) rows sum to 1; rest joints from shaped verts
    kinematic_tree: np.ndarray      # (K,) parent index per joint, -1 at the wrist
    region_labels: np.ndarray       # (V,) contact region per vertex, -1 = none
    handedness: str = "right"

    def __post_init__(self):
        object.__setattr__(self, "rest_vertices",
                           np.asarray(self.rest_vertices, dtype=float))
        object.__setattr__(self, "faces", np.asarray(self.faces, dtype=int))
        object.__setattr__(self, "skinning_weights",
                           np.asarray(self.skinning_weights, dtype=float))
        object.__setattr__(self, "shape_blend_shapes",
                           np.asarray(self.shape_blend_shapes, dtype=float))
        object.__setattr__(self, "joint_regressor",
                           np.asarray(self.joint_regressor, dtype=float))
        object.__setattr__(self, "rest_joint_regressor",
                           np.asarray(self.rest_joint_regressor, dtype=float))
        object.__setattr__(self, "kinematic_tree",
                           np.asarray(self.kinematic_tree, dtype=int))
        object.__setattr__(self, "region_labels",
                           np.asarray(self.region_labels, dtype=int))
        self.validate()

    def validate(self):
        V = self.rest_vertices.shape[0]
        K = self.skinning_weights.shape[1]
        w = self.skinning_weights
        if w.shape[0] != V:
            raise ValueError("skinning weight count does not match vertices")
        if np.any(w < -1e-12):
            raise ValueError("skinning weights must be non-negative")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("skinning weight rows must sum to 1")
        if np.any(np.abs(self.joint_regressor.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("joint regressor rows must sum to 1")
        if np.any(np.abs(self.rest_joint_regressor.sum(axis=1) - 1.0) > 1e-6):
            raise ValueError("rest joint regressor rows must sum to 1")
        if self.shape_blend_shapes.shape[:2] != (V, 3):
            raise ValueError("blend shape dimensions do not match vertices")
        tree = self.kinematic_tree
        if len(tree) != K or tree[0] != -1 or np.any(tree[1:] >= np.arange(1, K)):
            raise ValueError("kinematic tree must be rooted at the wrist "
                             "with parents preceding children")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= V):
            raise ValueError("faces index invalid vertices")

    @property
    def n_vertices(self):
        return self.rest_vertices.shape[0]

    @property
    def n_joints(self):
        """Articulated (posed) joints, excluding the wrist."""
        return self.skinning_weights.shape[1] - 1

    @property
    def n_shape(self):
        return self.shape_blend_shapes.shape[2]

    def rest_joints(self, shape=None):
        verts = self.rest_vertices
        if shape is not None:
            verts = verts + self.shape_blend_shapes @ np.asarray(shape, dtype=float)
        return self.rest_joint_regressor @ verts

    def mirrored(self):
        """The opposite-handedness template (mirror across the x axis;
        winding flipped so normals stay outward). Parameters are never
        mirrored - one parameterization serves both hands."""
        flip = np.array([-1.0, 1.0, 1.0])
        return replace(
            self,
            rest_vertices=self.rest_vertices * flip,
            shape_blend_shapes=self.shape_blend_shapes * flip[None, :, None],
            faces=self.faces[:, ::-1].copy(),
            handedness="left" if self.handedness == "right" else "right",
        )


def _rodrigues_batch(rvecs, xp):
    """Batched axis-angle -> rotation matrices, smooth through zero."""
    sq = (rvecs ** 2).sum(axis=-1)
    angle = xp.sqrt(sq + 1e-32)
    axis = rvecs / angle[..., None]
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = xp.zeros_like(x)
    K = xp.stack([
        xp.stack([zero, -z, y], axis=-1),
        xp.stack([z, zero, -x], axis=-1),
        xp.stack([-y, x, zero], axis=-1),
    ], axis=-2)
    eye = xp.eye(3)
    sin = xp.sin(angle)[..., None, None]
    cos = xp.cos(angle)[..., None, None]
    return eye + sin * K + (1.0 - cos) * (K @ K)


def lbs_forward(tmpl_arrays, theta, beta, phi, tau, xp=np):
    """Differentiable core of `forward`.

    tmpl_arrays: (rest_vertices, shape_blend_shapes, skinning_weights,
    rest_joint_regressor, joint_regressor, parents-as-numpy). Returns (posed
    vertices (V,3), keypoints (21,3)).
    """
    rest_v, blend, weights, rest_reg, joint_reg, parents = tmpl_arrays
    shaped = rest_v + blend @ beta            # (V,3)
    rest_j = rest_reg @ shaped                # (K,3)
    K = rest_j.shape[0]

    rots = _rodrigues_batch(xp.concatenate([phi[None], theta], axis=0), xp)
    glob_R = [rots[0]]
    glob_t = [rest_j[0] - rots[0] @ rest_j[0]]
    for k in range(1, K):
        p = int(parents[k])
        R = glob_R[p] @ rots[k]
        t = glob_R[p] @ (rest_j[k] - rest_j[p]) + glob_R[p] @ rest_j[p] + glob_t[p] - R @ rest_j[k]
        glob_R.append(R)
        glob_t.append(t)
    Rg = xp.stack(glob_R)  # (K,3,3), maps rest -> posed about each joint
    tg = xp.stack(glob_t)  # (K,3)

    per_joint = shaped @ xp.swapaxes(Rg, 1, 2) + tg[:, None, :]  # (K,V,3)
    verts = (weights.T[:, :, None] * per_joint).sum(axis=0) + tau
    joints = joint_reg @ verts
    return verts, joints


def template_arrays(template):
    return (template.rest_vertices, template.shape_blend_shapes,
            template.skinning_weights, template.rest_joint_regressor,
            template.joint_regressor, template.kinematic_tree)


def forward(template, state):
    """Pose the template with a hand state -> (HandMesh, Keypoints3D)."""
    if state.local_pose.shape != (template.n_joints, 3):
        raise ValueError("pose joint count does not match template")
    verts, joints = lbs_forward(
        template_arrays(template), state.local_pose, state.shape,
        state.global_orient, state.translation, xp=np)
    mesh = HandMesh(verts, template.faces, vertex_normals(verts, template.faces))
    return mesh, Keypoints3D(joints)


def regress_joints(template, mesh):
    verts = mesh.vertices if isinstance(mesh, HandMesh) else np.asarray(mesh)
    if verts.shape[0] != template.n_vertices:
        raise ValueError("mesh vertex count does not match template")
    return Keypoints3D(template.joint_regressor @ verts)


def _finger_layout(n_segments):
    bases = np.array([
        [-0.040, 0.072, 0.0],
        [-0.020, 0.085, 0.0],
        [0.000, 0.088, 0.0],
        [0.020, 0.084, 0.0],
        [0.040, 0.074, 0.0],
    ])
    lengths = 0.034 * (0.82 ** np.arange(n_segments))
    return bases, lengths


def make_toy_template(n_segments_per_finger=3, seed=0):
    """Procedural stick hand standing in for licensed scan data.

    Deterministic in `seed` (which only randomizes the blend-shape
    directions, scaled to 1 mm per unit shape coefficient). Fingers run
    along +y, palm normal along +z, wrist joint at the origin.
    """
    if n_segments_per_finger < 1:
        raise ValueError("need at least one segment per finger")
    n_seg = n_segments_per_finger
    n_joints = 1 + 5 * n_seg
    bases, lengths = _finger_layout(n_seg)

    verts = []
    weights_rows = []   # (joint_index, weight) lists
    region = []
    faces = []

    def add_vertex(p, wlist, reg=-1):
        verts.append(np.asarray(p, dtype=float))
        weights_rows.append(wlist)
        region.append(reg)
        return len(verts) - 1

    # wrist base ring: average is exactly the wrist joint (origin)
    base_ring = [
        add_vertex((0.014, 0.0, 0.004), [(0, 1.0)], REGION_PALM),
        add_vertex((-0.014, 0.0, 0.004), [(0, 1.0)], REGION_PALM),
        add_vertex((0.014, 0.0, -0.004), [(0, 1.0)], REGION_PALM),
        add_vertex((-0.014, 0.0, -0.004), [(0, 1.0)], REGION_PALM),
    ]
    # thin palm box
    px, py, pz = 0.048, 0.040, 0.006
    box = []
    for sy in (0.0, 1.0):
        for sx in (-1.0, 1.0):
            for sz in (-1.0, 1.0):
                box.append(add_vertex((sx * px, 0.002 + sy * 2 * py, sz * pz),
                                      [(0, 1.0)], REGION_PALM))
    # palm box faces (12 triangles over the 8 corners)
    b = box
    quads = [
        (b[0], b[1], b[3], b[2]),  # y- face
        (b[4], b[6], b[7], b[5]),  # y+ face
        (b[0], b[2], b[6], b[4]),  # z spans
        (b[1], b[5], b[7], b[3]),
        (b[0], b[4], b[5], b[1]),  # x- face
        (b[2], b[3], b[7], b[6]),  # x+ face
    ]
    for q in quads:
        faces.append((q[0], q[1], q[2]))
        faces.append((q[0], q[2], q[3]))
    # join the wrist ring to the palm box loosely (keeps the ring on the mesh)
    faces.append((base_ring[0], base_ring[1], b[0]))
    faces.append((base_ring[1], b[1], b[0]))
    faces.append((base_ring[2], b[2], base_ring[3]))
    faces.append((base_ring[3], b[2], b[3]))

    radius = 0.0065
    rest_joints = [np.zeros(3)]
    tip_indices = []
    for f in range(5):
        start = bases[f].copy()
        parent_joint = 0
        prev_ring = None
        for s in range(n_seg):
            j = 1 + f * n_seg + s
            rest_joints.append(start.copy())
            L = lengths[s]
            ring_pair = []
            for frac in (0.15, 0.85):
                ring = []
                center = start + np.array([0.0, frac * L, 0.0])
                for ang in (0.0, 0.5 * np.pi, np.pi, 1.5 * np.pi):
                    off = radius * np.array([np.cos(ang), 0.0, np.sin(ang)])
                    if frac < 0.5 and s > 0:
                        w = [(j, 0.7), (parent_joint, 0.3)]
                    else:
                        w = [(j, 1.0)]
                    reg = f if s == n_seg - 1 and frac > 0.5 else -1
                    ring.append(add_vertex(center + off, w, reg))
                ring_pair.append(ring)
            r0, r1 = ring_pair
            for k in range(4):
                k2 = (k + 1) % 4
                faces.append((r0[k], r0[k2], r1[k2]))
                faces.append((r0[k], r1[k2], r1[k]))
            if prev_ring is None:
                faces.append((r0[0], r0[2], r0[1]))
                faces.append((r0[0], r0[3], r0[2]))
            else:
                for k in range(4):
                    k2 = (k + 1) % 4
                    faces.append((prev_ring[k], prev_ring[k2], r0[k2]))
                    faces.append((prev_ring[k], r0[k2], r0[k]))
            prev_ring = r1
            parent_joint = j
            start = start + np.array([0.0, L, 0.0])
        tip = add_vertex(start + np.array([0.0, 0.004, 0.0]),
                         [(parent_joint, 1.0)], f)
        tip_indices.append(tip)
        for k in range(4):
            k2 = (k + 1) % 4
            faces.append((prev_ring[k], prev_ring[k2], tip))

    V = len(verts)
    verts = np.asarray(verts)
    faces = np.asarray(faces, dtype=int)
    weights = np.zeros((V, n_joints))
    for i, wlist in enumerate(weights_rows):
        for j, w in wlist:
            weights[i, j] += w

    parents = np.full(n_joints, -1, dtype=int)
    for f in range(5):
        for s in range(n_seg):
            j = 1 + f * n_seg + s
            parents[j] = 0 if s == 0 else j - 1

    # rest-joint regressor: wrist = mean of the base ring; finger joint (f,s)
    # is reproduced exactly by an affine combination of its segment's two
    # vertex rings (ring means sit at 0.15 L and 0.85 L along the bone).
    rest_reg = np.zeros((n_joints, V))
    rest_reg[0, base_ring] = 0.25
    a, bb = 0.85 / 0.7, -0.15 / 0.7  # solves a*0.15L + b*0.85L = 0
    vi = 4 + 8  # first finger vertex index (after base ring + palm box)
    for f in range(5):
        for s in range(n_seg):
            j = 1 + f * n_seg + s
            seg_start = vi + (f * (n_seg * 8 + 1)) + s * 8
            rest_reg[j, seg_start:seg_start + 4] = a / 4.0
            rest_reg[j, seg_start + 4:seg_start + 8] = bb / 4.0

    # 21-keypoint regressor: wrist + articulated joints + fingertips
    n_kp = 1 + 5 * n_seg + 5
    joint_reg = np.zeros((n_kp, V))
    joint_reg[:1 + 5 * n_seg] = rest_reg
    for f in range(5):
        joint_reg[1 + 5 * n_seg + f, tip_indices[f]] = 1.0

    rng = np.random.default_rng(seed)
    blend = rng.normal(size=(V, 3, 10))
    blend = 0.001 * blend / np.linalg.norm(blend, axis=1, keepdims=True)

    return HandTemplate(
        rest_vertices=verts,
        faces=faces,
        skinning_weights=weights,
        shape_blend_shapes=blend,
        joint_regressor=joint_reg,
        rest_joint_regressor=rest_reg,
        kinematic_tree=parents,
        region_labels=np.asarray(region, dtype=int),
        handedness="right",
    )


_BLOB_FIELDS = ("rest_vertices", "skinning_weights", "shape_blend_shapes",
                "joint_regressor", "rest_joint_regressor")


def save_template(dirpath, template):
    """Template bundle: manifest.json + little-endian float64 blob file."""
    os.makedirs(dirpath, exist_ok=True)
    manifest = {
        "n_vertices": int(template.n_vertices),
        "n_joints": int(template.n_joints),
        "n_shape": int(template.n_shape),
        "handedness": template.handedness,
        "kinematic_tree": template.kinematic_tree.tolist(),
        "faces": template.faces.tolist(),
        "region_labels": template.region_labels.tolist(),
        "blobs": {},
    }
    offset = 0
    blob_path = os.path.join(dirpath, "template.bin")
    with open(blob_path, "wb") as f:
        for name in _BLOB_FIELDS:
            arr = np.ascontiguousarray(getattr(template, name), dtype="<f8")
            manifest["blobs"][name] = {"offset": offset, "shape": list(arr.shape)}
            f.write(arr.tobytes())
            offset += arr.nbytes
    with open(os.path.join(dirpath, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=1)


def load_template(dirpath):
    manifest_path = os.path.join(dirpath, "manifest.json")
    if not os.path.exists(manifest_path):
        raise FileNotFoundError(f"no template manifest at {manifest_path}")
    with open(manifest_path) as f:
        manifest = json.load(f)
    blob_path = os.path.join(dirpath, "template.bin")
    with open(blob_path, "rb") as f:
        raw = f.read()
    fields = {}
    for name in _BLOB_FIELDS:
        if name not in manifest.get("blobs", {}):
            raise ValueError(f"template manifest missing blob section '{name}'")
        meta = manifest["blobs"][name]
        shape = tuple(meta["shape"])
        count = int(np.prod(shape))
        start = meta["offset"]
        end = start + count * 8
        if end > len(raw):
            raise ValueError(f"template blob truncated in section '{name}'")
        fields[name] = np.frombuffer(raw[start:end], dtype="<f8").reshape(shape).copy()
    return HandTemplate(
        rest_vertices=fields["rest_vertices"],
        faces=np.asarray(manifest["faces"], dtype=int),
        skinning_weights=fields["skinning_weights"],
        shape_blend_shapes=fields["shape_blend_shapes"],
        joint_regressor=fields["joint_regressor"],
        rest_joint_regressor=fields["rest_joint_regressor"],
        kinematic_tree=np.asarray(manifest["kinematic_tree"], dtype=int),
        region_labels=np.asarray(manifest["region_labels"], dtype=int),
        handedness=manifest.get("handedness", "right"),
    )

"""Rotation utilities shared by the whole toolkit.

Conventions: rotations are interchanged as axis-angle 3-vectors (direction =
axis, norm = angle in radians) and used internally as 3x3 matrices. All
functions are plain numpy; the differentiable (jax) counterparts live next to
the code that needs them.
"""

import numpy as np


def axis_angle_to_matrix(rvec):
    """Rodrigues formula, numerically safe at the identity."""
    rvec = np.asarray(rvec, dtype=float)
    angle = np.linalg.norm(rvec)
    if angle < 1e-12:
        # first-order expansion keeps the map smooth through zero
        K = skew(rvec)
        return np.eye(3) + K
    axis = rvec / angle
    K = skew(axis)
    return np.eye(3) + np.sin(angle) * K + (1.0 - np.cos(angle)) * (K @ K)


def matrix_to_axis_angle(R):
    R = np.asarray(R, dtype=float)
    cos = (np.trace(R) - 1.0) / 2.0
    cos = np.clip(cos, -1.0, 1.0)
    angle = np.arccos(cos)
    if angle < 1e-12:
        return np.zeros(3)
    if np.pi - angle < 1e-6:
        # near pi: extract axis from R + I (rank-1 structure)
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # fix signs using off-diagonals
        i = int(np.argmax(axis))
        if axis[i] > 0:
            for j in range(3):
                if j != i:
                    axis[j] = A[i, j] / axis[i] if axis[i] > 1e-12 else axis[j]
        axis = axis / np.linalg.norm(axis)
        return axis * angle
    axis = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    axis = axis / (2.0 * np.sin(angle))
    return axis * angle


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def geodesic_distance(r1, r2):
    """Shortest-arc angle between two axis-angle rotations, in [0, pi]."""
    R1 = axis_angle_to_matrix(r1)
    R2 = axis_angle_to_matrix(r2)
    cos = (np.trace(R1.T @ R2) - 1.0) / 2.0
    return float(np.arccos(np.clip(cos, -1.0, 1.0)))


def matrix_to_quat(R):
    """Unit quaternion (w, x, y, z) from a rotation matrix."""
    R = np.asarray(R, dtype=float)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2.0
        w = 0.25 * s
        x = (R[2, 1] - R[1, 2]) / s
        y = (R[0, 2] - R[2, 0]) / s
        z = (R[1, 0] - R[0, 1]) / s
    else:
        i = int(np.argmax(np.diag(R)))
        if i == 0:
            s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
            w = (R[2, 1] - R[1, 2]) / s
            x = 0.25 * s
            y = (R[0, 1] + R[1, 0]) / s
            z = (R[0, 2] + R[2, 0]) / s
        elif i == 1:
            s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
            w = (R[0, 2] - R[2, 0]) / s
            x = (R[0, 1] + R[1, 0]) / s
            y = 0.25 * s
            z = (R[1, 2] + R[2, 1]) / s
        else:
            s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
            w = (R[1, 0] - R[0, 1]) / s
            x = (R[0, 2] + R[2, 0]) / s
            y = (R[1, 2] + R[2, 1]) / s
            z = 0.25 * s
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q)


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_mean(quats, weights=None):
    """Chordal (eigenvector) mean of unit quaternions, sign-aligned."""
    quats = np.asarray(quats, dtype=float)
    if weights is None:
        weights = np.ones(len(quats))
    weights = np.asarray(weights, dtype=float)
    A = np.zeros((4, 4))
    for q, w in zip(quats, weights):
        q = q / np.linalg.norm(q)
        A += w * np.outer(q, q)
    vals, vecs = np.linalg.eigh(A)
    q = vecs[:, -1]
    if q[0] < 0:
        q = -q
    return q


def rotation_mean(rvecs, weights=None):
    """Weighted mean of axis-angle rotations via the quaternion chordal mean."""
    quats = [matrix_to_quat(axis_angle_to_matrix(r)) for r in rvecs]
    return matrix_to_axis_angle(quat_to_matrix(quat_mean(quats, weights)))


def slerp_matrix(R0, R1, alpha):
    """Geodesic interpolation between two rotation matrices."""
    delta = matrix_to_axis_angle(np.asarray(R0).T @ np.asarray(R1))
    return np.asarray(R0) @ axis_angle_to_matrix(alpha * delta)


def random_rotation(rng):
    """Uniform random rotation matrix (via random quaternion)."""
    q = rng.normal(size=4)
    return quat_to_matrix(q / np.linalg.norm(q))


def is_rotation(R, tol=1e-9):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        return False
    return (np.allclose(R.T @ R, np.eye(3), atol=tol)
            and abs(np.linalg.det(R) - 1.0) < tol)

"""Pinhole camera model and SE(3) pose algebra.

Poses are unit-quaternion plus translation. A ``PoseSE3`` is a rigid
transform ``x_out = R @ x_in + t``; whether that means camera-from-world or
world-from-camera is a property of the variable, not the type. Keyframes
store world-from-camera. Twist vectors are ordered (translation, rotation).

Pixel coordinates are (u, v) with u along image columns. A reprojection is
valid only when the camera-space depth exceeds ``Z_EPS`` and all four
bilinear neighbors of the target pixel are inside the image; out-of-bounds
projections are flagged, never clamped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape as tp

Z_EPS = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics for a fixed image size."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    def pixel_grid(self) -> tuple[np.ndarray, np.ndarray]:
        """Full-image (u, v) coordinate arrays, each (H, W) float64."""
        v, u = np.mgrid[0:self.height, 0:self.width]
        return u.astype(np.float64), v.astype(np.float64)

    def rays(self) -> np.ndarray:
        """Unit-depth camera rays per pixel, shape (H, W, 3), z = 1."""
        u, v = self.pixel_grid()
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy,
                         np.ones_like(u)], axis=-1)


def _qnormalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ValueError("zero quaternion")
    q = q / n
    return -q if q[0] < 0 else q


def _qmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw])


def _qrot_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _skew(v: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]],
                     [v[2], 0.0, -v[0]],
                     [-v[1], v[0], 0.0]])


class PoseSE3:
    """Rigid transform with unit quaternion (w, x, y, z) and translation."""

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        self.q = _qnormalize(q)
        self.t = np.asarray(t, dtype=np.float64).reshape(3).copy()

    @classmethod
    def identity(cls) -> "PoseSE3":
        return cls(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "PoseSE3":
        m = np.asarray(m, dtype=np.float64)
        r = m[:3, :3]
        w = np.sqrt(max(0.0, 1.0 + r[0, 0] + r[1, 1] + r[2, 2])) / 2.0
        if w > 1e-8:
            q = np.array([w,
                          (r[2, 1] - r[1, 2]) / (4 * w),
                          (r[0, 2] - r[2, 0]) / (4 * w),
                          (r[1, 0] - r[0, 1]) / (4 * w)])
        else:
            # Rotation near pi: recover the dominant axis component first.
            i = int(np.argmax([r[0, 0], r[1, 1], r[2, 2]]))
            j, k = (i + 1) % 3, (i + 2) % 3
            s = np.sqrt(max(0.0, 1.0 + r[i, i] - r[j, j] - r[k, k])) * 2.0
            q = np.zeros(4)
            q[0] = (r[k, j] - r[j, k]) / s
            q[1 + i] = s / 4.0
            q[1 + j] = (r[j, i] + r[i, j]) / s
            q[1 + k] = (r[k, i] + r[i, k]) / s
        return cls(q, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation()
        m[:3, 3] = self.t
        return m

    def rotation(self) -> np.ndarray:
        return _qrot_matrix(self.q)

    def compose(self, other: "PoseSE3") -> "PoseSE3":
        """self after other: (self * other)(x) = self(other(x))."""
        return PoseSE3(_qmul(self.q, other.q), self.rotation() @ other.t + self.t)

    def inverse(self) -> "PoseSE3":
        qinv = self.q * np.array([1.0, -1.0, -1.0, -1.0])
        return PoseSE3(qinv, -(_qrot_matrix(qinv) @ self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points, shape (..., 3)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation().T + self.t

    def copy(self) -> "PoseSE3":
        return PoseSE3(self.q.copy(), self.t.copy())

    def __repr__(self):
        return f"PoseSE3(q={np.round(self.q, 6)}, t={np.round(self.t, 6)})"


def se3_exp(xi: np.ndarray) -> PoseSE3:
    """Exponential map from a twist (rho, phi) to a pose."""
    xi = np.asarray(xi, dtype=np.float64).reshape(6)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    if theta < 1e-9:
        half = 0.5 * phi
        q = _qnormalize(np.array([1.0, half[0], half[1], half[2]]))
        vmat = np.eye(3) + 0.5 * _skew(phi)
    else:
        axis = phi / theta
        q = np.concatenate([[np.cos(theta / 2.0)], np.sin(theta / 2.0) * axis])
        k = _skew(phi)
        vmat = (np.eye(3)
                + ((1.0 - np.cos(theta)) / theta ** 2) * k
                + ((theta - np.sin(theta)) / theta ** 3) * (k @ k))
    return PoseSE3(q, vmat @ rho)


def se3_log(pose: PoseSE3) -> np.ndarray:
    """Logarithm map; inverse of ``se3_exp`` for rotation angles below pi."""
    w = np.clip(pose.q[0], -1.0, 1.0)
    vec = pose.q[1:]
    s = np.linalg.norm(vec)
    if s < 1e-9:
        phi = 2.0 * vec
        vinv = np.eye(3) - 0.5 * _skew(phi)
    else:
        theta = 2.0 * np.arctan2(s, w)
        phi = (theta / s) * vec
        k = _skew(phi)
        half = theta / 2.0
        cot = half / np.tan(half)
        vinv = np.eye(3) - 0.5 * k + ((1.0 - cot) / theta ** 2) * (k @ k)
    return np.concatenate([vinv @ pose.t, phi])


def pose_distance(a: PoseSE3, b: PoseSE3) -> float:
    """Translation distance plus half the rotation angle between two poses."""
    dt = float(np.linalg.norm(a.t - b.t))
    dot = abs(float(np.dot(a.q, b.q)))
    angle = 2.0 * np.arccos(np.clip(dot, -1.0, 1.0))
    return dt + 0.5 * angle


def relative_pose(pose_wc_from: PoseSE3, pose_wc_to: PoseSE3) -> PoseSE3:
    """Transform taking points in the 'from' camera to the 'to' camera.

    Both arguments are world-from-camera poses.
    """
    return pose_wc_to.inverse().compose(pose_wc_from)


def project(K: Intrinsics, points_cam: np.ndarray):
    """Project camera-space points to pixels.

    Returns (uv, valid, z); valid requires z > Z_EPS and all four bilinear
    neighbors of the pixel inside the image.
    """
    pts = np.asarray(points_cam, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    z = pts[:, 2]
    safe = np.where(np.abs(z) > Z_EPS, z, 1.0)
    u = K.fx * pts[:, 0] / safe + K.cx
    v = K.fy * pts[:, 1] / safe + K.cy
    valid = (z > Z_EPS) & (u >= 0.0) & (u <= K.width - 1.0) & (v >= 0.0) & (v <= K.height - 1.0)
    uv = np.stack([u, v], axis=-1)
    if single:
        return uv[0], bool(valid[0]), float(z[0])
    return uv, valid, z


def backproject(K: Intrinsics, uv: np.ndarray, depth) -> np.ndarray:
    """Lift pixels at the given camera-space depth; depth is the z coordinate."""
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = np.atleast_2d(uv)
    d = np.broadcast_to(np.asarray(depth, dtype=np.float64), (uv.shape[0],))
    pts = np.stack([(uv[:, 0] - K.cx) / K.fx * d,
                    (uv[:, 1] - K.cy) / K.fy * d,
                    d], axis=-1)
    return pts[0] if single else pts


def reproject(K: Intrinsics, t_from_to: PoseSE3, uv: np.ndarray, depth):
    """Warp pixels of one view into another given per-pixel depth.

    ``t_from_to`` maps source-camera points into the target camera. Returns
    (uv_target, valid, z_target).
    """
    pts = backproject(K, uv, depth)
    return project(K, t_from_to.apply(pts))


def reproject_map(K: Intrinsics, t_rel: PoseSE3, depth):
    """Differentiable full-image warp for a depth map on the tape.

    ``depth`` is an (H, W) tensor or array; returns (u, v, z) of the same
    kind with shape (H, W). Validity is the caller's job: z > Z_EPS plus the
    bilinear sampler's in-image test. The division is guarded by clamping z
    from below through the abs identity, which is exact wherever z > Z_EPS,
    so guarded pixels are precisely the invalid ones.
    """
    rays = K.rays()
    r = t_rel.rotation()
    t = t_rel.t
    # Camera point is depth * ray; rotation is linear so the rays can be
    # rotated once up front: x' = depth * (R @ ray) + t.
    rot_rays = rays @ r.T
    rx, ry, rz = rot_rays[..., 0], rot_rays[..., 1], rot_rays[..., 2]
    x = tp.add(tp.mul(depth, rx), float(t[0]))
    y = tp.add(tp.mul(depth, ry), float(t[1]))
    z = tp.add(tp.mul(depth, rz), float(t[2]))
    # max(z, eps) = ((z + eps) + |z - eps|) / 2
    zsafe = tp.mul(tp.add(tp.add(z, Z_EPS), tp.abs_(tp.sub(z, Z_EPS))), 0.5)
    zinv = tp.reciprocal(zsafe)
    u = tp.add(tp.mul(tp.mul(x, zinv), float(K.fx)), float(K.cx))
    v = tp.add(tp.mul(tp.mul(y, zinv), float(K.fy)), float(K.cy))
    return u, v, z

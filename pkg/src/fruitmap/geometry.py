"""Sim(3) group operations, tangent-space helpers, and the pinhole camera model.

Conventions:
  - A similarity transform maps points as ``p' = s * R @ p + t``.
  - Tangent vectors are 7-vectors ordered (translation, rotation, log-scale):
    ``xi = [rho_x, rho_y, rho_z, w_x, w_y, w_z, log_s]``.
  - Rotation tangents are axis-angle; log() canonicalizes the angle to [0, pi].
  - Perturbations are applied on the left: ``T <- exp(delta) @ T``.

All functions are pure and operate on float64 arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# tangent vector layout
TRANS = slice(0, 3)
ROT = slice(3, 6)
LOG_SCALE = 6

_EPS_ANGLE = 1e-8
_EPS_SCALE = 1e-8


def skew(v: np.ndarray) -> np.ndarray:
    """Skew-symmetric matrix such that skew(a) @ b == cross(a, b)."""
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


@dataclass(frozen=True)
class Sim3Transform:
    """Similarity transform with positive scale, rotation matrix, translation.

    Maps points as ``p' = scale * rotation @ p + translation``.
    """

    scale: float
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @staticmethod
    def identity() -> "Sim3Transform":
        return Sim3Transform(1.0, np.eye(3), np.zeros(3))

    def validate(self, tol: float = 1e-9) -> None:
        """Raise ValueError if this is not a valid Sim(3) element."""
        if not np.isfinite(self.scale) or self.scale <= 0.0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise ValueError("non-finite transform entries")
        if np.max(np.abs(R @ R.T - np.eye(3))) > tol:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > tol:
            raise ValueError("rotation determinant is not +1")

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix [[s*R, t], [0, 1]]."""
        M = np.eye(4)
        M[:3, :3] = self.scale * self.rotation
        M[:3, 3] = self.translation
        return M

    def apply(self, points: np.ndarray) -> np.ndarray:
        return sim3_apply(self, points)

    def compose(self, other: "Sim3Transform") -> "Sim3Transform":
        """Return self @ other (apply other first)."""
        return Sim3Transform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Sim3Transform":
        Rinv = self.rotation.T
        return Sim3Transform(
            1.0 / self.scale,
            Rinv,
            -Rinv @ self.translation / self.scale,
        )


def so3_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues rotation from an axis-angle vector."""
    theta = np.linalg.norm(w)
    W = skew(w)
    if theta < _EPS_ANGLE:
        # second-order series is exact to machine precision here
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """Unit quaternion [w, x, y, z] with w >= 0 (Shepperd's method)."""
    t = np.trace(R)
    q = np.empty(4)
    if t > 0.0:
        r = np.sqrt(1.0 + t)
        q[0] = 0.5 * r
        q[1] = 0.5 * (R[2, 1] - R[1, 2]) / r
        q[2] = 0.5 * (R[0, 2] - R[2, 0]) / r
        q[3] = 0.5 * (R[1, 0] - R[0, 1]) / r
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        r = np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q[0] = 0.5 * (R[k, j] - R[j, k]) / r
        q[1 + i] = 0.5 * r
        q[1 + j] = 0.5 * (R[j, i] + R[i, j]) / r
        q[1 + k] = 0.5 * (R[k, i] + R[i, k]) / r
    if q[0] < 0.0:
        q = -q
    return q / np.linalg.norm(q)


def so3_log(R: np.ndarray) -> np.ndarray:
    """Axis-angle vector of a rotation matrix, angle canonicalized to [0, pi]."""
    q = rotation_to_quaternion(R)
    w, v = q[0], q[1:]
    vn = np.linalg.norm(v)
    if vn < _EPS_ANGLE:
        # angle ~ 0: log(q) ~ 2*v/w with cubic correction
        return (2.0 / w) * v * (1.0 - vn**2 / (3.0 * w**2))
    angle = 2.0 * np.arctan2(vn, w)
    return (angle / vn) * v


def _sim3_w_coefficients(w: np.ndarray, sigma: float) -> tuple[float, float, float]:
    """Coefficients (c0, c1, c2) of W = c0*I + c1*skew(w) + c2*skew(w)^2.

    W = integral_0^1 e^(u*sigma) * exp(u*skew(w)) du couples translation with
    rotation and scale in the exponential map.
    """
    theta = np.linalg.norm(w)
    small_s = abs(sigma) < 1e-5
    small_t = theta < 1e-5
    es = np.exp(sigma)
    if small_s:
        c0 = 1.0 + sigma / 2.0 + sigma**2 / 6.0
    else:
        c0 = np.expm1(sigma) / sigma
    if small_s and small_t:
        c1 = 0.5 + sigma / 3.0 - theta**2 / 24.0
        c2 = 1.0 / 6.0 + sigma / 8.0 - theta**2 / 120.0
    elif small_t:
        # limit theta -> 0 of the closed forms below
        c1 = (es * (sigma - 1.0) + 1.0) / sigma**2
        c2 = (es * (sigma**2 - 2.0 * sigma + 2.0) - 2.0) / (2.0 * sigma**3)
    else:
        denom = sigma**2 + theta**2
        i_sin = (theta + es * (sigma * np.sin(theta) - theta * np.cos(theta))) / denom
        i_cos = (-sigma + es * (sigma * np.cos(theta) + theta * np.sin(theta))) / denom
        c1 = i_sin / theta
        c2 = (c0 - i_cos) / theta**2
    return float(c0), float(c1), float(c2)


def sim3_exp(xi: np.ndarray) -> Sim3Transform:
    """Exponential map from a 7-vector (trans, rot, log-scale) to Sim(3)."""
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (7,):
        raise ValueError(f"tangent vector must have shape (7,), got {xi.shape}")
    rho, w, sigma = xi[TRANS], xi[ROT], float(xi[LOG_SCALE])
    R = so3_exp(w)
    c0, c1, c2 = _sim3_w_coefficients(w, sigma)
    W = skew(w)
    Wmat = c0 * np.eye(3) + c1 * W + c2 * W @ W
    return Sim3Transform(float(np.exp(sigma)), R, Wmat @ rho)


def sim3_log(T: Sim3Transform) -> np.ndarray:
    """Inverse of sim3_exp; rotation angle lands in [0, pi]."""
    sigma = float(np.log(T.scale))
    w = so3_log(T.rotation)
    c0, c1, c2 = _sim3_w_coefficients(w, sigma)
    W = skew(w)
    Wmat = c0 * np.eye(3) + c1 * W + c2 * W @ W
    rho = np.linalg.solve(Wmat, T.translation)
    xi = np.empty(7)
    xi[TRANS] = rho
    xi[ROT] = w
    xi[LOG_SCALE] = sigma
    return xi


def sim3_apply(T: Sim3Transform, points: np.ndarray) -> np.ndarray:
    """Transform one (3,) point or an (n, 3) batch."""
    p = np.asarray(points, dtype=float)
    return T.scale * p @ T.rotation.T + T.translation


def sim3_point_jacobian(p: np.ndarray) -> np.ndarray:
    """Derivative of exp(delta) @ p at delta = 0 for a point already in the
    target frame: the 3x7 block matrix [I | -skew(p) | p].
    """
    p = np.asarray(p, dtype=float)
    J = np.empty((3, 7))
    J[:, 0:3] = np.eye(3)
    J[:, 3:6] = -skew(p)
    J[:, 6] = p
    return J


def sim3_point_jacobians(points: np.ndarray) -> np.ndarray:
    """Batched sim3_point_jacobian: (n, 3) points -> (n, 3, 7)."""
    p = np.asarray(points, dtype=float)
    n = p.shape[0]
    J = np.zeros((n, 3, 7))
    J[:, 0, 0] = 1.0
    J[:, 1, 1] = 1.0
    J[:, 2, 2] = 1.0
    J[:, 0, 4] = p[:, 2]
    J[:, 0, 5] = -p[:, 1]
    J[:, 1, 3] = -p[:, 2]
    J[:, 1, 5] = p[:, 0]
    J[:, 2, 3] = p[:, 1]
    J[:, 2, 4] = -p[:, 0]
    J[:, :, 6] = p
    return J


def sim3_retract(T: Sim3Transform, delta: np.ndarray) -> Sim3Transform:
    """Left-multiplicative update T <- exp(delta) @ T."""
    return sim3_exp(delta).compose(T)


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    def matrix(self) -> np.ndarray:
        return np.array([
            [self.fx, 0.0, self.cx],
            [0.0, self.fy, self.cy],
            [0.0, 0.0, 1.0],
        ])

    def scaled(self, factor: float) -> "CameraIntrinsics":
        """Intrinsics for an image resized by `factor`."""
        return CameraIntrinsics(
            self.fx * factor, self.fy * factor,
            self.cx * factor, self.cy * factor,
            int(round(self.width * factor)), int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class CameraPose:
    """Rigid world-from-camera transform (scale fixed to 1)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.eye(3), np.zeros(3))

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.translation

    def camera_to_world(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return (p - self.translation) @ self.rotation


def backproject(pixels: np.ndarray, depths: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Camera-frame points d * K^-1 * (u, v, 1) for (n, 2) pixels, (n,) depths.

    Depths are z-depths in meters; non-positive depth raises ValueError.
    """
    uv = np.atleast_2d(np.asarray(pixels, dtype=float))
    d = np.atleast_1d(np.asarray(depths, dtype=float))
    if np.any(d <= 0.0):
        raise ValueError("depth must be positive")
    pts = np.empty((uv.shape[0], 3))
    pts[:, 0] = (uv[:, 0] - K.cx) / K.fx * d
    pts[:, 1] = (uv[:, 1] - K.cy) / K.fy * d
    pts[:, 2] = d
    return pts if np.asarray(pixels).ndim == 2 else pts[0]


def project(points_cam: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of (n, 3) camera-frame points (z > 0 assumed)."""
    p = np.atleast_2d(np.asarray(points_cam, dtype=float))
    uv = np.empty((p.shape[0], 2))
    uv[:, 0] = K.fx * p[:, 0] / p[:, 2] + K.cx
    uv[:, 1] = K.fy * p[:, 1] / p[:, 2] + K.cy
    return uv if np.asarray(points_cam).ndim == 2 else uv[0]


def pixel_rays(pixels: np.ndarray, K: CameraIntrinsics) -> np.ndarray:
    """Unnormalized camera-frame ray directions K^-1 (u, v, 1), z = 1."""
    uv = np.atleast_2d(np.asarray(pixels, dtype=float))
    rays = np.empty((uv.shape[0], 3))
    rays[:, 0] = (uv[:, 0] - K.cx) / K.fx
    rays[:, 1] = (uv[:, 1] - K.cy) / K.fy
    rays[:, 2] = 1.0
    return rays

"""Core geometric records: splats, cameras, images, covariance handling.

Quaternions are (w, x, y, z), right-handed.  Covariances follow the
R diag(s)^2 R^T factorization; the 2D projection uses the standard EWA
linearization with a 0.3 px^2 low-pass term on the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, InvalidParameterError

QUAT_TOL = 1e-6
ROT_TOL = 1e-6
DEFAULT_NEAR = 0.01
LOWPASS_PX2 = 0.3


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    """Rotation matrix of a unit quaternion (w, x, y, z)."""
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass
class GaussianPrimitive:
    """One anisotropic splat.  Opacity is never stored; it is derived from
    the SDF value via the learned bandwidth (see field.sdf_to_opacity)."""

    center: np.ndarray
    rotation: np.ndarray  # unit quaternion (w, x, y, z)
    scales: np.ndarray  # strictly positive
    color: np.ndarray  # RGB in [0, 1]
    sdf: float = 0.0
    level: int = 0
    birth_iteration: int = 0

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.scales = np.asarray(self.scales, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        if np.any(self.scales <= 0):
            raise InvalidParameterError("scales must be strictly positive")
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_TOL:
            raise InvalidParameterError("rotation quaternion must be unit norm")

    def covariance(self) -> np.ndarray:
        return covariance_from_params(self.rotation, self.scales)


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera rigid transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray  # 3x3 world-to-camera
    translation: np.ndarray  # 3-vector, camera = R @ world + t

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidParameterError("principal point must lie inside the image")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > ROT_TOL:
            raise InvalidParameterError("camera rotation must be orthonormal")

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """World-space ray origins/directions through every pixel center."""
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        d_cam = np.stack(
            [(uu - self.cx) / self.fx, (vv - self.cy) / self.fy, np.ones_like(uu)],
            axis=-1,
        )
        d_world = d_cam @ self.rotation  # = R^T applied row-wise
        d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
        origin = self.camera_center()
        return origin, d_world


@dataclass
class ImageBuffer:
    """Row-major float image, 1 or 3 channels, shape (height, width, channels).

    Color data must be finite; depth maps may carry the +inf no-hit
    sentinel (allow_inf=True).  NaNs are never allowed.
    """

    width: int
    height: int
    channels: int
    data: np.ndarray = field(default=None)
    allow_inf: bool = False

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise InvalidInputError("channels must be 1 or 3")
        if self.data is None:
            self.data = np.zeros((self.height, self.width, self.channels))
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.shape != (self.height, self.width, self.channels):
            raise InvalidInputError(
                f"data shape {self.data.shape} does not match "
                f"({self.height}, {self.width}, {self.channels})"
            )
        if np.any(np.isnan(self.data)):
            raise InvalidInputError("image data must not contain NaN")
        if not self.allow_inf and not np.all(np.isfinite(self.data)):
            raise InvalidInputError("image data must be finite")

    @classmethod
    def from_array(cls, array: np.ndarray, allow_inf=False) -> "ImageBuffer":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 2:
            array = array[:, :, None]
        h, w, c = array.shape
        return cls(width=w, height=h, channels=c, data=array, allow_inf=allow_inf)


def covariance_from_params(q: np.ndarray, s: np.ndarray) -> np.ndarray:
    """3D covariance R diag(s)^2 R^T; symmetric PD with eigenvalues s_i^2."""
    q = np.asarray(q, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
        raise InvalidParameterError("quaternion must be unit norm within 1e-6")
    if np.any(s <= 0):
        raise InvalidParameterError("scales must be strictly positive")
    rot = quaternion_to_rotation(q)
    cov = (rot * (s * s)) @ rot.T
    return 0.5 * (cov + cov.T)


def projection_jacobian(t: np.ndarray, fx: float, fy: float) -> np.ndarray:
    """Jacobian of the pinhole projection at camera-space point t."""
    tx, ty, tz = t
    return np.array(
        [
            [fx / tz, 0.0, -fx * tx / (tz * tz)],
            [0.0, fy / tz, -fy * ty / (tz * tz)],
        ]
    )


def project_gaussian(g: GaussianPrimitive, cam: Camera, near: float = DEFAULT_NEAR):
    """Project one splat into screen space.

    Returns (mean2d, cov2d, depth), or None when the center is behind the
    near plane ("culled" marker, not an error).
    """
    t = cam.rotation @ g.center + cam.translation
    if t[2] <= near:
        return None
    mean2d = np.array([cam.fx * t[0] / t[2] + cam.cx, cam.fy * t[1] / t[2] + cam.cy])
    jw = projection_jacobian(t, cam.fx, cam.fy) @ cam.rotation
    cov2d = jw @ g.covariance() @ jw.T
    cov2d = 0.5 * (cov2d + cov2d.T)
    cov2d[0, 0] += LOWPASS_PX2
    cov2d[1, 1] += LOWPASS_PX2
    return mean2d, cov2d, float(t[2])

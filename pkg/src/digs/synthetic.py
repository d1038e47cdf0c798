"""Ground-truth factory: analytic-SDF scenes, sphere-traced reference
renders, exact depth/normal maps, and SfM-style sparse surface points.

Stands in for real capture data: cameras sit on a Fibonacci sphere at 2.5x
the scene radius, images use fixed two-light Lambertian shading (geometry
signal without view dependence), and every random draw flows from one seed
through named substreams.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InvalidInputError
from .scene import Camera, ImageBuffer

HIT_EPS = 1e-5
NORMAL_STEP = 1e-5
MAX_STEPS = 256
BOUNDS_PAD = 0.2
CAMERA_RADIUS_FACTOR = 2.5
EVAL_EVERY = 8
NO_HIT = np.inf

LIGHT_DIRS = np.array([[0.5, 0.7, 0.5], [-0.6, -0.2, 0.6]])
LIGHT_DIRS = LIGHT_DIRS / np.linalg.norm(LIGHT_DIRS, axis=1, keepdims=True)
LIGHT_WEIGHTS = np.array([0.55, 0.25])
AMBIENT = 0.25


def substream(seed: int, name: str) -> np.random.Generator:
    """Named, reproducible RNG substream derived from the master seed."""
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(name.encode())]))


@dataclass
class AnalyticScene:
    """Closed-form scene: Lipschitz-1 SDF, positional albedo, padded bounds."""

    name: str
    sdf: callable  # (N,3) -> (N,)
    albedo: callable  # (N,3) -> (N,3) in [0,1]
    radius: float  # radius of a bounding sphere of the geometry
    bounds: tuple = dc_field(default=None)  # (lo, hi), padded

    def __post_init__(self):
        if self.bounds is None:
            ext = self.radius * (1.0 + BOUNDS_PAD)
            self.bounds = (-np.full(3, ext), np.full(3, ext))

    def normal(self, points: np.ndarray) -> np.ndarray:
        """Central-difference SDF gradient, normalized."""
        points = np.atleast_2d(points)
        grad = np.empty_like(points)
        for axis in range(3):
            step = np.zeros(3)
            step[axis] = NORMAL_STEP
            grad[:, axis] = self.sdf(points + step) - self.sdf(points - step)
        norm = np.linalg.norm(grad, axis=1, keepdims=True)
        return grad / np.maximum(norm, 1e-30)


def _tint(points: np.ndarray, base: np.ndarray) -> np.ndarray:
    wave = 0.12 * np.sin(3.0 * points)
    return np.clip(base + wave, 0.05, 0.95)


def sphere_scene(radius=1.0) -> AnalyticScene:
    base = np.array([0.75, 0.35, 0.25])
    return AnalyticScene(
        name="sphere",
        sdf=lambda p: np.linalg.norm(np.atleast_2d(p), axis=-1) - radius,
        albedo=lambda p: _tint(np.atleast_2d(p), base),
        radius=radius,
    )


def box_scene(half=(0.7, 0.5, 0.6)) -> AnalyticScene:
    half_arr = np.asarray(half, dtype=np.float64)
    base = np.array([0.3, 0.55, 0.8])

    def sdf(p):
        q = np.abs(np.atleast_2d(p)) - half_arr
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return outside + inside

    return AnalyticScene(
        name="box",
        sdf=sdf,
        albedo=lambda p: _tint(np.atleast_2d(p), base),
        radius=float(np.linalg.norm(half_arr)),
    )


def torus_scene(major=0.8, minor=0.3) -> AnalyticScene:
    base = np.array([0.55, 0.7, 0.3])

    def sdf(p):
        p = np.atleast_2d(p)
        ring = np.sqrt(p[:, 0] ** 2 + p[:, 1] ** 2) - major
        return np.sqrt(ring * ring + p[:, 2] ** 2) - minor

    return AnalyticScene(
        name="torus",
        sdf=sdf,
        albedo=lambda p: _tint(np.atleast_2d(p), base),
        radius=major + minor,
    )


def sphere_box_scene() -> AnalyticScene:
    sph = sphere_scene(0.6)
    box = box_scene((0.45, 0.45, 0.45))
    shift = np.array([0.55, 0.0, 0.0])
    base = np.array([0.7, 0.5, 0.3])

    def sdf(p):
        p = np.atleast_2d(p)
        return np.minimum(sph.sdf(p + shift), box.sdf(p - shift))

    return AnalyticScene(
        name="sphere_box",
        sdf=sdf,
        albedo=lambda p: _tint(np.atleast_2d(p), base),
        radius=1.2,
    )


SCENES = {
    "sphere": sphere_scene,
    "box": box_scene,
    "torus": torus_scene,
    "sphere_box": sphere_box_scene,
}


def make_scene(name: str, **kwargs) -> AnalyticScene:
    if name not in SCENES:
        raise InvalidInputError(f"unknown scene {name!r}; have {sorted(SCENES)}")
    return SCENES[name](**kwargs)


# -- sphere tracing ------------------------------------------------------------


def raymarch(scene: AnalyticScene, origins, directions, t_max=None):
    """Sphere tracing.  Returns (hit, t, normal) arrays; misses get t=inf
    and a zero normal."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    origins, directions = np.broadcast_arrays(origins, directions)
    n = len(origins)
    if t_max is None:
        t_max = 2.0 * CAMERA_RADIUS_FACTOR * scene.radius + 2.0 * scene.radius
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(MAX_STEPS):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        pts = origins[idx] + t[idx, None] * directions[idx]
        d = scene.sdf(pts)
        newly_hit = np.abs(d) < HIT_EPS
        hit_ids = idx[newly_hit]
        hit[hit_ids] = True
        active[hit_ids] = False
        move = idx[~newly_hit]
        t[move] += d[~newly_hit]
        overshoot = move[t[move] > t_max]
        active[overshoot] = False
    t = np.where(hit, t, NO_HIT)
    normals = np.zeros((n, 3))
    if hit.any():
        pts = origins[hit] + t[hit, None] * directions[hit]
        normals[hit] = scene.normal(pts)
    return hit, t, normals


# -- cameras ----------------------------------------------------------------------


def fibonacci_directions(n: int) -> np.ndarray:
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    r = np.sqrt(np.maximum(1.0 - z * z, 0.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def look_at_camera(eye, target, width, height, fov_deg=55.0) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    xc = np.cross(up, forward)
    xc /= np.linalg.norm(xc)
    yc = np.cross(forward, xc)
    rot = np.stack([xc, yc, forward])
    focal = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    return Camera(
        fx=focal, fy=focal, cx=width / 2.0, cy=height / 2.0,
        width=width, height=height, rotation=rot, translation=-rot @ eye,
    )


def camera_rig(scene: AnalyticScene, n_cameras: int, width: int, height: int):
    dirs = fibonacci_directions(n_cameras)
    dist = CAMERA_RADIUS_FACTOR * scene.radius
    return [
        look_at_camera(dist * d, np.zeros(3), width, height) for d in dirs
    ]


# -- dataset -------------------------------------------------------------------


@dataclass
class SyntheticDataset:
    scene_name: str
    cameras: list
    images: list
    depths: list
    normals: list
    sparse_points: np.ndarray
    sparse_colors: np.ndarray
    train_ids: list
    eval_ids: list
    bounds: tuple
    seed: int
    scene: AnalyticScene = None


def shade(scene: AnalyticScene, points: np.ndarray, normals: np.ndarray) -> np.ndarray:
    lambert = AMBIENT + sum(
        w * np.maximum(normals @ l, 0.0) for w, l in zip(LIGHT_WEIGHTS, LIGHT_DIRS)
    )
    return np.clip(scene.albedo(points) * lambert[:, None], 0.0, 1.0)


def render_view(scene: AnalyticScene, cam: Camera):
    """Exact ray-marched color/depth/normal maps for one camera."""
    origin, dirs = cam.pixel_rays()
    flat_dirs = dirs.reshape(-1, 3)
    origins = np.broadcast_to(origin, flat_dirs.shape)
    hit, t, normals = raymarch(scene, origins, flat_dirs)
    color = np.zeros((len(flat_dirs), 3))
    depth = np.full(len(flat_dirs), NO_HIT)
    if hit.any():
        pts = origins[hit] + t[hit, None] * flat_dirs[hit]
        color[hit] = shade(scene, pts, normals[hit])
        depth[hit] = (pts @ cam.rotation.T + cam.translation)[:, 2]
    h, w = cam.height, cam.width
    return (
        ImageBuffer.from_array(color.reshape(h, w, 3)),
        ImageBuffer.from_array(depth.reshape(h, w, 1), allow_inf=True),
        ImageBuffer.from_array(normals.reshape(h, w, 3)),
    )


def sample_surface_points(scene: AnalyticScene, n_points: int, rng) -> np.ndarray:
    """Rejection-sample surface hits with random inward rays."""
    points = []
    dist = CAMERA_RADIUS_FACTOR * scene.radius
    while sum(len(p) for p in points) < n_points:
        batch = max(n_points, 256)
        dirs = rng.normal(size=(batch, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = dist * dirs
        targets = rng.uniform(-0.3, 0.3, size=(batch, 3)) * scene.radius
        rays = targets - origins
        rays /= np.linalg.norm(rays, axis=1, keepdims=True)
        hit, t, _ = raymarch(scene, origins, rays)
        if hit.any():
            points.append(origins[hit] + t[hit, None] * rays[hit])
    return np.concatenate(points)[:n_points]


def generate_dataset(scene: AnalyticScene, n_cameras=16, image_size=64,
                     n_sparse_points=2000, seed=0) -> SyntheticDataset:
    """Cameras, reference renders, exact depth/normal maps, surface points."""
    if n_cameras < 2:
        raise InvalidInputError("need at least two cameras")
    if image_size < 8 or n_sparse_points < 1:
        raise InvalidInputError("invalid image size or point count")
    cams = camera_rig(scene, n_cameras, image_size, image_size)
    images, depths, normals = [], [], []
    for cam in cams:
        img, dep, nrm = render_view(scene, cam)
        images.append(img)
        depths.append(dep)
        normals.append(nrm)
    pts = sample_surface_points(scene, n_sparse_points, substream(seed, "sparse_points"))
    colors = scene.albedo(pts)
    eval_ids = [i for i in range(n_cameras) if i % EVAL_EVERY == 0]
    train_ids = [i for i in range(n_cameras) if i % EVAL_EVERY != 0]
    return SyntheticDataset(
        scene_name=scene.name,
        cameras=cams,
        images=images,
        depths=depths,
        normals=normals,
        sparse_points=pts,
        sparse_colors=colors,
        train_ids=train_ids,
        eval_ids=eval_ids,
        bounds=scene.bounds,
        seed=seed,
        scene=scene,
    )


def half_coverage_variant(dataset: SyntheticDataset) -> SyntheticDataset:
    """Growth fixture: sparse points restricted to the z > 0 hemisphere;
    cameras and images untouched."""
    mask = dataset.sparse_points[:, 2] > 0.0
    return SyntheticDataset(
        scene_name=dataset.scene_name + "_half",
        cameras=dataset.cameras,
        images=dataset.images,
        depths=dataset.depths,
        normals=dataset.normals,
        sparse_points=dataset.sparse_points[mask].copy(),
        sparse_colors=dataset.sparse_colors[mask].copy(),
        train_ids=list(dataset.train_ids),
        eval_ids=list(dataset.eval_ids),
        bounds=dataset.bounds,
        seed=dataset.seed,
        scene=dataset.scene,
    )

"""Differentiable splatting: projection, depth sorting, tiled front-to-back
compositing, and the hand-written backward pass into Gaussian parameters.

The per-pixel kernels exist twice: a Cython extension (preferred) and a
pure-Python fallback, selected at import or forced with DIGS_BACKEND=python.
Both produce bit-identical images; `benchmarks/bench_compositing.py`
compares their throughput.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .. import tape as T
from ..scene import DEFAULT_NEAR, LOWPASS_PX2, Camera, ImageBuffer
from . import _kernels_py

try:  # pragma: no cover - availability depends on the build
    from . import _kernels_cy

    _HAVE_COMPILED = True
except ImportError:  # pragma: no cover
    _kernels_cy = None
    _HAVE_COMPILED = False

_env = os.environ.get("DIGS_BACKEND", "auto").lower()
if _env == "python" or not _HAVE_COMPILED:
    _DEFAULT_BACKEND = "python"
else:
    _DEFAULT_BACKEND = "cython"

DEFAULT_TILE = 16
BLACK = np.zeros(3)


def active_backend() -> str:
    return _DEFAULT_BACKEND


def available_backends():
    return ("python", "cython") if _HAVE_COMPILED else ("python",)


def _resolve(backend):
    backend = backend or _DEFAULT_BACKEND
    if backend == "cython" and not _HAVE_COMPILED:
        raise RuntimeError("compiled kernels are not available in this build")
    if backend not in ("python", "cython"):
        raise ValueError(f"unknown backend {backend!r}")
    return backend


@dataclass
class RenderTargets:
    """Per-pixel color/depth/normal/alpha buffers for one camera."""

    color: ImageBuffer
    depth: ImageBuffer
    normal: ImageBuffer
    alpha: ImageBuffer


def depth_order(depths: np.ndarray) -> np.ndarray:
    """Front-to-back order; equal depths keep ascending primitive id."""
    return np.argsort(depths, kind="stable").astype(np.int64)


def project_batch(centers, covs, cam: Camera, near=DEFAULT_NEAR):
    """Vectorized EWA projection of many Gaussians.

    Returns (means2d, cov2d, depths, visible); rows of culled Gaussians are
    left untrustworthy and masked out by `visible`.
    """
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    t = centers @ cam.rotation.T + cam.translation
    tz = t[:, 2]
    visible = tz > near
    tz_safe = np.where(visible, tz, 1.0)
    means2d = np.stack(
        [
            cam.fx * t[:, 0] / tz_safe + cam.cx,
            cam.fy * t[:, 1] / tz_safe + cam.cy,
        ],
        axis=1,
    )
    # JW rows: (fx/tz) R0 - (fx tx/tz^2) R2 and the y analogue
    r0, r1, r2 = cam.rotation
    jw = np.empty((len(centers), 2, 3))
    jw[:, 0, :] = (cam.fx / tz_safe)[:, None] * r0 - (
        cam.fx * t[:, 0] / (tz_safe * tz_safe)
    )[:, None] * r2
    jw[:, 1, :] = (cam.fy / tz_safe)[:, None] * r1 - (
        cam.fy * t[:, 1] / (tz_safe * tz_safe)
    )[:, None] * r2
    cov2d = jw @ covs @ jw.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS_PX2
    cov2d[:, 1, 1] += LOWPASS_PX2
    return means2d, cov2d, tz, visible


def conic_and_radii(cov2d: np.ndarray):
    """Inverse 2x2 covariances packed (a, b, c) plus 3-sigma AABB radii."""
    c00 = cov2d[:, 0, 0]
    c01 = cov2d[:, 0, 1]
    c11 = cov2d[:, 1, 1]
    det = c00 * c11 - c01 * c01
    conics = np.stack([c11 / det, -c01 / det, c00 / det], axis=1)
    radii = 3.0 * np.sqrt(np.stack([c00, c11], axis=1))
    return conics, radii


def _csr_tiles(means, radii, order, height, width, tile):
    lists, n_tx, n_ty = _kernels_py._tile_lists(means, radii, order, height, width, tile)
    starts = np.zeros(len(lists) + 1, dtype=np.int64)
    for i, ids in enumerate(lists):
        starts[i + 1] = starts[i] + len(ids)
    flat = np.fromiter(
        (gid for ids in lists for gid in ids), dtype=np.int64, count=int(starts[-1])
    )
    return starts, flat, n_tx, n_ty


def composite(means, conics, colors, alphas, depths, normals, radii, order,
              height, width, background=BLACK, tile=DEFAULT_TILE, backend=None):
    """Raw compositing sums (color, depth_sum, normal_sum, alpha)."""
    backend = _resolve(backend)
    args = [np.ascontiguousarray(a, dtype=np.float64)
            for a in (means, conics, colors, alphas, depths, normals)]
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    if backend == "python":
        return _kernels_py.composite_forward(
            *args, radii, order, height, width, background, tile
        )
    starts, flat, n_tx, n_ty = _csr_tiles(args[0], radii, order, height, width, tile)
    return _kernels_cy.composite_forward_csr(
        *args, starts, flat, height, width, background, tile, n_tx, n_ty
    )


def composite_grad(means, conics, colors, alphas, depths, radii, order,
                   height, width, d_color, background=BLACK, tile=DEFAULT_TILE,
                   backend=None):
    """Gradients of the color image w.r.t. means, conics, colors, alphas."""
    backend = _resolve(backend)
    args = [np.ascontiguousarray(a, dtype=np.float64)
            for a in (means, conics, colors, alphas, depths)]
    radii = np.ascontiguousarray(radii, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    background = np.ascontiguousarray(background, dtype=np.float64)
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    if backend == "python":
        return _kernels_py.composite_backward(
            *args, radii, order, height, width, background, d_color, tile
        )
    starts, flat, n_tx, n_ty = _csr_tiles(args[0], radii, order, height, width, tile)
    return _kernels_cy.composite_backward_csr(
        *args, starts, flat, height, width, background, tile, n_tx, n_ty, d_color
    )


def rasterize_t(mean2d: T.Tensor, conic: T.Tensor, color: T.Tensor, alpha: T.Tensor,
                depths: np.ndarray, normals: np.ndarray, radii: np.ndarray,
                height: int, width: int, background=BLACK, tile=DEFAULT_TILE,
                backend=None):
    """Tape op: differentiable color image plus non-differentiable aux sums.

    Gradients flow to mean2d, conic, color, alpha; depth/normal/alpha images
    are rendering by-products with no loss attached.
    """
    order = depth_order(depths)
    img, depth_sum, normal_sum, alpha_acc = composite(
        mean2d.data, conic.data, color.data, alpha.data, depths, normals,
        radii, order, height, width, background, tile, backend,
    )
    out = T.Tensor(img, parents=(mean2d, conic, color, alpha))

    def backward(g):
        dm, dc, dcol, dal = composite_grad(
            mean2d.data, conic.data, color.data, alpha.data, depths, radii,
            order, height, width, g, background, tile, backend,
        )
        if mean2d.requires_grad:
            mean2d._accumulate(dm)
        if conic.requires_grad:
            conic._accumulate(dc)
        if color.requires_grad:
            color._accumulate(dcol)
        if alpha.requires_grad:
            alpha._accumulate(dal)

    out._backward = backward
    aux = {"depth_sum": depth_sum, "normal_sum": normal_sum, "alpha": alpha_acc}
    return out, aux


def build_targets(color, depth_sum, normal_sum, alpha, width, height) -> RenderTargets:
    """Turn raw sums into expectation images; normals renormalized or zero."""
    denom = np.maximum(alpha, 1e-8)
    depth = depth_sum / denom
    navg = normal_sum / denom[..., None]
    nlen = np.linalg.norm(navg, axis=-1, keepdims=True)
    normal = np.where(nlen > 1e-8, navg / np.maximum(nlen, 1e-30), 0.0)
    return RenderTargets(
        color=ImageBuffer.from_array(color),
        depth=ImageBuffer.from_array(depth[..., None]),
        normal=ImageBuffer.from_array(normal),
        alpha=ImageBuffer.from_array(alpha[..., None]),
    )


def smallest_axis_normals(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    """Per-Gaussian normal: the principal axis of the smallest scale."""
    from ..scene import quaternion_to_rotation

    n = np.empty((len(rotations), 3))
    for i, (q, s) in enumerate(zip(rotations, scales)):
        rot = quaternion_to_rotation(q / np.linalg.norm(q))
        n[i] = rot[:, int(np.argmin(s))]
    return n


def render(gaussians, field, cam: Camera, background=BLACK, delta=None,
           tile=DEFAULT_TILE, backend=None) -> RenderTargets:
    """Inference-path render of materialized primitives.

    `field` supplies SDF values at Gaussian centers and the opacity
    bandwidth; pass field=None to use each primitive's stored sdf with an
    explicit `delta`.
    """
    from ..field import sdf_to_opacity

    gaussians = list(gaussians)
    if not gaussians:
        raise ValueError("render requires a nonempty scene")
    centers = np.array([g.center for g in gaussians])
    covs = np.stack([g.covariance() for g in gaussians])
    colors = np.array([g.color for g in gaussians])
    quats = np.array([g.rotation for g in gaussians])
    scales = np.array([g.scales for g in gaussians])
    if field is None:
        if delta is None:
            raise ValueError("delta is required when no field is given")
        sdf = np.array([g.sdf for g in gaussians])
        dlt = delta
    else:
        sdf = np.array([field.sdf_at(g.center, g.level) for g in gaussians])
        dlt = field.delta
    alphas = sdf_to_opacity(sdf, dlt)
    normals = smallest_axis_normals(quats, scales)

    means2d, cov2d, depths, visible = project_batch(centers, covs, cam)
    idx = np.flatnonzero(visible)
    conics, radii = conic_and_radii(cov2d[idx])
    order = depth_order(depths[idx])
    img, dsum, nsum, acc = composite(
        means2d[idx], conics, colors[idx], alphas[idx], depths[idx],
        normals[idx], radii, order, cam.height, cam.width, background, tile, backend,
    )
    return build_targets(img, dsum, nsum, acc, cam.width, cam.height)


def reference_render_arrays(means, conics, colors, alphas, depths, normals,
                            radii, order, height, width, background=BLACK):
    """Brute-force per-pixel full-sort oracle (always pure Python)."""
    return _kernels_py.reference_composite(
        np.asarray(means, dtype=np.float64),
        np.asarray(conics, dtype=np.float64),
        np.asarray(colors, dtype=np.float64),
        np.asarray(alphas, dtype=np.float64),
        np.asarray(depths, dtype=np.float64),
        np.asarray(normals, dtype=np.float64),
        np.asarray(radii, dtype=np.float64),
        np.asarray(order, dtype=np.int64),
        height, width,
        np.asarray(background, dtype=np.float64),
    )

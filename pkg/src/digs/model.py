"""The trainable scene: per-Gaussian parameters bound to grid cells plus the
neural field, with graph builders for the differentiable render and a plain
numpy twin for evaluation-speed rendering.

Parameter rows are indexed by the grid's Gaussian ids.  Structural changes
go through `append_from_grid` (growth) and `compact` (pruning); both keep
cell.gaussian_ids, parameter rows, and optimizer state in lockstep.
"""

from __future__ import annotations

import numpy as np

from . import tape as T
from .errors import TapeStateError
from .field import NeuralField
from .grid import LodGrid
from .rasterizer import (
    BLACK,
    build_targets,
    conic_and_radii,
    rasterize_t,
    smallest_axis_normals,
)
from .scene import DEFAULT_NEAR, GaussianPrimitive, LOWPASS_PX2

SCALE_INIT_FRACTION = 0.25
EIKONAL_JITTER_FRACTION = 0.5


def _logit(x):
    x = np.clip(x, 0.02, 0.98)
    return np.log(x / (1.0 - x))


def quat_to_rot_t(q: T.Tensor) -> T.Tensor:
    """Batched unit-quaternion (w,x,y,z) to rotation matrices, (N,4)->(N,3,3)."""
    qn = q / q.norm_axis(axis=1, keepdims=True)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    r00 = 1.0 - 2.0 * (y * y + z * z)
    r01 = 2.0 * (x * y - w * z)
    r02 = 2.0 * (x * z + w * y)
    r10 = 2.0 * (x * y + w * z)
    r11 = 1.0 - 2.0 * (x * x + z * z)
    r12 = 2.0 * (y * z - w * x)
    r20 = 2.0 * (x * z - w * y)
    r21 = 2.0 * (y * z + w * x)
    r22 = 1.0 - 2.0 * (x * x + y * y)
    return T.stack(
        [
            T.stack([r00, r01, r02], axis=1),
            T.stack([r10, r11, r12], axis=1),
            T.stack([r20, r21, r22], axis=1),
        ],
        axis=1,
    )


def quat_to_rot_np(q: np.ndarray) -> np.ndarray:
    qn = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    rot = np.empty((len(q), 3, 3))
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


class SplatModel:
    def __init__(self, grid: LodGrid, field: NeuralField, iteration: int = 0):
        self.grid = grid
        self.field = field
        self.iteration = iteration
        n = grid.n_gaussians
        self.offsets = T.parameter(np.zeros((n, 3)), name="offsets")
        self.offset_scales = T.parameter(np.zeros((n, 3)), name="offset_scales")
        self.rotations = T.parameter(
            np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)), name="rotations"
        )
        self.log_scales = T.parameter(np.zeros((n, 3)), name="log_scales")
        self.color_logits = T.parameter(np.zeros((n, 3)), name="color_logits")
        self.birth = np.zeros(n, dtype=np.int64)
        self._rebuild_constants()
        self._last_graph = None

    # -- construction ----------------------------------------------------------

    @classmethod
    def from_grid(cls, grid: LodGrid, field: NeuralField, cell_colors=None):
        model = cls(grid, field)
        for cell in grid.cells():
            size = grid.voxel_size(cell.level)
            rows = np.asarray(cell.gaussian_ids)
            model.offsets.data[rows] = cell.offsets[: len(rows)]
            model.offset_scales.data[rows] = cell.offset_scales[: len(rows)]
            model.log_scales.data[rows] = np.log(SCALE_INIT_FRACTION * size)
            if cell_colors is not None and cell.coord in cell_colors.get(cell.level, {}):
                model.color_logits.data[rows] = _logit(
                    cell_colors[cell.level][cell.coord]
                )
        return model

    def _rebuild_constants(self):
        """Per-Gaussian constants derived from the owning cells."""
        n = self.grid.n_gaussians
        self.cell_centers = np.zeros((n, 3))
        self.clamp_lo = np.zeros((n, 3))
        self.clamp_hi = np.zeros((n, 3))
        self.levels = np.zeros(n, dtype=np.int64)
        self.vertex_rows = np.zeros((n, 8), dtype=np.int64)
        self._owning_cell = [None] * n
        for cell in self.grid.cells():
            size = self.grid.voxel_size(cell.level)
            for gid in cell.gaussian_ids:
                self.cell_centers[gid] = cell.center
                self.clamp_lo[gid] = cell.center - size
                self.clamp_hi[gid] = cell.center + size
                self.levels[gid] = cell.level
                self.vertex_rows[gid] = cell.vertex_feature_ids
                self._owning_cell[gid] = cell
        self.vertex_pos = self.grid.vertex_positions()[self.vertex_rows]

    @property
    def n_gaussians(self) -> int:
        return self.offsets.data.shape[0]

    def gaussian_parameters(self) -> dict:
        return {
            "offsets": self.offsets,
            "offset_scales": self.offset_scales,
            "rotations": self.rotations,
            "log_scales": self.log_scales,
            "color_logits": self.color_logits,
        }

    def parameters(self) -> dict:
        params = dict(self.field.parameters())
        params.update(self.gaussian_parameters())
        return params

    # -- structural updates ------------------------------------------------------

    def append_from_grid(self, cell_inits=None, birth_iteration=0):
        """Bind parameter rows for cells created since the last sync.

        `cell_inits` maps id(cell) -> dict of per-cell row initializers
        (keys: rotations (4,), log_scales (3,)).
        """
        old = self.n_gaussians
        new = self.grid.n_gaussians
        if new == old:
            return []
        add = new - old

        def extend(param, fill):
            data = np.vstack([param.data, np.tile(fill, (add, 1))])
            fresh = T.parameter(data, name=param.name)
            return fresh

        self.offsets = extend(self.offsets, np.zeros(3))
        self.offset_scales = extend(self.offset_scales, np.zeros(3))
        self.rotations = extend(self.rotations, np.array([1.0, 0, 0, 0]))
        self.log_scales = extend(self.log_scales, np.zeros(3))
        self.color_logits = extend(self.color_logits, np.zeros(3))
        self.birth = np.concatenate([self.birth, np.full(add, birth_iteration)])

        new_cells = []
        for cell in self.grid.cells():
            rows = [gid for gid in cell.gaussian_ids if gid >= old]
            if not rows:
                continue
            new_cells.append(cell)
            rows = np.asarray(rows)
            size = self.grid.voxel_size(cell.level)
            self.offset_scales.data[rows] = 0.25 * size
            self.log_scales.data[rows] = np.log(SCALE_INIT_FRACTION * size)
            init = (cell_inits or {}).get(id(cell))
            if init:
                if "rotations" in init:
                    self.rotations.data[rows] = init["rotations"]
                if "log_scales" in init:
                    self.log_scales.data[rows] = init["log_scales"]
        self.field.sync_vertices()
        self._rebuild_constants()
        self._last_graph = None
        return new_cells

    def compact(self, keep_mask: np.ndarray):
        """Drop pruned Gaussian rows and renumber ids everywhere."""
        keep_mask = np.asarray(keep_mask, dtype=bool)
        remap = -np.ones(self.n_gaussians, dtype=np.int64)
        remap[keep_mask] = np.arange(int(keep_mask.sum()))
        for param in self.gaussian_parameters().values():
            param.data = param.data[keep_mask]
            param.grad = np.zeros_like(param.data)
        self.birth = self.birth[keep_mask]
        for cell in list(self.grid.cells()):
            kept = [int(remap[g]) for g in cell.gaussian_ids if remap[g] >= 0]
            if kept:
                cell.gaussian_ids = kept
            else:
                self.grid.remove_cell(cell)
        self.grid._next_gaussian_id = int(keep_mask.sum())
        self._rebuild_constants()
        self._last_graph = None
        return remap

    # -- forward graphs ---------------------------------------------------------

    def positions_t(self) -> T.Tensor:
        p = T.tensor(self.cell_centers) + self.offsets * self.offset_scales
        return p.clip(self.clamp_lo, self.clamp_hi)

    def scales_t(self) -> T.Tensor:
        return self.log_scales.exp()

    def sdf_t(self, positions: T.Tensor) -> tuple:
        feats = self.field.interpolate_t(positions, self.vertex_pos, self.vertex_rows)
        decoded = self.field.trunk_t(feats)
        return decoded[:, 0], decoded[:, 1:]

    def colors_t(self, positions: T.Tensor, radiance: T.Tensor, cam) -> T.Tensor:
        view = positions - T.tensor(cam.camera_center())
        view = view / view.norm_axis(axis=1, keepdims=True)
        head = self.field.head_logits_t(radiance, view)
        return (self.color_logits + head).sigmoid()

    def covariance_t(self, scales: T.Tensor) -> T.Tensor:
        rot = quat_to_rot_t(self.rotations)
        s2 = scales.square().reshape(self.n_gaussians, 1, 3)
        return (rot * s2) @ rot.swapaxes(1, 2)

    def project_t(self, positions: T.Tensor, cov3d: T.Tensor, cam, near=DEFAULT_NEAR):
        """(mean2d, conic, depths, visible) with the EWA chain on the tape."""
        t = positions @ T.tensor(cam.rotation.T) + T.tensor(cam.translation)
        tz_raw = t[:, 2]
        visible = tz_raw.data > near
        tz = tz_raw.clip(lo=near)
        tx, ty = t[:, 0], t[:, 1]
        mean2d = T.stack(
            [tx / tz * cam.fx + cam.cx, ty / tz * cam.fy + cam.cy], axis=1
        )
        n = self.n_gaussians
        r0, r1, r2 = cam.rotation
        inv_tz = 1.0 / tz
        jw0 = (inv_tz * cam.fx).reshape(n, 1) * T.tensor(r0) - (
            tx / tz.square() * cam.fx
        ).reshape(n, 1) * T.tensor(r2)
        jw1 = (inv_tz * cam.fy).reshape(n, 1) * T.tensor(r1) - (
            ty / tz.square() * cam.fy
        ).reshape(n, 1) * T.tensor(r2)
        jw = T.stack([jw0, jw1], axis=1)
        cov2d = jw @ cov3d @ jw.swapaxes(1, 2) + T.tensor(LOWPASS_PX2 * np.eye(2))
        c00, c01, c11 = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = c00 * c11 - c01 * c01
        conic = T.stack([c11 / det, -c01 / det, c00 / det], axis=1)
        radii = 3.0 * np.sqrt(
            np.stack([np.abs(c00.data), np.abs(c11.data)], axis=1)
        )
        return mean2d, conic, tz_raw.data, radii, visible

    def forward_render(self, cam, background=BLACK, backend=None):
        """Full differentiable render; returns (image tensor, cache dict)."""
        positions = self.positions_t()
        sdf, radiance = self.sdf_t(positions)
        alpha = self.field.opacity_t(sdf)
        colors = self.colors_t(positions, radiance, cam)
        scales = self.scales_t()
        cov3d = self.covariance_t(scales)
        mean2d, conic, depths, radii, visible = self.project_t(positions, cov3d, cam)
        normals = smallest_axis_normals(self.rotations.data, scales.data)
        idx = np.flatnonzero(visible)
        img, aux = rasterize_t(
            mean2d.take_rows(idx),
            conic.take_rows(idx),
            colors.take_rows(idx),
            alpha.take_rows(idx),
            depths[idx],
            normals[idx],
            radii[idx],
            cam.height,
            cam.width,
            background=background,
            backend=backend,
        )
        cache = {
            "positions": positions,
            "sdf": sdf,
            "alpha": alpha,
            "scales": scales,
            "image": img,
            "aux": aux,
            "visible": visible,
        }
        self._last_graph = cache
        return img, cache

    def last_graph(self):
        if self._last_graph is None:
            raise TapeStateError("no forward render recorded")
        return self._last_graph

    # -- numpy twin ------------------------------------------------------------

    def positions_np(self) -> np.ndarray:
        p = self.cell_centers + self.offsets.data * self.offset_scales.data
        return np.clip(p, self.clamp_lo, self.clamp_hi)

    def forward_arrays_np(self, cam=None):
        """Numpy forward of the per-Gaussian quantities (no tape).

        Must mirror the tensor graph; test_model pins the equivalence.
        """
        from .field import idw_weights

        pos = self.positions_np()
        vpos = self.vertex_pos
        w = idw_weights(vpos, pos)
        feats = np.einsum(
            "si,sid->sd", w, self.field.vertex_features.data[self.vertex_rows]
        )
        decoded = self.field._trunk_np(feats)
        sdf = decoded[:, 0]
        radiance = decoded[:, 1:]
        delta = self.field.delta
        alpha = np.exp(-(sdf * sdf) / (delta * delta))
        out = {"positions": pos, "sdf": sdf, "alpha": alpha}
        if cam is not None:
            view = pos - cam.camera_center()
            view /= np.linalg.norm(view, axis=1, keepdims=True)
            head = self.field._head_logits_np(radiance, view)
            out["colors"] = 1.0 / (1.0 + np.exp(-(self.color_logits.data + head)))
        scales = np.exp(self.log_scales.data)
        rot = quat_to_rot_np(self.rotations.data)
        out["scales"] = scales
        out["cov3d"] = (rot * (scales * scales)[:, None, :]) @ rot.transpose(0, 2, 1)
        out["rotations_mat"] = rot
        return out

    def render_numpy(self, cam, background=BLACK, backend=None):
        """Evaluation-speed render returning RenderTargets."""
        from .rasterizer import composite, depth_order, project_batch

        arrays = self.forward_arrays_np(cam)
        means2d, cov2d, depths, visible = project_batch(
            arrays["positions"], arrays["cov3d"], cam
        )
        idx = np.flatnonzero(visible)
        conics, radii = conic_and_radii(cov2d[idx])
        normals = smallest_axis_normals(self.rotations.data[idx], arrays["scales"][idx])
        order = depth_order(depths[idx])
        img, dsum, nsum, acc = composite(
            means2d[idx], conics, arrays["colors"][idx], arrays["alpha"][idx],
            depths[idx], normals, radii, order, cam.height, cam.width,
            background, backend=backend,
        )
        return build_targets(img, dsum, nsum, acc, cam.width, cam.height)

    # -- sampling and materialization ---------------------------------------------

    def eikonal_samples(self, n: int, rng: np.random.Generator):
        """Half jittered Gaussian centers, half uniform points in occupied
        cells; every sample stays inside its source cell so interpolation is
        well defined."""
        cells = self.grid.cells()
        pos = self.positions_np()
        n_jitter = n // 2
        points = []
        vpos = []
        rows = []
        if self.n_gaussians and n_jitter:
            pick = rng.integers(0, self.n_gaussians, size=n_jitter)
            sizes = np.array(
                [self.grid.voxel_size(int(l)) for l in self.levels[pick]]
            )
            jittered = pos[pick] + rng.normal(size=(n_jitter, 3)) * (
                EIKONAL_JITTER_FRACTION * sizes[:, None]
            )
            for j, gid in enumerate(pick):
                cell = self._owning_cell[gid]
                half = 0.5 * self.grid.voxel_size(cell.level) - 1e-9
                p = np.clip(jittered[j], cell.center - half, cell.center + half)
                points.append(p)
                vpos.append(self.grid.vertex_positions()[cell.vertex_feature_ids])
                rows.append(np.asarray(cell.vertex_feature_ids))
        n_uniform = n - len(points)
        if cells and n_uniform:
            pick = rng.integers(0, len(cells), size=n_uniform)
            for ci in pick:
                cell = cells[ci]
                half = 0.5 * self.grid.voxel_size(cell.level)
                p = cell.center + rng.uniform(-half + 1e-9, half - 1e-9, size=3)
                points.append(p)
                vpos.append(self.grid.vertex_positions()[cell.vertex_feature_ids])
                rows.append(np.asarray(cell.vertex_feature_ids))
        return np.asarray(points), np.asarray(vpos), np.asarray(rows)

    def materialize(self):
        """Snapshot the scene as GaussianPrimitive records."""
        arrays = self.forward_arrays_np()
        quats = self.rotations.data / np.linalg.norm(
            self.rotations.data, axis=1, keepdims=True
        )
        colors = 1.0 / (1.0 + np.exp(-self.color_logits.data))
        prims = []
        for i in range(self.n_gaussians):
            prims.append(
                GaussianPrimitive(
                    center=arrays["positions"][i],
                    rotation=quats[i],
                    scales=arrays["scales"][i],
                    color=colors[i],
                    sdf=float(arrays["sdf"][i]),
                    level=int(self.levels[i]),
                    birth_iteration=int(self.birth[i]),
                )
            )
        return prims

"""Training objectives: RGB (L1 + DSSIM), SDF-center, Eikonal, flattening,
and the weighted total.

SSIM is the Gaussian-window variant (window 11, sigma 1.5, K1/K2 =
0.01/0.03, dynamic range 1) over valid windows only.  The printed loss uses
1 - SSIM so identical images score zero.  The SSIM tape op has a
hand-written backward built from window correlations (the Gaussian window
is symmetric, so the correlation is its own adjoint under zero padding);
it is validated against finite differences like every other op.

Images smaller than the window shrink it to the largest odd size that fits.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.ndimage import correlate1d

from . import tape as T
from .errors import InvalidInputError
from .field import sdf_to_opacity

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SURFACE_OPACITY_THRESHOLD = 0.1


@dataclass
class LossWeights:
    """Weights lambda_4..lambda_7: SDF-center, Eikonal, flattening, DSSIM mix."""

    sdf_center: float = 0.01
    eikonal: float = 0.01
    flatten: float = 100.0
    ssim_mix: float = 0.05

    def __post_init__(self):
        for name in ("sdf_center", "eikonal", "flatten", "ssim_mix"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"loss weight {name} must be >= 0")
        if not (0.0 <= self.ssim_mix <= 1.0):
            raise InvalidInputError("ssim_mix must lie in [0, 1]")


@dataclass
class LossReport:
    rgb: float
    flatten: float
    sdf_center: float
    eikonal: float
    total: float
    grad_norms: dict = dc_field(default_factory=dict)
    n_gaussians: int = 0

    CSV_FIELDS = ("iteration", "rgb", "flatten", "sdf_center", "eikonal",
                  "total", "n_gaussians")

    def csv_row(self, iteration: int) -> str:
        return (
            f"{iteration},{self.rgb:.8g},{self.flatten:.8g},{self.sdf_center:.8g},"
            f"{self.eikonal:.8g},{self.total:.8g},{self.n_gaussians}"
        )


# -- SSIM -------------------------------------------------------------------


def _gauss_kernel(win: int, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(win) - (win - 1) / 2.0
    k = np.exp(-(t * t) / (2.0 * sigma * sigma))
    return k / k.sum()


def _window_for(h: int, w: int) -> int:
    win = min(SSIM_WINDOW, h, w)
    return win if win % 2 == 1 else win - 1


def _corr2(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    out = correlate1d(img, k, axis=0, mode="constant")
    return correlate1d(out, k, axis=1, mode="constant")


def _as_image(a) -> np.ndarray:
    data = a.data if hasattr(a, "data") and not isinstance(a, np.ndarray) else a
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[:, :, None]
    return data


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 3 or a.shape[1] < 3:
        raise InvalidInputError("images too small for windowed SSIM")


def _ssim_stats(x, y, k, half):
    sl = (slice(half, x.shape[0] - half), slice(half, x.shape[1] - half))
    mx = _corr2(x, k)[sl]
    my = _corr2(y, k)[sl]
    ex2 = _corr2(x * x, k)[sl]
    ey2 = _corr2(y * y, k)[sl]
    exy = _corr2(x * y, k)[sl]
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    a1 = 2.0 * mx * my + c1
    a2 = 2.0 * (exy - mx * my) + c2
    b1 = mx * mx + my * my + c1
    b2 = (ex2 - mx * mx) + (ey2 - my * my) + c2
    s = (a1 * a2) / (b1 * b2)
    return s, (mx, my, ex2, exy, a1, a2, b1, b2), sl


def ssim(a, b) -> float:
    """Mean local SSIM over valid windows, averaged over channels."""
    x = _as_image(a)
    y = _as_image(b)
    _check_pair(x, y)
    win = _window_for(x.shape[0], x.shape[1])
    k = _gauss_kernel(win)
    half = win // 2
    vals = [
        _ssim_stats(x[:, :, c], y[:, :, c], k, half)[0].mean()
        for c in range(x.shape[2])
    ]
    return float(np.mean(vals))


def ssim_t(x: T.Tensor, truth: np.ndarray) -> T.Tensor:
    """Differentiable SSIM(x, truth) against a constant reference image."""
    y = _as_image(truth)
    xd = x.data
    _check_pair(xd, y)
    win = _window_for(xd.shape[0], xd.shape[1])
    k = _gauss_kernel(win)
    half = win // 2
    channels = xd.shape[2]
    per_channel = []
    value = 0.0
    for c in range(channels):
        s, stats, sl = _ssim_stats(xd[:, :, c], y[:, :, c], k, half)
        per_channel.append((s, stats, sl))
        value += s.mean()
    value /= channels
    out = T.Tensor(np.asarray(value), parents=(x,))

    def backward(g):
        dx = np.zeros_like(xd)
        for c in range(channels):
            s, (mx, my, ex2, exy, a1, a2, b1, b2), sl = per_channel[c]
            gs = float(g) / (channels * s.size)
            d_mx = gs * (2.0 * my * (a2 - a1) / (b1 * b2)
                         - 2.0 * mx * s * (1.0 / b1 - 1.0 / b2))
            d_ex2 = gs * (-s / b2)
            d_exy = gs * (2.0 * a1 / (b1 * b2))
            zm = np.zeros(xd.shape[:2])
            z2 = np.zeros(xd.shape[:2])
            zy = np.zeros(xd.shape[:2])
            zm[sl] = d_mx
            z2[sl] = d_ex2
            zy[sl] = d_exy
            dx[:, :, c] = (
                _corr2(zm, k)
                + 2.0 * xd[:, :, c] * _corr2(z2, k)
                + y[:, :, c] * _corr2(zy, k)
            )
        x._accumulate(dx)

    out._backward = backward
    return out


# -- loss terms ----------------------------------------------------------------


def rgb_loss(rendered, truth, ssim_mix: float) -> float:
    """(1 - mix) * mean L1 + mix * (1 - SSIM); zero for identical images."""
    x = _as_image(rendered)
    y = _as_image(truth)
    _check_pair(x, y)
    l1 = float(np.abs(x - y).mean())
    return (1.0 - ssim_mix) * l1 + ssim_mix * (1.0 - ssim(x, y))


def rgb_loss_t(rendered: T.Tensor, truth: np.ndarray, ssim_mix: float) -> T.Tensor:
    y = _as_image(truth)
    l1 = (rendered - T.tensor(y)).abs().mean()
    if ssim_mix == 0.0:
        return l1
    return l1 * (1.0 - ssim_mix) + (1.0 - ssim_t(rendered, y)) * ssim_mix


def flattening_loss(scales: np.ndarray, weight: float) -> float:
    """weight * mean of each Gaussian's smallest scale."""
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    return float(weight * scales.min(axis=1).mean())


def flattening_loss_t(scales: T.Tensor, weight: float) -> T.Tensor:
    return scales.min_axis1().mean() * weight


def sdf_center_loss(gaussians, field) -> float:
    """Mean squared SDF at centers of surface-candidate Gaussians.

    Candidates are those whose derived opacity is at least 0.1; with no
    candidates the loss is zero.
    """
    values = np.array([field.sdf_at(g.center, g.level) for g in gaussians])
    alpha = sdf_to_opacity(values, field.delta)
    mask = alpha >= SURFACE_OPACITY_THRESHOLD
    if not mask.any():
        return 0.0
    return float((values[mask] ** 2).mean())


def sdf_center_loss_t(sdf: T.Tensor, alphas: np.ndarray) -> T.Tensor:
    """Tape variant over precomputed per-Gaussian SDF values; `alphas` are
    forward opacity values used only for candidate selection (no gradient)."""
    mask = np.flatnonzero(np.asarray(alphas) >= SURFACE_OPACITY_THRESHOLD)
    if mask.size == 0:
        return T.tensor(np.asarray(0.0))
    return sdf.take_rows(mask).square().mean()


def eikonal_loss(field, sample_points, levels=None) -> float:
    """Mean (|grad f| - 1)^2 over sample points (numpy surface)."""
    pts = np.asarray(sample_points, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise InvalidInputError("eikonal loss needs at least one sample")
    if levels is None:
        levels = [_finest_occupied_level(field.grid, p) for p in pts]
    total = 0.0
    for p, lvl in zip(pts, levels):
        g = field.sdf_spatial_gradient(p, lvl)
        total += (np.linalg.norm(g) - 1.0) ** 2
    return total / len(pts)


def _finest_occupied_level(grid, point):
    for lvl in range(grid.max_level, -1, -1):
        if grid.cell_containing(point, lvl) is not None:
            return lvl
    raise InvalidInputError(f"point {point} is not inside any occupied cell")


def eikonal_loss_t(grad: T.Tensor) -> T.Tensor:
    """Tape variant over a batch of spatial gradients (S, 3)."""
    return (grad.norm_axis(axis=1) - 1.0).square().mean()


def total_loss_t(rgb: T.Tensor, flatten: T.Tensor, sdf_center: T.Tensor,
                 eikonal: T.Tensor, weights: LossWeights) -> T.Tensor:
    """L = L_rgb + L_s + lambda4 L_sdf-center + lambda5 L_eikonal.

    The external geometric prior term is out of scope and enters with
    weight zero.
    """
    return (
        rgb
        + flatten
        + sdf_center * weights.sdf_center
        + eikonal * weights.eikonal
    )


def make_report(rgb, flatten, sdf_center, eikonal, total, grad_norms=None,
                n_gaussians=0) -> LossReport:
    return LossReport(
        rgb=float(rgb),
        flatten=float(flatten),
        sdf_center=float(sdf_center),
        eikonal=float(eikonal),
        total=float(total),
        grad_norms=grad_norms or {},
        n_gaussians=n_gaussians,
    )

"""Photometric loss, voxel-prior energy and insertion energy deltas."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .scene import ContractError, GaussianCloud, ImageBuffer

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

LAMBDA_DSSIM = 0.2
LAMBDA_OPACITY = 0.01
LAMBDA_SCALE = 0.01
LAMBDA_VOXEL = 0.5


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


_WINDOW = gaussian_window()
_HALF = SSIM_WINDOW // 2


def _pixels(img) -> np.ndarray:
    return img.pixels if isinstance(img, ImageBuffer) else np.asarray(img, dtype=np.float64)


def blur(x: np.ndarray) -> np.ndarray:
    """Separable Gaussian window over the two leading axes, edge-replicated."""
    y = correlate1d(x, _WINDOW, axis=0, mode="nearest")
    return correlate1d(y, _WINDOW, axis=1, mode="nearest")


def _blur_adjoint_axis(y: np.ndarray, axis: int) -> np.ndarray:
    n = y.shape[axis]
    pad = [(0, 0)] * y.ndim
    pad[axis] = (_HALF, _HALF)
    z = correlate1d(np.pad(y, pad), _WINDOW[::-1], axis=axis, mode="constant")
    z = np.moveaxis(z, axis, 0)
    out = z[_HALF:_HALF + n].copy()
    out[0] += z[:_HALF].sum(axis=0)
    out[-1] += z[_HALF + n:].sum(axis=0)
    return np.moveaxis(out, 0, axis)


def blur_adjoint(y: np.ndarray) -> np.ndarray:
    """Exact transpose of :func:`blur` as a linear map."""
    return _blur_adjoint_axis(_blur_adjoint_axis(y, 1), 0)


def _ssim_terms(x, y):
    mu_x, mu_y = blur(x), blur(y)
    exx, eyy, exy = blur(x * x), blur(y * y), blur(x * y)
    a1 = 2 * mu_x * mu_y + SSIM_C1
    a2 = 2 * (exy - mu_x * mu_y) + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = (exx - mu_x * mu_x) + (eyy - mu_y * mu_y) + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim_map(rendered, target) -> np.ndarray:
    """Per-pixel SSIM, computed per channel and averaged over channels."""
    x, y = _pixels(rendered), _pixels(target)
    if x.shape != y.shape:
        raise ContractError(f"ssim_map: resolution mismatch {x.shape} vs {y.shape}")
    _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return ((a1 * a2) / (b1 * b2)).mean(axis=2)


def ssim_backward(rendered, target, grad_map: np.ndarray) -> np.ndarray:
    """d (sum_p grad_map[p] * ssim[p]) / d rendered, shape (H, W, 3)."""
    x, y = _pixels(rendered), _pixels(target)
    mu_x, mu_y, a1, a2, b1, b2 = _ssim_terms(x, y)
    den = b1 * b2
    s = a1 * a2 / den
    w = np.repeat(grad_map[:, :, None] / x.shape[2], x.shape[2], axis=2)
    d_mu = w * (2 * mu_y * (a2 - a1) / den - 2 * mu_x * s / b1 + 2 * mu_x * s / b2)
    d_exx = w * (-s / b2)
    d_exy = w * (2 * a1 / den)
    return blur_adjoint(d_mu) + 2 * x * blur_adjoint(d_exx) + y * blur_adjoint(d_exy)


@dataclass
class LossBreakdown:
    total: float
    l1_term: float
    dssim_term: float
    opacity_term: float
    scale_term: float
    per_pixel_l1: np.ndarray
    per_pixel_ssim_dissim: np.ndarray
    lambda_dssim: float = LAMBDA_DSSIM
    lambda_opacity: float = LAMBDA_OPACITY
    lambda_scale: float = LAMBDA_SCALE

    def reconstruct(self) -> float:
        return ((1 - self.lambda_dssim) * self.l1_term + self.lambda_dssim * self.dssim_term
                + self.lambda_opacity * self.opacity_term + self.lambda_scale * self.scale_term)


def regularizer_terms(cloud: GaussianCloud | None) -> tuple[float, float]:
    """Mean activated opacity and mean activated scale (mean of 3 axes, over splats)."""
    if cloud is None or len(cloud) == 0:
        return 0.0, 0.0
    return float(np.mean(cloud.opacities)), float(np.mean(cloud.scales))


def loss(rendered, target, cloud: GaussianCloud | None = None, lam: float = LAMBDA_DSSIM,
         lam_opacity: float = LAMBDA_OPACITY, lam_scale: float = LAMBDA_SCALE) -> LossBreakdown:
    x, y = _pixels(rendered), _pixels(target)
    if x.shape != y.shape:
        raise ContractError(f"loss: resolution mismatch {x.shape} vs {y.shape}")
    abs_err = np.abs(x - y)
    dissim = 1.0 - ssim_map(x, y)
    l1 = float(abs_err.mean())
    dssim = float(dissim.mean())
    op, sc = regularizer_terms(cloud)
    out = LossBreakdown(0.0, l1, dssim, op, sc, abs_err.mean(axis=2), dissim, lam, lam_opacity, lam_scale)
    out.total = out.reconstruct()
    return out


def photometric_grad(rendered, target, lam: float = LAMBDA_DSSIM) -> np.ndarray:
    """d loss / d rendered image for the L1 + D-SSIM part."""
    x, y = _pixels(rendered), _pixels(target)
    g = (1 - lam) * np.sign(x - y) / x.size
    n_pix = x.shape[0] * x.shape[1]
    g += ssim_backward(x, y, np.full(x.shape[:2], -lam / n_pix))
    return g


def regularizer_grads(cloud: GaussianCloud, lam_opacity: float = LAMBDA_OPACITY,
                      lam_scale: float = LAMBDA_SCALE) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the opacity/scale regularizers w.r.t. raw opacity and raw scale."""
    n = len(cloud)
    a = cloud.opacities
    d_op = lam_opacity * a * (1 - a) / n
    d_sc = lam_scale * cloud.scales / (3 * n)
    return d_op, d_sc


# ---------------------------------------------------------------------- energy

@dataclass
class EnergyValue:
    loss_part: float
    prior_part: float
    total: float


def prior_energy(counts, lam_v: float = LAMBDA_VOXEL) -> float:
    """``lam_v * sum_v ln(1 + c(v))`` over occupied voxels; accepts a dict or sequence."""
    vals = counts.values() if hasattr(counts, "values") else counts
    c = np.fromiter((v for v in vals if v > 0), dtype=np.float64)
    return float(lam_v * np.sum(np.log1p(c)))


def energy(cloud: GaussianCloud, loss_value: float, voxel_grid, lam_v: float = LAMBDA_VOXEL) -> EnergyValue:
    if voxel_grid.total() != len(cloud):
        raise ContractError("voxel grid does not mirror the cloud")
    prior = prior_energy(voxel_grid.counts, lam_v)
    return EnergyValue(float(loss_value), prior, float(loss_value) + prior)


def posterior_ratio(energy_current: float, energy_proposed: float) -> float:
    """pi(proposed) / pi(current); the normalizer cancels."""
    return math.exp(energy_current - energy_proposed)


def voxel_factor(count: int, lam_v: float = LAMBDA_VOXEL) -> float:
    """Crowding penalty used inside the acceptance rule: 1 / (1 + lam_v * c)."""
    return 1.0 / (1.0 + lam_v * count)


def voxel_factor_exact(count: int, lam_v: float = LAMBDA_VOXEL) -> float:
    """The exact factor with prior delta ``-ln D``: ((1 + c) / (2 + c)) ** lam_v."""
    return ((1.0 + count) / (2.0 + count)) ** lam_v


def voxel_factor_first_order(count: int, lam_v: float = LAMBDA_VOXEL) -> float:
    """First-order form 1 / (1 + lam_v * x) with x = 1 / (1 + c)."""
    return 1.0 / (1.0 + lam_v / (1.0 + count))


def first_order_bound(count: int, lam_v: float) -> float:
    """Upper bound on |lam_v ln(1 + x) - ln(1 + lam_v x)| for x = 1/(1+c) in (0, 1].

    Both logs deviate from their linear term by at most half the squared argument.
    """
    x = 1.0 / (1.0 + count)
    return 0.5 * lam_v * x * x + 0.5 * (lam_v * x) ** 2


def delta_energy_insert(delta_loss: float, voxel_count_before: int, lam_v: float = LAMBDA_VOXEL):
    """Energy change of inserting one splat into a voxel holding ``c`` splats.

    Returns ``(exact, approx_D)`` where ``exact = dL + lam_v ln((2+c)/(1+c))`` and
    ``approx_D = 1 / (1 + lam_v c)``.
    """
    if voxel_count_before < 0 or lam_v < 0:
        raise ContractError("voxel count and lam_v must be non-negative")
    c = voxel_count_before
    exact = float(delta_loss) + lam_v * math.log((2.0 + c) / (1.0 + c))
    return exact, voxel_factor(c, lam_v)


def multiview_loss(cloud: GaussianCloud, cameras, targets, lam: float = LAMBDA_DSSIM, background=None,
                   lam_opacity: float = 0.0, lam_scale: float = 0.0) -> float:
    """Mean loss over a set of views (photometric only unless regularizer weights are given)."""
    from .render import render

    if not cameras:
        raise ContractError("multiview_loss needs at least one camera")
    reg_cloud = cloud if (lam_opacity or lam_scale) else None
    vals = [loss(render(cloud, cam, background).image, tgt, reg_cloud, lam, lam_opacity, lam_scale).total
            for cam, tgt in zip(cameras, targets)]
    return float(np.mean(vals))


def insertion_delta_loss(cloud: GaussianCloud, splat, cameras, targets, lam: float = LAMBDA_DSSIM,
                         background=None, base_loss: float | None = None) -> float:
    """Measured photometric change L(cloud + splat) - L(cloud) by double rendering."""
    if base_loss is None:
        base_loss = multiview_loss(cloud, cameras, targets, lam, background)
    grown = cloud.copy()
    grown.append(splat.position, splat.raw_scale, splat.rotation, splat.color, splat.raw_opacity)
    return multiview_loss(grown, cameras, targets, lam, background) - base_loss

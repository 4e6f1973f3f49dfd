"""Multi-view error signals turned into a per-splat proposal distribution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .objective import ssim_map
from .render import RenderOutput
from .scene import Camera, ContractError, GaussianCloud, sigmoid

WEIGHT_OPACITY = 0.8
WEIGHT_SSIM = 0.5
WEIGHT_L1 = 0.5


@dataclass
class CameraSchedule:
    """Round-robin walk over the training cameras in annealed blocks."""

    full_set_size: int
    t_min: int
    t_max: int
    cursor: int = 0

    def __post_init__(self):
        if self.full_set_size < 1:
            raise ContractError("camera schedule needs at least one camera")
        if not self.t_min < self.t_max:
            raise ContractError("require t_min < t_max")
        self.cursor %= self.full_set_size

    def subset_size(self, t: int) -> int:
        if not self.t_min <= t <= self.t_max:
            raise ContractError(f"t={t} outside densification window [{self.t_min}, {self.t_max}]")
        eta = (t - self.t_min) / (self.t_max - self.t_min)
        return max(1, int(np.floor((1.0 - eta) * self.full_set_size)))


def camera_subset(schedule: CameraSchedule, t: int) -> list[int]:
    """Next contiguous (wrapping) block of ``k_t`` camera indices; advances the cursor."""
    k = schedule.subset_size(t)
    n = schedule.full_set_size
    idx = [(schedule.cursor + j) % n for j in range(k)]
    schedule.cursor = (schedule.cursor + k) % n
    return idx


def aggregate_error_maps(renders, targets) -> tuple[np.ndarray, np.ndarray]:
    """Mean over views of per-pixel (1 - SSIM) and channel-mean absolute error."""
    if len(renders) == 0:
        raise ContractError("aggregate_error_maps needs a non-empty camera subset")
    if len(renders) != len(targets):
        raise ContractError("renders and targets differ in length")
    shape = None
    ssim_agg = l1_agg = None
    for r, t in zip(renders, targets):
        x = r.image.pixels if isinstance(r, RenderOutput) else getattr(r, "pixels", r)
        y = getattr(t, "pixels", t)
        if shape is None:
            shape = x.shape
            ssim_agg = np.zeros(shape[:2])
            l1_agg = np.zeros(shape[:2])
        elif x.shape != shape:
            raise ContractError("all views in a subset must share one resolution")
        ssim_agg += 1.0 - ssim_map(x, y)
        l1_agg += np.abs(x - y).mean(axis=2)
    k = len(renders)
    return ssim_agg / k, l1_agg / k


def robust_normalize(m, lo_pct: float = 1.0, hi_pct: float = 99.0) -> np.ndarray:
    """Clip to the 1st/99th percentiles, then rescale to [0, 1]."""
    m = np.asarray(m, dtype=np.float64)
    if m.size == 0:
        raise ContractError("robust_normalize needs a non-empty map")
    lo, hi = np.percentile(m, [lo_pct, hi_pct])
    if not hi > lo:
        return np.zeros_like(m)
    return (np.clip(m, lo, hi) - lo) / (hi - lo)


def importance_field(opacity_term, ssim_agg, l1_agg, alpha: float = WEIGHT_OPACITY,
                     beta: float = WEIGHT_SSIM, gamma: float = WEIGHT_L1) -> np.ndarray:
    """Logistic fusion of the (already normalized) opacity, SSIM and L1 maps."""
    o, s, l = (np.asarray(a, dtype=np.float64) for a in (opacity_term, ssim_agg, l1_agg))
    if not (o.shape == s.shape == l.shape):
        raise ContractError("importance_field inputs differ in resolution")
    return sigmoid(alpha * o + beta * s + gamma * l)


def opacity_map(renders, mode: str = "deficit") -> np.ndarray:
    """Per-pixel opacity signal averaged over the subset.

    ``deficit`` is ``1 - accumulated_alpha`` (uncovered pixels score high);
    ``coverage`` is ``accumulated_alpha`` itself.
    """
    acc = np.mean([r.accumulated_alpha for r in renders], axis=0)
    if mode == "deficit":
        return 1.0 - acc
    if mode == "coverage":
        return acc
    raise ContractError(f"unknown opacity_term mode {mode!r}")


@dataclass
class ImportanceField:
    s_map: np.ndarray
    reference_camera: Camera
    per_gaussian: np.ndarray
    p_pick: np.ndarray


def gaussian_importance(cloud: GaussianCloud, s_map: np.ndarray, reference_camera: Camera):
    """Read ``s`` under each splat center; off-screen splats get the field minimum."""
    H, W = s_map.shape
    if (W, H) != reference_camera.resolution:
        raise ContractError("s_map resolution does not match the reference camera")
    uv, z = reference_camera.project(cloud.positions)
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0])
        row = np.floor(uv[:, 1])
    inside = (z > reference_camera.near) & np.isfinite(col) & np.isfinite(row)
    inside &= (col >= 0) & (col < W) & (row >= 0) & (row < H)
    I = np.full(len(cloud), float(s_map.min()))
    I[inside] = s_map[row[inside].astype(np.int64), col[inside].astype(np.int64)]
    p_pick = I / I.sum()
    return I, p_pick


def build_importance(cloud: GaussianCloud, renders, targets, reference_camera: Camera,
                     alpha: float = WEIGHT_OPACITY, beta: float = WEIGHT_SSIM,
                     gamma: float = WEIGHT_L1, opacity_mode: str = "deficit",
                     maps=None) -> ImportanceField:
    """Full pipeline from subset renders to an :class:`ImportanceField`."""
    ssim_agg, l1_agg = maps if maps is not None else aggregate_error_maps(renders, targets)
    o = robust_normalize(opacity_map(renders, opacity_mode))
    s = importance_field(o, robust_normalize(ssim_agg), robust_normalize(l1_agg), alpha, beta, gamma)
    I, p = gaussian_importance(cloud, s, reference_camera)
    return ImportanceField(s, reference_camera, I, p)

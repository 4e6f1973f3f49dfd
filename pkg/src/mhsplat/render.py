"""Differentiable CPU splat rasterizer.

Forward: project every splat with the local affine approximation of the
perspective map, sort globally front-to-back by camera depth (ties broken by
splat index), then alpha-composite each pixel over the splats whose 3-sigma
ellipse covers its center. Backward: exact gradients of that piecewise-smooth
map with respect to every raw splat parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .scene import Camera, ContractError, GaussianCloud, ImageBuffer, quat_to_rotmat, sigmoid

COV2D_DILATION = 0.3
MAX_CONDITION = 1e12
WHITE = np.ones(3)
BLACK = np.zeros(3)


@dataclass
class ProjectedSplat:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float
    splat_index: int


@dataclass
class Projection:
    """Per-splat projection results for one camera, array form."""

    mean2d: np.ndarray      # (N, 2)
    cov2d: np.ndarray       # (N, 2, 2), dilated
    conic: np.ndarray       # (N, 3): inverse cov2d entries xx, xy, yy
    depth: np.ndarray       # (N,)
    bbox: np.ndarray        # (N, 4) int: col0, col1, row0, row1 inclusive
    visible: np.ndarray     # (N,) bool
    order: np.ndarray       # sorted indices of visible splats
    n_degenerate: int
    # intermediates for the backward pass
    p_cam: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    rot: np.ndarray
    scale: np.ndarray
    qnorm: np.ndarray

    def splat(self, i: int) -> ProjectedSplat | None:
        if not self.visible[i]:
            return None
        return ProjectedSplat(self.mean2d[i].copy(), self.cov2d[i].copy(), float(self.depth[i]), i)


def project_cloud(cloud: GaussianCloud, camera: Camera) -> Projection:
    n = len(cloud)
    Rc = camera.R
    p = cloud.positions @ Rc.T + camera.t
    X, Y, Z = p[:, 0], p[:, 1], p[:, 2]
    in_depth = (Z > camera.near) & (Z < camera.far)
    Zs = np.where(in_depth, Z, 1.0)
    mean2d = np.stack([camera.fx * X / Zs + camera.cx, camera.fy * Y / Zs + camera.cy], axis=1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / Zs
    J[:, 0, 2] = -camera.fx * X / (Zs * Zs)
    J[:, 1, 1] = camera.fy / Zs
    J[:, 1, 2] = -camera.fy * Y / (Zs * Zs)

    qnorm = np.linalg.norm(cloud.rotations, axis=1)
    rot = quat_to_rotmat(cloud.rotations)
    scale = np.exp(cloud.raw_scales)
    M = rot * scale[:, None, :]
    cov3 = M @ M.transpose(0, 2, 1)
    cov_cam = Rc @ cov3 @ Rc.T
    cov2d = J @ cov_cam @ J.transpose(0, 2, 1)
    cov2d[:, 0, 0] += COV2D_DILATION
    cov2d[:, 1, 1] += COV2D_DILATION

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    tr_half = 0.5 * (a + c)
    disc = np.sqrt(np.maximum(tr_half * tr_half - det, 0.0))
    lam_max = tr_half + disc
    lam_min = tr_half - disc
    finite = np.isfinite(lam_max) & np.isfinite(lam_min)
    ok = finite & (lam_min > 0) & (lam_max < MAX_CONDITION * np.where(lam_min > 0, lam_min, 1.0))
    degenerate = in_depth & ~ok
    safe_det = np.where(ok, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    rx = 3.0 * np.sqrt(np.where(ok, a, 0.0))
    ry = 3.0 * np.sqrt(np.where(ok, c, 0.0))
    with np.errstate(invalid="ignore"):
        col0 = np.ceil(mean2d[:, 0] - rx - 0.5)
        col1 = np.floor(mean2d[:, 0] + rx - 0.5)
        row0 = np.ceil(mean2d[:, 1] - ry - 0.5)
        row1 = np.floor(mean2d[:, 1] + ry - 0.5)
    col0 = np.clip(col0, 0, camera.width)
    col1 = np.clip(col1, -1, camera.width - 1)
    row0 = np.clip(row0, 0, camera.height)
    row1 = np.clip(row1, -1, camera.height - 1)
    bbox = np.stack([col0, col1, row0, row1], axis=1)
    bbox = np.where(np.isfinite(bbox), bbox, -1).astype(np.int64)
    visible = in_depth & ok & (bbox[:, 0] <= bbox[:, 1]) & (bbox[:, 2] <= bbox[:, 3])

    idx = np.flatnonzero(visible)
    order = idx[np.lexsort((idx, Z[idx]))]
    return Projection(mean2d, cov2d, conic, Z, bbox, visible, order, int(degenerate.sum()),
                      p, J, cov_cam, rot, scale, qnorm)


def project_gaussian(splat, camera: Camera) -> ProjectedSplat | None:
    """Project a single splat; ``None`` if it is culled."""
    cloud = GaussianCloud.from_splats([splat])
    proj = project_cloud(cloud, camera)
    in_depth = camera.near < proj.depth[0] < camera.far
    if not in_depth:
        return None
    return ProjectedSplat(proj.mean2d[0].copy(), proj.cov2d[0].copy(), float(proj.depth[0]), 0)


@dataclass
class RenderOutput:
    image: ImageBuffer
    accumulated_alpha: np.ndarray
    projection: Projection = field(repr=False)
    camera: Camera = field(repr=False)
    n_splats: int = 0
    background: np.ndarray = field(default_factory=lambda: BLACK.copy(), repr=False)
    t_final: np.ndarray = field(default=None, repr=False)
    last_rank: np.ndarray = field(default=None, repr=False)
    n_contrib: np.ndarray = field(default=None, repr=False)
    contrib_sum: np.ndarray = field(default=None, repr=False)
    alpha: np.ndarray = field(default=None, repr=False)
    color: np.ndarray = field(default=None, repr=False)

    @property
    def n_degenerate(self) -> int:
        return self.projection.n_degenerate

    def footprint_signature(self) -> bytes:
        """Identifies which splats contributed to which pixels."""
        return self.n_contrib.tobytes() + self.contrib_sum.tobytes()

    def sorted_splats(self) -> list[ProjectedSplat]:
        return [self.projection.splat(int(i)) for i in self.projection.order]


def render(cloud: GaussianCloud, camera: Camera, background=None) -> RenderOutput:
    if len(cloud) < 1:
        raise ContractError("render needs at least one splat")
    bg = BLACK if background is None else np.asarray(background, dtype=np.float64)
    proj = project_cloud(cloud, camera)
    alpha = np.ascontiguousarray(sigmoid(cloud.raw_opacities))
    color = np.ascontiguousarray(cloud.colors)
    H, W = camera.height, camera.width
    image = np.empty((H, W, 3))
    t_final = np.empty((H, W))
    last_rank = np.empty((H, W), dtype=np.int64)
    n_contrib = np.empty((H, W), dtype=np.int64)
    contrib_sum = np.empty((H, W), dtype=np.int64)
    _kernels.composite_forward(
        proj.order, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        alpha, color, proj.bbox, H, W, bg, image, t_final, last_rank, n_contrib, contrib_sum,
    )
    return RenderOutput(
        image=ImageBuffer(image),
        accumulated_alpha=1.0 - t_final,
        projection=proj,
        camera=camera,
        n_splats=len(cloud),
        background=bg.copy(),
        t_final=t_final,
        last_rank=last_rank,
        n_contrib=n_contrib,
        contrib_sum=contrib_sum,
        alpha=alpha,
        color=color,
    )


@dataclass
class Gradients:
    """Loss gradients w.r.t. raw splat parameters, plus screen-space means."""

    position: np.ndarray
    raw_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    raw_opacity: np.ndarray
    mean2d: np.ndarray

    FIELDS = ("position", "raw_scale", "rotation", "color", "raw_opacity")

    @classmethod
    def zeros(cls, n: int) -> "Gradients":
        return cls(np.zeros((n, 3)), np.zeros((n, 3)), np.zeros((n, 4)),
                   np.zeros((n, 3)), np.zeros(n), np.zeros((n, 2)))

    def __iadd__(self, other: "Gradients"):
        for name in self.FIELDS + ("mean2d",):
            getattr(self, name)[...] += getattr(other, name)
        return self


def _quat_backward(q: np.ndarray, qnorm: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Chain d loss / dR through R(q / |q|) back to the raw quaternion."""
    qh = q / qnorm[:, None]
    w, x, y, z = qh.T
    G = dR
    dw = 2 * (-z * G[:, 0, 1] + y * G[:, 0, 2] + z * G[:, 1, 0] - x * G[:, 1, 2] - y * G[:, 2, 0] + x * G[:, 2, 1])
    dx = 2 * (y * G[:, 0, 1] + z * G[:, 0, 2] + y * G[:, 1, 0] - 2 * x * G[:, 1, 1] - w * G[:, 1, 2]
              + z * G[:, 2, 0] + w * G[:, 2, 1] - 2 * x * G[:, 2, 2])
    dy = 2 * (-2 * y * G[:, 0, 0] + x * G[:, 0, 1] + w * G[:, 0, 2] + x * G[:, 1, 0] + z * G[:, 1, 2]
              - w * G[:, 2, 0] + z * G[:, 2, 1] - 2 * y * G[:, 2, 2])
    dz = 2 * (-2 * z * G[:, 0, 0] - w * G[:, 0, 1] + x * G[:, 0, 2] + w * G[:, 1, 0] - 2 * z * G[:, 1, 1]
              + y * G[:, 1, 2] + x * G[:, 2, 0] + y * G[:, 2, 1])
    dqh = np.stack([dw, dx, dy, dz], axis=1)
    # d(q/|q|)/dq = (I - qh qh^T) / |q|
    return (dqh - qh * np.sum(dqh * qh, axis=1, keepdims=True)) / qnorm[:, None]


def render_backward(cloud: GaussianCloud, camera: Camera, grad_image, cache: RenderOutput) -> Gradients:
    """Gradients of a scalar loss given ``d loss / d image`` for ``cache``'s render."""
    if cache.camera != camera or cache.n_splats != len(cloud):
        raise ContractError("render cache does not match this cloud/camera")
    grad_image = np.ascontiguousarray(grad_image, dtype=np.float64)
    H, W = camera.height, camera.width
    if grad_image.shape != (H, W, 3):
        raise ContractError(f"grad_image shape {grad_image.shape} != {(H, W, 3)}")
    proj = cache.projection
    n = len(cloud)
    n_blocks = (H + _kernels.BLOCK_ROWS - 1) // _kernels.BLOCK_ROWS
    partial = np.zeros((n_blocks, n, _kernels.N_GRAD))
    _kernels.composite_backward(
        proj.order, np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic),
        cache.alpha, cache.color, proj.bbox, H, W, cache.background,
        cache.t_final, cache.last_rank, grad_image, partial,
    )
    g = partial[0].copy()
    for b in range(1, n_blocks):
        g += partial[b]
    out = Gradients.zeros(n)
    vis = proj.visible
    if not vis.any():
        return out

    alpha = cache.alpha
    out.color[:] = g[:, _kernels.G_R:_kernels.G_B + 1]
    out.raw_opacity[:] = g[:, _kernels.G_ALPHA] * alpha * (1.0 - alpha)
    out.mean2d[:] = g[:, _kernels.G_MX:_kernels.G_MY + 1]

    # conic -> cov2d: dL/dS = -Q dL/dQ Q (full symmetric matrices)
    Q = np.empty((n, 2, 2))
    Q[:, 0, 0] = proj.conic[:, 0]
    Q[:, 0, 1] = Q[:, 1, 0] = proj.conic[:, 1]
    Q[:, 1, 1] = proj.conic[:, 2]
    dQ = np.empty((n, 2, 2))
    dQ[:, 0, 0] = g[:, _kernels.G_QXX]
    dQ[:, 0, 1] = dQ[:, 1, 0] = g[:, _kernels.G_QXY]
    dQ[:, 1, 1] = g[:, _kernels.G_QYY]
    dS2 = -Q @ dQ @ Q

    J = proj.J
    Jt = J.transpose(0, 2, 1)
    d_cov_cam = Jt @ dS2 @ J
    dJ = 2.0 * dS2 @ J @ proj.cov_cam
    Rc = camera.R
    d_cov3 = Rc.T @ d_cov_cam @ Rc

    X, Y, Z = proj.p_cam.T
    Zs = np.where(vis, Z, 1.0)
    fx, fy = camera.fx, camera.fy
    dmx, dmy = out.mean2d[:, 0], out.mean2d[:, 1]
    dX = dmx * fx / Zs - dJ[:, 0, 2] * fx / Zs**2
    dY = dmy * fy / Zs - dJ[:, 1, 2] * fy / Zs**2
    dZ = (-dmx * fx * X / Zs**2 - dmy * fy * Y / Zs**2
          - dJ[:, 0, 0] * fx / Zs**2 + dJ[:, 0, 2] * 2 * fx * X / Zs**3
          - dJ[:, 1, 1] * fy / Zs**2 + dJ[:, 1, 2] * 2 * fy * Y / Zs**3)
    d_pcam = np.stack([dX, dY, dZ], axis=1)
    out.position[:] = d_pcam @ Rc

    # cov3 = M M^T with M = R diag(s)
    rot, s = proj.rot, proj.scale
    M = rot * s[:, None, :]
    dM = 2.0 * d_cov3 @ M
    ds = np.sum(dM * rot, axis=1)
    out.raw_scale[:] = ds * s
    dR = dM * s[:, None, :]
    out.rotation[:] = _quat_backward(cloud.rotations, proj.qnorm, dR)

    inv = ~vis
    for name in Gradients.FIELDS + ("mean2d",):
        getattr(out, name)[inv] = 0.0
    return out

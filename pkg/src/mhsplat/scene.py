"""Core scene types: Gaussian splats, clouds, cameras and image buffers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

QUAT_TOL = 1e-6


class InvalidParameterError(ValueError):
    """Raised when a splat or camera parameter is non-finite or out of range."""


class ContractError(ValueError):
    """Raised when an operation's preconditions are violated."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    out = np.log(p) - np.log1p(-p)
    return out if out.ndim else float(out)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices for quaternions stored as (w, x, y, z).

    Accepts shape (4,) or (N, 4); quaternions are normalized first.
    """
    q = np.asarray(q, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R[0] if single else R


def covariance_from_scale_rotation(scale, rotation) -> np.ndarray:
    """Return ``R S S^T R^T`` for activated scales and a (w, x, y, z) quaternion.

    Vectorized: ``scale`` may be (3,) or (N, 3) with matching ``rotation``.
    """
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("covariance inputs must be finite")
    if np.any(scale <= 0):
        raise InvalidParameterError("scale components must be positive")
    R = quat_to_rotmat(rotation)
    M = R * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


@dataclass(frozen=True)
class GaussianSplat:
    """A single primitive in raw (optimizer-side) parameterization."""

    position: np.ndarray
    raw_scale: np.ndarray
    rotation: np.ndarray
    color: np.ndarray
    raw_opacity: float

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.raw_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.raw_opacity))

    @property
    def covariance(self) -> np.ndarray:
        return covariance_from_scale_rotation(self.scale, self.rotation)


@dataclass
class GaussianCloud:
    """Scene state: struct-of-arrays storage of N splats.

    Rotations are (w, x, y, z); colors are plain RGB.
    """

    positions: np.ndarray
    raw_scales: np.ndarray
    rotations: np.ndarray
    colors: np.ndarray
    raw_opacities: np.ndarray
    iteration: int = 0
    rng_seed: int = 0

    PARAMS = ("positions", "raw_scales", "rotations", "colors", "raw_opacities")

    def __post_init__(self):
        n = len(self.positions)
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64).reshape(n, 3)
        self.raw_scales = np.ascontiguousarray(self.raw_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.colors = np.ascontiguousarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.raw_opacities = np.ascontiguousarray(self.raw_opacities, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.raw_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.raw_opacities)

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            self.positions[i].copy(),
            self.raw_scales[i].copy(),
            self.rotations[i].copy(),
            self.colors[i].copy(),
            float(self.raw_opacities[i]),
        )

    @classmethod
    def from_splats(cls, splats, iteration: int = 0, rng_seed: int = 0) -> "GaussianCloud":
        splats = list(splats)
        return cls(
            np.array([s.position for s in splats]),
            np.array([s.raw_scale for s in splats]),
            np.array([s.rotation for s in splats]),
            np.array([s.color for s in splats]),
            np.array([s.raw_opacity for s in splats]),
            iteration=iteration,
            rng_seed=rng_seed,
        )

    @classmethod
    def from_activated(cls, positions, scales, rotations, colors, opacities, **kw) -> "GaussianCloud":
        return cls(
            positions,
            np.log(np.asarray(scales, dtype=np.float64)),
            rotations,
            colors,
            logit(np.asarray(opacities, dtype=np.float64)),
            **kw,
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, p).copy() for p in self.PARAMS),
            iteration=self.iteration,
            rng_seed=self.rng_seed,
        )

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(
            *(getattr(self, p)[idx].copy() for p in self.PARAMS),
            iteration=self.iteration,
            rng_seed=self.rng_seed,
        )

    def append(self, positions, raw_scales, rotations, colors, raw_opacities):
        """Append rows in place."""
        self.positions = np.concatenate([self.positions, np.reshape(positions, (-1, 3))])
        self.raw_scales = np.concatenate([self.raw_scales, np.reshape(raw_scales, (-1, 3))])
        self.rotations = np.concatenate([self.rotations, np.reshape(rotations, (-1, 4))])
        self.colors = np.concatenate([self.colors, np.reshape(colors, (-1, 3))])
        self.raw_opacities = np.concatenate([self.raw_opacities, np.reshape(raw_opacities, (-1,))])

    def normalize_rotations(self):
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def equals(self, other: "GaussianCloud") -> bool:
        return len(self) == len(other) and all(
            np.array_equal(getattr(self, p), getattr(other, p)) for p in self.PARAMS
        )


@dataclass(frozen=True)
class Violation:
    index: int
    field: str
    message: str

    def __str__(self):
        return f"splat {self.index}: {self.field}: {self.message}"


def validate_cloud(cloud: GaussianCloud) -> list[Violation]:
    """List every invariant violation in ``cloud``; empty means valid."""
    out: list[Violation] = []
    for name in GaussianCloud.PARAMS:
        arr = getattr(cloud, name)
        bad = ~np.isfinite(arr)
        rows = np.flatnonzero(bad.reshape(len(cloud), -1).any(axis=1))
        out.extend(Violation(int(i), name, "non-finite value") for i in rows)
    norms = np.linalg.norm(cloud.rotations, axis=1)
    for i in np.flatnonzero(np.isfinite(norms) & (np.abs(norms - 1.0) > QUAT_TOL)):
        out.append(Violation(int(i), "rotations", f"quaternion norm {norms[i]:.6g} != 1"))
    with np.errstate(over="ignore", invalid="ignore"):
        alpha = cloud.opacities
        scale = cloud.scales
    for i in np.flatnonzero(np.isfinite(cloud.raw_opacities) & ((alpha <= 0) | (alpha >= 1))):
        out.append(Violation(int(i), "raw_opacities", f"opacity {alpha[i]:.6g} outside (0, 1)"))
    bad_scale = np.isfinite(cloud.raw_scales) & ~(scale > 0)
    for i in np.flatnonzero(bad_scale.any(axis=1)):
        out.append(Violation(int(i), "raw_scales", "activated scale not positive"))
    for i in np.flatnonzero(np.isfinite(cloud.colors).all(axis=1) & ((cloud.colors < 0) | (cloud.colors > 1)).any(axis=1)):
        out.append(Violation(int(i), "colors", "color outside [0, 1]"))
    out.sort(key=lambda v: (v.index, v.field))
    return out


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    Camera axes follow the x-right, y-down, z-forward convention; pixel
    ``(col, row)`` covers ``[col, col+1) x [row, row+1)`` so its center sits
    at ``(col + 0.5, row + 0.5)``.
    """

    R: np.ndarray
    t: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
            raise InvalidParameterError("camera extrinsics must be finite")
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-9) or np.linalg.det(R) <= 0:
            raise InvalidParameterError("camera rotation must be a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if not (0 < self.near < self.far):
            raise InvalidParameterError("require 0 < near < far")
        if self.width < 8 or self.height < 8:
            raise InvalidParameterError("resolution must be at least 8x8")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and camera-space depth of world points."""
        p = self.world_to_camera(np.atleast_2d(points))
        z = p[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([self.fx * p[:, 0] / z + self.cx, self.fy * p[:, 1] / z + self.cy], axis=1)
        return uv, z

    def key(self) -> tuple:
        return (self.R.tobytes(), self.t.tobytes(), self.fx, self.fy, self.cx, self.cy,
                self.width, self.height, self.near, self.far)

    def __eq__(self, other):
        return isinstance(other, Camera) and self.key() == other.key()

    def __hash__(self):
        return hash(self.key())


@dataclass
class ImageBuffer:
    """Row-major RGB float image of shape (height, width, 3)."""

    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ContractError(f"expected (H, W, 3) pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise InvalidParameterError("image contains non-finite values")

    @classmethod
    def target(cls, pixels) -> "ImageBuffer":
        """Ground-truth image: values clamped to [0, 1]."""
        return cls(np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def resolution(self) -> tuple[int, int]:
        return (self.width, self.height)

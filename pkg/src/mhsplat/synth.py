"""Procedural ground-truth scenes and camera rigs for end-to-end checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io
from .render import render
from .scene import Camera, ContractError, GaussianCloud, ImageBuffer

LAYOUTS = ("clustered", "uniform", "shell")


@dataclass(frozen=True)
class SceneSpec:
    n_gaussians: int = 2000
    extent: float = 1.0
    layout: str = "clustered"
    color_scheme: str = "smooth"
    opacity_range: tuple = (0.6, 0.95)
    seed: int = 0
    n_clusters: int = 12

    def __post_init__(self):
        if self.n_gaussians < 1:
            raise ContractError("n_gaussians must be >= 1")
        if not self.extent > 0:
            raise ContractError("extent must be positive")
        if self.layout not in LAYOUTS:
            raise ContractError(f"layout must be one of {LAYOUTS}")


def _random_rotations(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _positions(spec: SceneSpec, rng) -> np.ndarray:
    n, e = spec.n_gaussians, spec.extent
    if n == 1:
        return np.zeros((1, 3))
    if spec.layout == "uniform":
        return rng.uniform(-e, e, size=(n, 3))
    if spec.layout == "shell":
        d = rng.normal(size=(n, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        return d * rng.uniform(0.9 * e, e, size=(n, 1))
    centers = rng.uniform(-0.6 * e, 0.6 * e, size=(spec.n_clusters, 3))
    spread = rng.uniform(0.08, 0.25, size=spec.n_clusters) * e
    which = rng.integers(spec.n_clusters, size=n)
    p = centers[which] + rng.normal(size=(n, 3)) * spread[which, None]
    return np.clip(p, -e, e)


def _colors(spec: SceneSpec, pos: np.ndarray, rng) -> np.ndarray:
    n = len(pos)
    if spec.color_scheme == "random":
        return rng.uniform(0.05, 0.95, size=(n, 3))
    if spec.color_scheme == "smooth":
        phase = rng.uniform(0, 2 * np.pi, size=3)
        freq = rng.uniform(1.0, 2.5, size=(3, 3)) / spec.extent
        c = 0.5 + 0.4 * np.sin(pos @ freq + phase)
        return np.clip(c + rng.normal(0, 0.03, size=(n, 3)), 0.0, 1.0)
    raise ContractError(f"unknown color scheme {spec.color_scheme!r}")


def generate_scene(spec: SceneSpec) -> GaussianCloud:
    """Deterministic ground-truth cloud; scales follow nearest-neighbour spacing."""
    rng = np.random.default_rng(spec.seed)
    pos = _positions(spec, rng)
    n = len(pos)
    if n > 1:
        k = min(4, n)
        d, _ = cKDTree(pos).query(pos, k=k)
        spacing = d[:, 1:].mean(axis=1)
    else:
        spacing = np.array([0.1 * spec.extent])
    spacing = np.clip(spacing, 1e-3 * spec.extent, 0.2 * spec.extent)
    aniso = rng.uniform(0.5, 1.5, size=(n, 3))
    scales = 0.6 * spacing[:, None] * aniso
    lo, hi = spec.opacity_range
    opac = rng.uniform(lo, hi, size=n)
    return GaussianCloud.from_activated(pos, scales, _random_rotations(rng, n), _colors(spec, pos, rng),
                                        opac, rng_seed=spec.seed)


def look_at(center, target, up=(0.0, 0.0, 1.0)) -> tuple[np.ndarray, np.ndarray]:
    """World-to-camera (R, t) for a camera at ``center`` aimed at ``target``."""
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, (0.0, 1.0, 0.0))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def camera_rig(n_cameras: int, radius: float, look_at_point=(0.0, 0.0, 0.0),
               elevation_band=(-15.0, 35.0), resolution=(64, 64), fov_deg: float = 40.0,
               near: float = 0.05, far: float = 100.0) -> list[Camera]:
    """Cameras evenly spaced in azimuth; elevations cycle through the band."""
    if n_cameras < 2:
        raise ContractError("camera_rig needs at least 2 cameras")
    w, h = resolution
    f = 0.5 * w / np.tan(np.radians(fov_deg) / 2)
    lo, hi = elevation_band
    levels = np.array([lo]) if hi == lo else np.linspace(lo, hi, 3)
    target = np.asarray(look_at_point, dtype=np.float64)
    cams = []
    for i in range(n_cameras):
        az = 2 * np.pi * i / n_cameras
        el = np.radians(levels[i % len(levels)])
        c = target + radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        R, t = look_at(c, target)
        cams.append(Camera(R, t, f, f, w / 2, h / 2, w, h, near, far))
    return cams


@dataclass
class Dataset:
    cameras: list
    images: list
    splits: list
    extent: float = 1.0
    ground_truth: GaussianCloud | None = None
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (len(self.cameras) == len(self.images) == len(self.splits)):
            raise ContractError("cameras, images and splits must have equal length")

    @property
    def train_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == "train"]

    @property
    def test_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == "test"]

    def subset(self, which: str):
        idx = self.train_indices if which == "train" else self.test_indices
        return [self.cameras[i] for i in idx], [self.images[i] for i in idx]

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        (out / "images").mkdir(parents=True, exist_ok=True)
        io.write_cameras(out / "cameras.txt", self.cameras, self.splits, self.extent)
        for i, img in enumerate(self.images):
            io.write_ppm(out / "images" / f"{i:03d}.ppm", img)
        if self.ground_truth is not None:
            io.write_ply(out / "ground_truth.ply", self.ground_truth)

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        cams, splits, extent = io.read_cameras(path / "cameras.txt")
        images = [io.read_ppm(path / "images" / f"{i:03d}.ppm") for i in range(len(cams))]
        gt = io.read_ply(path / "ground_truth.ply") if (path / "ground_truth.ply").exists() else None
        if extent is None:
            centers = np.array([c.center for c in cams])
            extent = float(np.linalg.norm(centers - centers.mean(0), axis=1).max())
        return cls(cams, images, splits, extent, gt)


def bake_dataset(cloud: GaussianCloud, rig, resolution=None, test_every: int = 8,
                 extent: float = 1.0, background=None) -> Dataset:
    """Render ``cloud`` from every rig camera; each ``test_every``-th view is held out."""
    cams = list(rig)
    if resolution is not None:
        w, h = resolution
        cams = [c if c.resolution == (w, h) else Camera(c.R, c.t, c.fx * w / c.width, c.fy * h / c.height,
                                                        c.cx * w / c.width, c.cy * h / c.height, w, h,
                                                        c.near, c.far) for c in cams]
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    images = [ImageBuffer.target(render(cloud, cam, bg).image.pixels) for cam in cams]
    splits = ["test" if test_every and i % test_every == 0 else "train" for i in range(len(cams))]
    return Dataset(cams, images, splits, extent, cloud.copy(), bg)


def default_dataset(seed: int = 0, n_gaussians: int = 2000, n_cameras: int = 16,
                    resolution=(64, 64)) -> Dataset:
    """The desk-scale default scene used by the acceptance suite."""
    spec = SceneSpec(n_gaussians=n_gaussians, seed=seed)
    cloud = generate_scene(spec)
    rig = camera_rig(n_cameras, radius=3.5 * spec.extent, resolution=resolution)
    return bake_dataset(cloud, rig, extent=spec.extent)


def random_init(n: int, extent: float, seed: int, opacity: float = 0.1) -> GaussianCloud:
    """Random starting cloud inside the scene cube."""
    rng = np.random.default_rng(seed)
    pos = rng.uniform(-extent, extent, size=(n, 3))
    d, _ = cKDTree(pos).query(pos, k=min(4, n))
    spacing = d[:, 1:].mean(axis=1) if n > 1 else np.array([0.1 * extent])
    scales = np.repeat(np.clip(spacing, 1e-3 * extent, 0.3 * extent)[:, None], 3, axis=1) * 0.5
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianCloud.from_activated(pos, scales, rot, rng.uniform(0.2, 0.8, size=(n, 3)),
                                        np.full(n, opacity), rng_seed=seed)

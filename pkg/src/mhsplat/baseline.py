"""Threshold-based adaptive density control (clone / split / prune), for comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import ContractError, GaussianCloud, quat_to_rotmat

SPLIT_FACTOR = 1.6


@dataclass
class BaselineConfig:
    grad_threshold: float = 2e-4
    size_threshold: float = 0.01
    opacity_prune_threshold: float = 0.005
    max_scale_prune: float = 0.5
    split_factor: float = SPLIT_FACTOR
    n_split: int = 2
    max_gaussians: int = 0

    def __post_init__(self):
        if not (self.grad_threshold > 0 and self.size_threshold > 0 and self.opacity_prune_threshold > 0):
            raise ContractError("baseline thresholds must be positive")


@dataclass
class GradientAccumulator:
    """Running sum of view-space positional gradient norms per splat."""

    total: np.ndarray
    count: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "GradientAccumulator":
        return cls(np.zeros(n), np.zeros(n))

    def add(self, grad_mean2d: np.ndarray, visible: np.ndarray, width: int, height: int) -> None:
        # pixel-space gradients rescaled to normalized device coordinates
        g = grad_mean2d * np.array([0.5 * width, 0.5 * height])
        self.total[visible] += np.linalg.norm(g[visible], axis=1)
        self.count[visible] += 1

    def mean(self) -> np.ndarray:
        return np.where(self.count > 0, self.total / np.maximum(self.count, 1), 0.0)


@dataclass
class BaselineReport:
    pruned: int = 0
    cloned: int = 0
    split: int = 0
    keep: np.ndarray | None = None
    n_new: int = 0

    @property
    def births(self) -> int:
        return self.n_new - self.split


def baseline_threshold_densify(cloud: GaussianCloud, grad_norms: np.ndarray, config: BaselineConfig,
                               rng, position_grads: np.ndarray | None = None,
                               extent: float = 1.0) -> tuple[GaussianCloud, BaselineReport]:
    """Prune transparent or oversized splats; clone small / split large high-gradient ones.

    Returns a new cloud laid out as ``[kept original rows..., new rows...]`` and a
    report whose ``keep`` mask maps old rows to surviving rows.
    """
    n = len(cloud)
    if len(grad_norms) != n:
        raise ContractError("gradient accumulator does not match the cloud")
    scale = cloud.scales
    smax = scale.max(axis=1)
    tau_s = config.size_threshold * extent
    prune = (cloud.opacities < config.opacity_prune_threshold) | (smax > config.max_scale_prune * extent)
    hot = (grad_norms > config.grad_threshold) & ~prune
    cand = np.flatnonzero(hot)
    if config.max_gaussians > 0:
        room = max(0, config.max_gaussians - (n - int(prune.sum())))
        cand = cand[np.argsort(-grad_norms[cand], kind="stable")][:room]
        cand.sort()
    clone = cand[smax[cand] <= tau_s]
    split = cand[smax[cand] > tau_s]

    new_rows = []
    if len(clone):
        pos = cloud.positions[clone].copy()
        if position_grads is not None:
            g = position_grads[clone]
            gn = np.linalg.norm(g, axis=1, keepdims=True)
            pos -= np.where(gn > 0, g / np.maximum(gn, 1e-30), 0.0) * scale[clone].mean(axis=1, keepdims=True)
        new_rows.append((pos, cloud.raw_scales[clone], cloud.rotations[clone], cloud.colors[clone],
                         cloud.raw_opacities[clone]))
    if len(split):
        R = quat_to_rotmat(cloud.rotations[split])
        s = scale[split]
        for _ in range(config.n_split):
            local = rng.normal(size=(len(split), 3)) * s
            pos = cloud.positions[split] + np.einsum("nij,nj->ni", R, local)
            new_rows.append((pos, np.log(s / config.split_factor), cloud.rotations[split], cloud.colors[split],
                             cloud.raw_opacities[split]))

    keep = ~prune
    keep[split] = False
    out = cloud.subset(keep)
    n_new = 0
    for rows in new_rows:
        out.append(*rows)
        n_new += len(rows[0])
    report = BaselineReport(int(prune.sum()), len(clone), len(split), keep, n_new)
    return out, report

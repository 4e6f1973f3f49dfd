"""Birth proposals, the practical acceptance rule, relocation and a reference MH kernel."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import importance as imp
from .objective import LAMBDA_VOXEL, voxel_factor
from .render import render
from .scene import ContractError, GaussianCloud, GaussianSplat, logit, sigmoid

log = logging.getLogger(__name__)

RELOCATE_TAU = 0.005
ACCEPT_UPPER = float(sigmoid(1.0))


# ------------------------------------------------------------------ voxel grid

def voxel_index(position, voxel_size: float) -> tuple[int, int, int]:
    """Half-open cell ``floor(position / voxel_size)``."""
    if not voxel_size > 0:
        raise ContractError("voxel_size must be positive")
    p = np.asarray(position, dtype=np.float64)
    if not np.all(np.isfinite(p)):
        raise ContractError("voxel_index: non-finite position")
    k = np.floor(p / voxel_size).astype(np.int64)
    return int(k[0]), int(k[1]), int(k[2])


@dataclass
class VoxelGrid:
    voxel_size: float
    counts: dict = field(default_factory=dict)

    def count(self, key) -> int:
        return self.counts.get(key, 0)

    def count_at(self, position) -> int:
        return self.count(voxel_index(position, self.voxel_size))

    def add(self, position) -> tuple:
        key = voxel_index(position, self.voxel_size)
        self.counts[key] = self.counts.get(key, 0) + 1
        return key

    def total(self) -> int:
        return sum(self.counts.values())

    def __eq__(self, other):
        return (isinstance(other, VoxelGrid) and self.voxel_size == other.voxel_size
                and {k: v for k, v in self.counts.items() if v} == {k: v for k, v in other.counts.items() if v})


def voxel_counts(cloud: GaussianCloud, voxel_size: float) -> VoxelGrid:
    if not voxel_size > 0:
        raise ContractError("voxel_size must be positive")
    keys = np.floor(cloud.positions / voxel_size).astype(np.int64)
    uniq, cnt = np.unique(keys, axis=0, return_counts=True)
    return VoxelGrid(voxel_size, {tuple(int(v) for v in k): int(c) for k, c in zip(uniq, cnt)})


# ------------------------------------------------------------------- proposals

@dataclass
class ProposalCandidate:
    parent_index: int
    phase: str
    offset: np.ndarray
    new_splat: GaussianSplat
    importance: float
    sigma: float
    log_q: float
    voxel_factor: float = float("nan")
    rho: float = float("nan")


def normal_logpdf(offset, sigma: float) -> float:
    d = np.asarray(offset, dtype=np.float64)
    return float(-0.5 * d.size * math.log(2 * math.pi * sigma * sigma) - 0.5 * np.dot(d, d) / (sigma * sigma))


def propose_batch(cloud: GaussianCloud, p_pick, sigma: float, batch_size: int, rng,
                  importance=None, phase: str = "coarse") -> list[ProposalCandidate]:
    """Draw ``batch_size`` parents i.i.d. from ``p_pick`` and jitter copies of them."""
    if not sigma > 0:
        raise ContractError("proposal std must be positive")
    if batch_size < 0:
        raise ContractError("batch size must be non-negative")
    if batch_size == 0:
        return []
    p_pick = np.asarray(p_pick, dtype=np.float64)
    I = p_pick if importance is None else np.asarray(importance, dtype=np.float64)
    if len(p_pick) > len(cloud):
        raise ContractError("pick distribution longer than the cloud")
    # parents index the rows p_pick was built for; later births are not parents
    parents = rng.choice(len(p_pick), size=batch_size, p=p_pick)
    offsets = rng.normal(0.0, sigma, size=(batch_size, 3))
    out = []
    for i, d in zip(parents, offsets):
        i = int(i)
        splat = GaussianSplat(
            cloud.positions[i] + d,
            cloud.raw_scales[i].copy(),
            cloud.rotations[i].copy(),
            cloud.colors[i].copy(),
            float(cloud.raw_opacities[i]),
        )
        out.append(ProposalCandidate(i, phase, d, splat, float(I[i]), sigma,
                                     math.log(p_pick[i]) + normal_logpdf(d, sigma)))
    return out


def batch_log_density(candidates) -> float:
    """Log proposal density of a whole birth batch (product over candidates)."""
    return float(sum(c.log_q for c in candidates))


def acceptance_probability(importance: float, count: int, lam_v: float = LAMBDA_VOXEL) -> float:
    return float(sigmoid(importance)) * voxel_factor(count, lam_v)


def accept_candidate(candidate: ProposalCandidate, voxel_grid: VoxelGrid, lam_v: float, rng,
                     cloud: GaussianCloud | None = None) -> bool:
    """Test one birth against the current grid; on accept insert it and bump the grid."""
    key = voxel_index(candidate.new_splat.position, voxel_grid.voxel_size)
    c = voxel_grid.count(key)
    candidate.voxel_factor = voxel_factor(c, lam_v)
    candidate.rho = float(sigmoid(candidate.importance)) * candidate.voxel_factor
    accepted = rng.random() < candidate.rho
    if accepted:
        voxel_grid.counts[key] = c + 1
        if cloud is not None:
            s = candidate.new_splat
            cloud.append(s.position, s.raw_scale, s.rotation, s.color, s.raw_opacity)
    return bool(accepted)


# --------------------------------------------------------- classical reference

class ChainError(RuntimeError):
    pass


@dataclass
class MHChainState:
    state: object
    energy: float
    step: int
    rng: np.random.Generator
    accepted: int = 0


def classical_mh_step(chain: MHChainState, energy_fn: Callable, proposal_sampler: Callable,
                      proposal_density: Callable) -> MHChainState:
    """One textbook MH transition targeting ``exp(-energy_fn)``.

    ``proposal_sampler(x, rng)`` draws ``y``; ``proposal_density(y, x)`` returns
    ``log q(y | x)``.
    """
    y = proposal_sampler(chain.state, chain.rng)
    e_y = float(energy_fn(y))
    if not (math.isfinite(e_y) and math.isfinite(chain.energy)):
        raise ChainError(f"non-finite energy at step {chain.step}")
    log_ratio = (chain.energy - e_y) + proposal_density(chain.state, y) - proposal_density(y, chain.state)
    rho = 1.0 if log_ratio >= 0 else math.exp(log_ratio)
    if chain.rng.random() < rho:
        return MHChainState(y, e_y, chain.step + 1, chain.rng, chain.accepted + 1)
    return MHChainState(chain.state, chain.energy, chain.step + 1, chain.rng, chain.accepted)


def mh_acceptance(delta_energy: float, log_q_reverse: float = 0.0, log_q_forward: float = 0.0) -> float:
    """``min(1, exp(-dE) q(x|x') / q(x'|x))``."""
    r = -delta_energy + log_q_reverse - log_q_forward
    return 1.0 if r >= 0 else math.exp(r)


def run_chain(x0, energy_fn, proposal_sampler, proposal_density, n_steps: int, rng,
              burn_in: int = 0) -> tuple[list, MHChainState]:
    chain = MHChainState(x0, float(energy_fn(x0)), 0, rng)
    samples = []
    for t in range(burn_in + n_steps):
        chain = classical_mh_step(chain, energy_fn, proposal_sampler, proposal_density)
        if t >= burn_in:
            samples.append(chain.state)
    return samples, chain


# ------------------------------------------------------------------ relocation

@dataclass
class RelocationReport:
    dead: np.ndarray
    targets: np.ndarray
    target_probs: np.ndarray | None = None

    @property
    def count(self) -> int:
        return len(self.dead)

    @property
    def touched(self) -> np.ndarray:
        return np.union1d(self.dead, self.targets).astype(np.int64)


def relocation_probabilities(opacities, tau: float = RELOCATE_TAU):
    alive = np.flatnonzero(opacities > tau)
    w = opacities[alive]
    return alive, w / w.sum() if len(alive) else w


def relocate(cloud: GaussianCloud, tau: float = RELOCATE_TAU, rng=None) -> RelocationReport:
    """Move every splat with opacity <= tau onto an opacity-sampled live splat.

    A target picked by ``m`` dead splats shares its opacity among the ``m + 1``
    copies so that the stack composites to the original alpha.
    """
    empty = np.zeros(0, dtype=np.int64)
    a = cloud.opacities
    dead = np.flatnonzero(a <= tau)
    if len(dead) == 0:
        return RelocationReport(empty, empty)
    alive, p = relocation_probabilities(a, tau)
    if len(alive) == 0:
        log.warning("relocate: no splat above opacity %g; skipping", tau)
        return RelocationReport(empty, empty)
    targets = alive[rng.choice(len(alive), size=len(dead), p=p)]
    for name in ("positions", "raw_scales", "rotations", "colors"):
        arr = getattr(cloud, name)
        arr[dead] = arr[targets]
    for j, m in Counter(targets.tolist()).items():
        shared = 1.0 - (1.0 - a[j]) ** (1.0 / (m + 1))
        raw = logit(shared)
        cloud.raw_opacities[j] = raw
        cloud.raw_opacities[dead[targets == j]] = raw
    return RelocationReport(dead, targets, p)


# ---------------------------------------------------------------- densify step

@dataclass
class DensifyParams:
    """Absolute (already annealed and unit-converted) parameters for one step."""

    sigma_coarse: float
    sigma_fine: float
    voxel_size: float
    batch_coarse: int
    batch_fine: int
    lam_v: float = LAMBDA_VOXEL
    alpha: float = imp.WEIGHT_OPACITY
    beta: float = imp.WEIGHT_SSIM
    gamma: float = imp.WEIGHT_L1
    opacity_mode: str = "deficit"
    tau: float = RELOCATE_TAU
    relocate: bool = True


@dataclass
class DensifyReport:
    iteration: int
    k_t: int
    cameras: list
    births_coarse: int = 0
    births_fine: int = 0
    proposals_coarse: int = 0
    proposals_fine: int = 0
    relocations: int = 0
    total_splats: int = 0
    rhos: np.ndarray = field(default_factory=lambda: np.zeros(0))
    grid: VoxelGrid | None = None
    importance: imp.ImportanceField | None = None
    relocation: RelocationReport | None = None
    birth_positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    candidates: list = field(default_factory=list, repr=False)

    @property
    def accept_rate_coarse(self) -> float:
        return self.births_coarse / self.proposals_coarse if self.proposals_coarse else 0.0

    @property
    def accept_rate_fine(self) -> float:
        return self.births_fine / self.proposals_fine if self.proposals_fine else 0.0

    @property
    def births(self) -> int:
        return self.births_coarse + self.births_fine


def densification_step(cloud: GaussianCloud, cameras, targets, params: DensifyParams, t: int, rng,
                       schedule: imp.CameraSchedule, background=None) -> DensifyReport:
    """One coarse-to-fine birth step, mutating ``cloud`` in place.

    Order: camera subset, aggregate maps, relocation, importance and pick
    distribution, voxel counts, coarse batch, fine batch.
    """
    subset = imp.camera_subset(schedule, t)
    renders = [render(cloud, cameras[c], background) for c in subset]
    subset_targets = [targets[c] for c in subset]
    maps = imp.aggregate_error_maps(renders, subset_targets)
    report = DensifyReport(iteration=t, k_t=len(subset), cameras=subset)

    if params.relocate:
        report.relocation = relocate(cloud, params.tau, rng)
        report.relocations = report.relocation.count

    field_ = imp.build_importance(cloud, renders, subset_targets, cameras[subset[0]],
                                  params.alpha, params.beta, params.gamma, params.opacity_mode, maps)
    report.importance = field_
    grid = voxel_counts(cloud, params.voxel_size)
    n_before = len(cloud)
    rhos = []
    for phase, sigma, B in (("coarse", params.sigma_coarse, params.batch_coarse),
                            ("fine", params.sigma_fine, params.batch_fine)):
        cands = propose_batch(cloud, field_.p_pick, sigma, B, rng, field_.per_gaussian, phase)
        births = 0
        for cand in cands:
            births += accept_candidate(cand, grid, params.lam_v, rng, cloud)
            rhos.append(cand.rho)
        report.candidates.extend(cands)
        if phase == "coarse":
            report.births_coarse, report.proposals_coarse = births, len(cands)
        else:
            report.births_fine, report.proposals_fine = births, len(cands)
    report.rhos = np.asarray(rhos)
    report.grid = grid
    report.total_splats = len(cloud)
    report.birth_positions = cloud.positions[n_before:].copy()
    return report

"""Training loop: per-view photometric optimization with scheduled densification."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baseline as bl
from . import importance as imp
from .metrics import psnr
from .objective import loss, photometric_grad, regularizer_grads
from .render import render, render_backward
from .sampler import DensifyParams, DensifyReport, densification_step
from .scene import ContractError, GaussianCloud

log = logging.getLogger(__name__)

PARAM_CLASSES = ("positions", "raw_scales", "rotations", "colors", "raw_opacities")
GRAD_FIELDS = dict(zip(PARAM_CLASSES, ("position", "raw_scale", "rotation", "color", "raw_opacity")))
STRATEGIES = ("mh", "threshold", "none")

METRICS_COLUMNS = ("iter", "loss", "l1", "dssim", "psnr_train", "n_gaussians", "births", "relocations",
                   "accept_coarse", "accept_fine", "seconds")
DENSIFY_COLUMNS = ("iteration", "k_t", "births_coarse", "births_fine", "accept_rate_coarse",
                   "accept_rate_fine", "relocations", "total_splats", "rho_min", "rho_max")


class ConfigError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """All training knobs; proposal stds and voxel sizes are fractions of the scene extent."""

    iterations: int = 5000
    densify_from: int = 500
    densify_until: float = 0.6        # values <= 1 are a fraction of ``iterations``
    densify_interval: int = 100
    strategy: str = "mh"

    lam_dssim: float = 0.2
    lam_opacity: float = 0.01
    lam_scale: float = 0.01
    lam_v: float = 0.5

    sigma_coarse_start: float = 10.0
    sigma_coarse_end: float = 5.0
    sigma_fine_start: float = 2.0
    sigma_fine_end: float = 1.0
    sigma_unit: float = 0.01          # std = sigma * sigma_unit * extent
    voxel_start: float = 0.02
    voxel_end: float = 0.005
    batch_coarse: int = 4500
    batch_fine: int = 16000
    batch_scale: float = 0.005

    weight_opacity: float = imp.WEIGHT_OPACITY
    weight_ssim: float = imp.WEIGHT_SSIM
    weight_l1: float = imp.WEIGHT_L1
    opacity_term: str = "deficit"
    relocate: bool = True
    relocate_tau: float = 0.005

    grad_threshold: float = 2e-4
    size_threshold: float = 0.01
    opacity_prune: float = 0.005
    max_gaussians: int = 0

    lr_position: float = 1.6e-4       # multiplied by the scene extent
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_color: float = 2.5e-3
    lr_opacity: float = 5e-2
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15

    seed: int = 0
    checkpoint_every: int = 0
    timing: bool = True

    def __post_init__(self):
        self.validate()

    @property
    def t_min(self) -> int:
        return int(self.densify_from)

    @property
    def t_max(self) -> int:
        u = self.densify_until
        return int(round(u * self.iterations)) if u <= 1 else int(u)

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}")
        if self.strategy != "none" and not (self.t_min < self.t_max <= self.iterations):
            raise ConfigError("need densify_from < densify_until <= iterations")
        if self.densify_interval < 1:
            raise ConfigError("densify_interval must be >= 1")
        for name in ("lam_dssim", "lam_opacity", "lam_scale", "lam_v"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("sigma_coarse_start", "sigma_coarse_end", "sigma_fine_start", "sigma_fine_end",
                     "voxel_start", "voxel_end", "sigma_unit"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.opacity_term not in ("deficit", "coverage"):
            raise ConfigError("opacity_term must be deficit or coverage")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def lr_table(self, extent: float) -> dict:
        return {"positions": self.lr_position * extent, "raw_scales": self.lr_scale,
                "rotations": self.lr_rotation, "colors": self.lr_color, "raw_opacities": self.lr_opacity}

    def densify_iterations(self) -> list[int]:
        if self.strategy == "none":
            return []
        return list(range(self.t_min, self.t_max + 1, self.densify_interval))


def _coerce(name: str, typ, raw: str):
    try:
        if typ in (bool, "bool"):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {name}: {raw!r}") from None


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse flat ``key = value`` lines (``#`` comments); unknown keys are errors."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected key=value")
        key, raw = (p.strip() for p in s.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, types[key], raw)
    return dataclasses.replace(base or TrainConfig(), **values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text())


def dump_config(cfg: TrainConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg))


# ------------------------------------------------------------------- schedules

@dataclass(frozen=True)
class Annealed:
    sigma_coarse: float
    sigma_fine: float
    voxel_size: float
    batch_coarse: int
    batch_fine: int


def anneal(config: TrainConfig, t: int) -> Annealed:
    """Linear interpolation of the proposal schedule on densification progress."""
    if not config.t_min <= t <= config.t_max:
        raise ContractError(f"t={t} outside densification window [{config.t_min}, {config.t_max}]")
    p = (t - config.t_min) / (config.t_max - config.t_min)

    def lerp(a, b):
        return a + (b - a) * p

    return Annealed(
        lerp(config.sigma_coarse_start, config.sigma_coarse_end),
        lerp(config.sigma_fine_start, config.sigma_fine_end),
        lerp(config.voxel_start, config.voxel_end),
        config.batch_coarse,
        config.batch_fine,
    )


def densify_params(config: TrainConfig, t: int, extent: float) -> DensifyParams:
    a = anneal(config, t)
    unit = config.sigma_unit * extent
    return DensifyParams(
        sigma_coarse=a.sigma_coarse * unit,
        sigma_fine=a.sigma_fine * unit,
        voxel_size=a.voxel_size * extent,
        batch_coarse=int(round(a.batch_coarse * config.batch_scale)),
        batch_fine=int(round(a.batch_fine * config.batch_scale)),
        lam_v=config.lam_v,
        alpha=config.weight_opacity,
        beta=config.weight_ssim,
        gamma=config.weight_l1,
        opacity_mode=config.opacity_term,
        tau=config.relocate_tau,
        relocate=config.relocate,
    )


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, cloud: GaussianCloud) -> "AdamState":
        return cls({k: np.zeros_like(getattr(cloud, k)) for k in PARAM_CLASSES},
                   {k: np.zeros_like(getattr(cloud, k)) for k in PARAM_CLASSES})

    def __len__(self) -> int:
        return len(self.m["positions"])

    def extend(self, n_new: int) -> None:
        for d in (self.m, self.v):
            for k in PARAM_CLASSES:
                d[k] = np.concatenate([d[k], np.zeros((n_new,) + d[k].shape[1:])])

    def reset_rows(self, idx) -> None:
        for d in (self.m, self.v):
            for k in PARAM_CLASSES:
                d[k][idx] = 0.0

    def select(self, keep) -> None:
        for d in (self.m, self.v):
            for k in PARAM_CLASSES:
                d[k] = d[k][keep]

    def equals(self, other: "AdamState") -> bool:
        return self.step == other.step and all(
            np.array_equal(a[k], b[k]) for a, b in ((self.m, other.m), (self.v, other.v)) for k in PARAM_CLASSES)


def adam_step(params: dict, grads: dict, state: AdamState, lr_table: dict, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-15) -> AdamState:
    """In-place Adam update of every parameter class in ``params``."""
    state.step += 1
    bc1 = 1.0 - beta1 ** state.step
    bc2 = 1.0 - beta2 ** state.step
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape or state.m[k].shape != p.shape:
            raise ContractError(f"adam_step: shape mismatch for {k}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr_table[k] * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


# ----------------------------------------------------------------- view order

@dataclass
class ViewSampler:
    """Round-robin over a freshly shuffled permutation of the training views each epoch."""

    views: list
    order: list = field(default_factory=list)
    pos: int = 0

    def next(self, rng) -> int:
        if self.pos >= len(self.order):
            self.order = [self.views[i] for i in rng.permutation(len(self.views))]
            self.pos = 0
        v = self.order[self.pos]
        self.pos += 1
        return int(v)


# ----------------------------------------------------------------- train state

@dataclass
class TrainState:
    cloud: GaussianCloud
    adam: AdamState
    schedule: imp.CameraSchedule
    views: ViewSampler
    rng: np.random.Generator
    accum: bl.GradientAccumulator
    iteration: int = 0


@dataclass
class TrainResult:
    cloud: GaussianCloud
    metrics: list
    densify: list
    state: TrainState


def _init_state(config: TrainConfig, dataset, init_cloud: GaussianCloud) -> TrainState:
    train_idx = dataset.train_indices
    cloud = init_cloud.copy()
    cloud.normalize_rotations()
    cloud.iteration = 0
    cloud.rng_seed = config.seed
    t_min, t_max = config.t_min, max(config.t_max, config.t_min + 1)
    return TrainState(
        cloud=cloud,
        adam=AdamState.zeros_like(cloud),
        schedule=imp.CameraSchedule(len(train_idx), t_min, t_max),
        views=ViewSampler(list(train_idx)),
        rng=np.random.default_rng(config.seed),
        accum=bl.GradientAccumulator.zeros(len(cloud)),
    )


def compute_iteration_loss(cloud: GaussianCloud, camera, target, config: TrainConfig, background):
    out = render(cloud, camera, background)
    lb = loss(out.image, target, cloud, config.lam_dssim, config.lam_opacity, config.lam_scale)
    return out, lb


def train(config: TrainConfig, dataset, init_cloud: GaussianCloud | None = None, resume: TrainState | None = None,
          checkpoint_dir=None, stop_at: int | None = None, progress=None,
          densify_hook=None) -> TrainResult:
    """Optimize a cloud against the training views and return it with metrics rows.

    ``resume`` continues from a loaded state; ``stop_at`` ends early at that
    iteration (exclusive) leaving the state resumable.  ``densify_hook(report,
    state)`` is called right after every densification step.
    """
    if len(dataset.train_indices) < 2:
        raise ContractError("train needs at least 2 training cameras")
    config.validate()
    state = resume if resume is not None else _init_state(config, dataset, init_cloud)
    bg = np.asarray(dataset.background, dtype=np.float64)
    cams, targets = dataset.cameras, dataset.images
    train_idx = dataset.train_indices
    train_cams = [cams[i] for i in train_idx]
    train_targets = [targets[i] for i in train_idx]
    lr = config.lr_table(dataset.extent)
    densify_at = set(config.densify_iterations())
    bcfg = bl.BaselineConfig(config.grad_threshold, config.size_threshold, config.opacity_prune,
                             max_gaussians=config.max_gaussians)
    metrics, dreports = [], []
    end = config.iterations if stop_at is None else min(stop_at, config.iterations)
    t0 = time.perf_counter()

    for it in range(state.iteration, end):
        cloud = state.cloud
        v = state.views.next(state.rng)
        cam, target = cams[v], targets[v]
        out, lb = compute_iteration_loss(cloud, cam, target, config, bg)
        if not math.isfinite(lb.total):
            if checkpoint_dir is not None:
                save_checkpoint(Path(checkpoint_dir) / "diagnostic.ckpt", state)
            raise NumericalError(f"non-finite loss at iteration {it}")
        p_train = psnr(out.image, target)

        g_img = photometric_grad(out.image, target, config.lam_dssim)
        grads = render_backward(cloud, cam, g_img, out)
        d_op, d_sc = regularizer_grads(cloud, config.lam_opacity, config.lam_scale)
        grads.raw_opacity += d_op
        grads.raw_scale += d_sc
        if config.strategy == "threshold":
            state.accum.add(grads.mean2d, out.projection.visible, cam.width, cam.height)
        adam_step({k: getattr(cloud, k) for k in PARAM_CLASSES},
                  {k: getattr(grads, GRAD_FIELDS[k]) for k in PARAM_CLASSES},
                  state.adam, lr, config.adam_beta1, config.adam_beta2, config.adam_eps)
        np.clip(cloud.colors, 0.0, 1.0, out=cloud.colors)
        cloud.normalize_rotations()

        births = relocs = 0
        acc_c = acc_f = 0.0
        if it in densify_at:
            if config.strategy == "mh":
                n_before = len(cloud)
                rep = densification_step(cloud, train_cams, train_targets,
                                         densify_params(config, it, dataset.extent), it, state.rng,
                                         state.schedule, bg)
                if rep.relocation is not None and rep.relocation.count:
                    state.adam.reset_rows(rep.relocation.touched)
                state.adam.extend(len(cloud) - n_before)
                births, relocs = rep.births, rep.relocations
                acc_c, acc_f = rep.accept_rate_coarse, rep.accept_rate_fine
                dreports.append(rep)
            elif config.strategy == "threshold":
                new_cloud, brep = bl.baseline_threshold_densify(
                    cloud, state.accum.mean(), bcfg, state.rng, grads.position, dataset.extent)
                state.adam.select(brep.keep)
                state.adam.extend(brep.n_new)
                new_cloud.iteration = cloud.iteration
                new_cloud.rng_seed = cloud.rng_seed
                state.cloud = cloud = new_cloud
                state.accum = bl.GradientAccumulator.zeros(len(cloud))
                births = brep.births
                dreports.append(brep)
        if it in densify_at and densify_hook is not None:
            densify_hook(dreports[-1], state)
        if len(state.accum.total) != len(cloud):
            state.accum = bl.GradientAccumulator.zeros(len(cloud))

        state.iteration = it + 1
        cloud.iteration = state.iteration
        metrics.append({
            "iter": it, "loss": lb.total, "l1": lb.l1_term, "dssim": lb.dssim_term, "psnr_train": p_train,
            "n_gaussians": len(cloud), "births": births, "relocations": relocs,
            "accept_coarse": acc_c, "accept_fine": acc_f,
            "seconds": (time.perf_counter() - t0) if config.timing else 0.0,
        })
        if progress is not None:
            progress(metrics[-1])
        if checkpoint_dir is not None and config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(Path(checkpoint_dir) / f"iter_{state.iteration:06d}.ckpt", state)
    return TrainResult(state.cloud, metrics, dreports, state)


# -------------------------------------------------------------------- CSV out

def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRICS_COLUMNS])


def densify_rows(reports) -> list[dict]:
    rows = []
    for r in reports:
        if not isinstance(r, DensifyReport):
            continue
        rows.append({
            "iteration": r.iteration, "k_t": r.k_t, "births_coarse": r.births_coarse,
            "births_fine": r.births_fine, "accept_rate_coarse": r.accept_rate_coarse,
            "accept_rate_fine": r.accept_rate_fine, "relocations": r.relocations,
            "total_splats": r.total_splats,
            "rho_min": float(r.rhos.min()) if len(r.rhos) else float("nan"),
            "rho_max": float(r.rhos.max()) if len(r.rhos) else float("nan"),
        })
    return rows


def write_densify_csv(path, reports) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DENSIFY_COLUMNS)
        for r in densify_rows(reports):
            w.writerow([_fmt(r[c]) for c in DENSIFY_COLUMNS])


# ------------------------------------------------------------------ checkpoint

CKPT_MAGIC = b"MHSPLATC"
CKPT_VERSION = 1
CKPT_SECTIONS = (b"CLOD", b"ADAM", b"ACCU", b"SCHD")


class CheckpointError(ValueError):
    pass


def _pack_arrays(arrays) -> bytes:
    return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)


def _encode_state(state: TrainState) -> list[tuple[bytes, bytes]]:
    c = state.cloud
    n = len(c)
    clod = struct.pack("<QQq", n, c.iteration, c.rng_seed) + _pack_arrays(getattr(c, k) for k in PARAM_CLASSES)
    adam = struct.pack("<QQ", len(state.adam), state.adam.step) + _pack_arrays(
        [state.adam.m[k] for k in PARAM_CLASSES] + [state.adam.v[k] for k in PARAM_CLASSES])
    accu = struct.pack("<Q", len(state.accum.total)) + _pack_arrays([state.accum.total, state.accum.count])
    sched = {
        "iteration": state.iteration,
        "camera_schedule": [state.schedule.full_set_size, state.schedule.t_min, state.schedule.t_max,
                            state.schedule.cursor],
        "views": state.views.views, "view_order": state.views.order, "view_pos": state.views.pos,
        "rng": state.rng.bit_generator.state,
    }
    schd = json.dumps(sched, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return list(zip(CKPT_SECTIONS, (clod, adam, accu, schd)))


def checkpoint_bytes(state: TrainState) -> bytes:
    sections = _encode_state(state)
    out = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(sections))]
    for tag, payload in sections:
        out.append(tag + struct.pack("<Q", len(payload)) + payload)
    return b"".join(out)


def save_checkpoint(path, state: TrainState) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def _read_arrays(buf: bytes, offset: int, shapes, tag: str):
    out = []
    for shape in shapes:
        size = int(np.prod(shape)) * 8
        if offset + size > len(buf):
            raise CheckpointError(f"truncated checkpoint: section {tag} is incomplete")
        out.append(np.frombuffer(buf, dtype="<f8", count=int(np.prod(shape)), offset=offset).reshape(shape).copy())
        offset += size
    return out, offset


def parse_checkpoint(data: bytes) -> TrainState:
    if len(data) < 16 or data[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, n_sec = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    pos = 16
    sections = {}
    for expected in CKPT_SECTIONS:
        name = expected.decode()
        if pos + 12 > len(data):
            raise CheckpointError(f"truncated checkpoint: missing section {name}")
        tag = data[pos:pos + 4]
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        if tag != expected:
            raise CheckpointError(f"corrupt checkpoint: expected section {name}, found {tag!r}")
        pos += 12
        if pos + length > len(data):
            raise CheckpointError(f"truncated checkpoint: section {name} is incomplete")
        sections[name] = data[pos:pos + length]
        pos += length

    clod = sections["CLOD"]
    n, iteration, seed = struct.unpack_from("<QQq", clod, 0)
    shapes = [(n, 3), (n, 3), (n, 4), (n, 3), (n,)]
    arrays, _ = _read_arrays(clod, 24, shapes, "CLOD")
    cloud = GaussianCloud(*arrays, iteration=iteration, rng_seed=seed)

    adam_b = sections["ADAM"]
    na, step = struct.unpack_from("<QQ", adam_b, 0)
    ashapes = [(na, 3), (na, 3), (na, 4), (na, 3), (na,)]
    arrs, _ = _read_arrays(adam_b, 16, ashapes + ashapes, "ADAM")
    adam = AdamState(dict(zip(PARAM_CLASSES, arrs[:5])), dict(zip(PARAM_CLASSES, arrs[5:])), step)

    accu_b = sections["ACCU"]
    (nc,) = struct.unpack_from("<Q", accu_b, 0)
    (tot, cnt), _ = _read_arrays(accu_b, 8, [(nc,), (nc,)], "ACCU")

    try:
        sched = json.loads(sections["SCHD"].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: section SCHD: {exc}") from None
    size, t_min, t_max, cursor = sched["camera_schedule"]
    rng = np.random.default_rng()
    rng.bit_generator.state = sched["rng"]
    return TrainState(
        cloud=cloud,
        adam=adam,
        schedule=imp.CameraSchedule(size, t_min, t_max, cursor),
        views=ViewSampler(sched["views"], sched["view_order"], sched["view_pos"]),
        rng=rng,
        accum=bl.GradientAccumulator(tot, cnt),
        iteration=sched["iteration"],
    )


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes())

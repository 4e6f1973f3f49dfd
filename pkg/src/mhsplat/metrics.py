"""Image metrics, held-out evaluation and convergence statistics."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .objective import ssim_map
from .render import render
from .scene import ContractError, GaussianCloud

PSNR_CAP = 100.0


class CSVParseError(ValueError):
    pass


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; identical images hit the cap."""
    x = getattr(a, "pixels", a)
    y = getattr(b, "pixels", b)
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"psnr: resolution mismatch {x.shape} vs {y.shape}")
    mse = float(np.mean((x - y) ** 2))
    if mse <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / mse))


def ssim(a, b) -> float:
    return float(ssim_map(a, b).mean())


@dataclass
class EvalReport:
    views: list
    psnr: list
    ssim: list
    n_gaussians: int
    storage_bytes: int
    iteration_at_98pct: int | None = None
    total_iterations: int | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def rows(self) -> list[dict]:
        return [{"view": v, "psnr": p, "ssim": s} for v, p, s in zip(self.views, self.psnr, self.ssim)]

    def summary(self) -> str:
        lines = [f"test views: {len(self.views)}",
                 f"mean PSNR: {self.mean_psnr:.3f} dB",
                 f"mean SSIM: {self.mean_ssim:.4f}",
                 f"gaussians: {self.n_gaussians}",
                 f"storage: {self.storage_bytes} bytes"]
        if self.iteration_at_98pct is not None:
            lines.append(f"iteration at 98% of final PSNR: {self.iteration_at_98pct}")
        return "\n".join(lines)


def storage_bytes(cloud: GaussianCloud) -> int:
    """Size of the cloud in the PLY float32 layout (14 floats per splat)."""
    return len(cloud) * 14 * 4


def evaluate(cloud: GaussianCloud, dataset, metrics_csv=None, background=None) -> EvalReport:
    test = dataset.test_indices
    if not test:
        raise ContractError("evaluate: dataset has no test views")
    bg = dataset.background if background is None else background
    ps, ss = [], []
    for i in test:
        img = render(cloud, dataset.cameras[i], bg).image
        ps.append(psnr(img, dataset.images[i]))
        ss.append(ssim(img, dataset.images[i]))
    report = EvalReport(test, ps, ss, len(cloud), storage_bytes(cloud))
    if metrics_csv is not None:
        rows = read_metrics(metrics_csv) if not isinstance(metrics_csv, list) else metrics_csv
        report.iteration_at_98pct = convergence_point(rows)
        report.total_iterations = int(rows[-1]["iter"]) + 1
    return report


def read_metrics(source) -> list[dict]:
    """Parse a metrics CSV (path or text); numeric cells become floats."""
    if isinstance(source, (str, Path)) and Path(source).exists():
        text = Path(source).read_text()
    else:
        text = str(source)
    reader = csv.reader(_io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise CSVParseError("line 1: empty metrics file") from None
    rows = []
    for lineno, rec in enumerate(reader, 2):
        if not rec:
            continue
        if len(rec) != len(header):
            raise CSVParseError(f"line {lineno}: expected {len(header)} fields, got {len(rec)}")
        try:
            rows.append({k: float(v) for k, v in zip(header, rec)})
        except ValueError as exc:
            raise CSVParseError(f"line {lineno}: {exc}") from None
    return rows


def convergence_point(rows, column: str = "psnr_train", fraction: float = 0.98) -> int:
    """First iteration whose PSNR reaches ``fraction`` of the final row's PSNR."""
    if isinstance(rows, (str, Path)):
        rows = read_metrics(rows)
    if not rows:
        raise CSVParseError("no data rows")
    if column not in rows[0]:
        raise CSVParseError(f"line 1: missing column {column!r}")
    target = fraction * rows[-1][column]
    for r in rows:
        if r[column] >= target:
            return int(r["iter"])
    return int(rows[-1]["iter"])

"""Empirical check of the importance surrogate: does I(i) rank the true loss drop?"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import importance as imp
from .objective import LAMBDA_DSSIM, insertion_delta_loss, multiview_loss
from .render import render
from .sampler import propose_batch


@dataclass
class SurrogateReport:
    importance: np.ndarray
    neg_delta_loss: np.ndarray
    parents: np.ndarray
    spearman: float | None
    p_value: float | None
    base_loss: float

    @property
    def applicable(self) -> bool:
        return self.spearman is not None

    def rows(self) -> list[dict]:
        return [{"probe": k, "parent": int(p), "importance": float(i), "neg_delta_loss": float(d)}
                for k, (p, i, d) in enumerate(zip(self.parents, self.importance, self.neg_delta_loss))]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=["probe", "parent", "importance", "neg_delta_loss"],
                               lineterminator="\n")
            w.writeheader()
            w.writerows(self.rows())

    def summary(self) -> str:
        rho = "not applicable (constant importance)" if not self.applicable else f"{self.spearman:.4f}"
        return (f"probes: {len(self.importance)}\n"
                f"spearman(I, -dL): {rho}\n"
                f"fraction with -dL > 0: {np.mean(self.neg_delta_loss > 0):.3f}")


def rank_correlation(x, y) -> tuple[float | None, float | None]:
    """Spearman correlation, or ``(None, None)`` when either input has no spread."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(x) < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None, None
    r = spearmanr(x, y)
    return float(r.statistic), float(r.pvalue)


def surrogate_correlation(cloud, dataset, n_probes: int = 200, rng=None, sigma: float | None = None,
                          lam: float = LAMBDA_DSSIM, cameras=None, alpha: float = imp.WEIGHT_OPACITY,
                          beta: float = imp.WEIGHT_SSIM, gamma: float = imp.WEIGHT_L1,
                          opacity_mode: str = "deficit") -> SurrogateReport:
    """Draw candidates as the sampler would and measure their true -dL by re-rendering.

    The camera set defaults to every training view (the full subset at the
    start of densification); its first camera is the importance reference.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    idx = dataset.train_indices if cameras is None else list(cameras)
    cams = [dataset.cameras[i] for i in idx]
    tgts = [dataset.images[i] for i in idx]
    bg = dataset.background
    sigma = 0.1 * dataset.extent if sigma is None else sigma
    renders = [render(cloud, c, bg) for c in cams]
    field = imp.build_importance(cloud, renders, tgts, cams[0], alpha, beta, gamma, opacity_mode)
    cands = propose_batch(cloud, field.p_pick, sigma, n_probes, rng, field.per_gaussian)
    base = multiview_loss(cloud, cams, tgts, lam, bg)
    neg_dl = np.array([-insertion_delta_loss(cloud, c.new_splat, cams, tgts, lam, bg, base) for c in cands])
    I = np.array([c.importance for c in cands])
    rho, p = rank_correlation(I, neg_dl)
    return SurrogateReport(I, neg_dl, np.array([c.parent_index for c in cands]), rho, p, base)

"""numba kernels for per-pixel alpha compositing (forward and backward).

Work is split into fixed blocks of ``BLOCK_ROWS`` image rows. Each block walks
the globally depth-sorted splats in order, so every pixel sees exactly the
same sequence of floating-point operations regardless of how many threads
execute the blocks. Backward partials are accumulated per block and summed in
block order by the caller.
"""

import math
import os

import numba as nb
import numpy as np

if "NUMBA_THREADING_LAYER" not in os.environ:
    nb.config.THREADING_LAYER = "omp"

BLOCK_ROWS = 4
ALPHA_MAX = 0.99
T_MIN = 1e-4
# exp(-1/2 * 9): Mahalanobis radius 3 cutoff expressed on the exponent
POWER_MIN = -4.5

# partial gradient layout per splat
G_MX, G_MY, G_QXX, G_QXY, G_QYY, G_ALPHA, G_R, G_G, G_B = range(9)
N_GRAD = 9


@nb.njit(parallel=True, cache=True)
def composite_forward(order, mean2d, conic, alpha, color, bbox, height, width, bg,
                      image, t_final, last_rank, n_contrib, contrib_sum):
    n_blocks = (height + BLOCK_ROWS - 1) // BLOCK_ROWS
    n_sorted = order.shape[0]
    for blk in nb.prange(n_blocks):
        r0 = blk * BLOCK_ROWS
        r1 = min(height, r0 + BLOCK_ROWS)
        for r in range(r0, r1):
            for c in range(width):
                t_final[r, c] = 1.0
                last_rank[r, c] = -1
                n_contrib[r, c] = 0
                contrib_sum[r, c] = 0
                image[r, c, 0] = 0.0
                image[r, c, 1] = 0.0
                image[r, c, 2] = 0.0
        for k in range(n_sorted):
            i = order[k]
            y0 = max(bbox[i, 2], r0)
            y1 = min(bbox[i, 3], r1 - 1)
            if y0 > y1:
                continue
            x0 = bbox[i, 0]
            x1 = bbox[i, 1]
            mx = mean2d[i, 0]
            my = mean2d[i, 1]
            qxx = conic[i, 0]
            qxy = conic[i, 1]
            qyy = conic[i, 2]
            for r in range(y0, y1 + 1):
                dy = r + 0.5 - my
                for c in range(x0, x1 + 1):
                    T = t_final[r, c]
                    if T < T_MIN:
                        continue
                    dx = c + 0.5 - mx
                    power = -0.5 * (qxx * dx * dx + 2.0 * qxy * dx * dy + qyy * dy * dy)
                    if power < POWER_MIN:
                        continue
                    a = alpha[i] * math.exp(power)
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * T
                    image[r, c, 0] += color[i, 0] * w
                    image[r, c, 1] += color[i, 1] * w
                    image[r, c, 2] += color[i, 2] * w
                    t_final[r, c] = T * (1.0 - a)
                    last_rank[r, c] = k
                    n_contrib[r, c] += 1
                    contrib_sum[r, c] += i + 1
        for r in range(r0, r1):
            for c in range(width):
                T = t_final[r, c]
                image[r, c, 0] += T * bg[0]
                image[r, c, 1] += T * bg[1]
                image[r, c, 2] += T * bg[2]


@nb.njit(parallel=True, cache=True)
def composite_backward(order, mean2d, conic, alpha, color, bbox, height, width, bg,
                       t_final, last_rank, grad_image, partial):
    """Accumulate d loss / d (mean2d, conic, alpha, color) per block.

    ``partial`` has shape (n_blocks, n_splats, N_GRAD) and must be zeroed.
    """
    n_blocks = (height + BLOCK_ROWS - 1) // BLOCK_ROWS
    for blk in nb.prange(n_blocks):
        r0 = blk * BLOCK_ROWS
        r1 = min(height, r0 + BLOCK_ROWS)
        nr = r1 - r0
        T_cur = np.empty((nr, width))
        behind = np.empty((nr, width, 3))
        kmax = -1
        for r in range(r0, r1):
            for c in range(width):
                T = t_final[r, c]
                T_cur[r - r0, c] = T
                behind[r - r0, c, 0] = T * bg[0]
                behind[r - r0, c, 1] = T * bg[1]
                behind[r - r0, c, 2] = T * bg[2]
                if last_rank[r, c] > kmax:
                    kmax = last_rank[r, c]
        out = partial[blk]
        for k in range(kmax, -1, -1):
            i = order[k]
            y0 = max(bbox[i, 2], r0)
            y1 = min(bbox[i, 3], r1 - 1)
            if y0 > y1:
                continue
            x0 = bbox[i, 0]
            x1 = bbox[i, 1]
            mx = mean2d[i, 0]
            my = mean2d[i, 1]
            qxx = conic[i, 0]
            qxy = conic[i, 1]
            qyy = conic[i, 2]
            op = alpha[i]
            cr = color[i, 0]
            cg = color[i, 1]
            cb = color[i, 2]
            for r in range(y0, y1 + 1):
                dy = r + 0.5 - my
                for c in range(x0, x1 + 1):
                    if k > last_rank[r, c]:
                        continue
                    dx = c + 0.5 - mx
                    power = -0.5 * (qxx * dx * dx + 2.0 * qxy * dx * dy + qyy * dy * dy)
                    if power < POWER_MIN:
                        continue
                    G = math.exp(power)
                    a = op * G
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    rr = r - r0
                    one_m = 1.0 - a
                    T = T_cur[rr, c] / one_m
                    gr = grad_image[r, c, 0]
                    gg = grad_image[r, c, 1]
                    gb = grad_image[r, c, 2]
                    w = a * T
                    out[i, G_R] += w * gr
                    out[i, G_G] += w * gg
                    out[i, G_B] += w * gb
                    br = behind[rr, c, 0]
                    bgc = behind[rr, c, 1]
                    bb = behind[rr, c, 2]
                    dl_da = (gr * (cr * T - br / one_m)
                             + gg * (cg * T - bgc / one_m)
                             + gb * (cb * T - bb / one_m))
                    behind[rr, c, 0] = br + cr * w
                    behind[rr, c, 1] = bgc + cg * w
                    behind[rr, c, 2] = bb + cb * w
                    T_cur[rr, c] = T
                    if clamped:
                        continue
                    out[i, G_ALPHA] += G * dl_da
                    dpow = op * G * dl_da
                    out[i, G_MX] += dpow * (qxx * dx + qxy * dy)
                    out[i, G_MY] += dpow * (qxy * dx + qyy * dy)
                    out[i, G_QXX] += -0.5 * dpow * dx * dx
                    out[i, G_QXY] += -0.5 * dpow * dx * dy
                    out[i, G_QYY] += -0.5 * dpow * dy * dy

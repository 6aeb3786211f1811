"""Per-pixel compositing kernels (numba).

Gaussians arrive sorted front to back. Pixels are binned into square tiles
and each tile keeps the depth-ordered list of Gaussians whose screen
rectangle touches it. The rectangles are conservative: outside them the
alpha is provably below the 1/255 cutoff, so tiling never changes results.
"""

import math

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
TILE = 8
# exponents this far below the cutoff are skipped without evaluating exp()
_SKIP_MARGIN = 1e-6


@njit(cache=True)
def build_tiles(rects, width, height, tile):
    n_tx = (width + tile - 1) // tile
    n_ty = (height + tile - 1) // tile
    counts = np.zeros(n_tx * n_ty + 1, np.int64)
    for i in range(rects.shape[0]):
        x0, x1, y0, y1 = rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                counts[ty * n_tx + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    lists = np.empty(offsets[-1], np.int64)
    for i in range(rects.shape[0]):
        x0, x1, y0, y1 = rects[i, 0], rects[i, 1], rects[i, 2], rects[i, 3]
        if x0 > x1 or y0 > y1:
            continue
        for ty in range(y0 // tile, y1 // tile + 1):
            for tx in range(x0 // tile, x1 // tile + 1):
                t = ty * n_tx + tx
                lists[fill[t]] = i
                fill[t] += 1
    return offsets, lists


@njit(cache=True)
def _skip_thresholds(opac):
    out = np.empty(opac.shape[0])
    for i in range(opac.shape[0]):
        # opac * exp(power) < 1/255  <=>  power < log(1 / (255 opac))
        out[i] = math.log(ALPHA_MIN / opac[i]) - _SKIP_MARGIN if opac[i] > 0.0 else math.inf
    return out


@njit(cache=True)
def forward(width, height, tile, means, conics, opac, colors, offsets, lists):
    n_tx = (width + tile - 1) // tile
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    last = np.zeros((height, width), np.int64)
    contributed = np.zeros(means.shape[0], np.bool_)
    skip = _skip_thresholds(opac)
    for py in range(height):
        for px in range(width):
            t = (py // tile) * n_tx + px // tile
            start = offsets[t]
            T = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            n_last = 0
            for k in range(start, offsets[t + 1]):
                i = lists[k]
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                if power > 0.0 or power < skip[i]:
                    continue
                alpha = min(ALPHA_MAX, opac[i] * math.exp(power))
                if alpha < ALPHA_MIN:
                    continue
                test_T = T * (1.0 - alpha)
                if test_T < T_MIN:
                    break
                w = alpha * T
                r += colors[i, 0] * w
                g += colors[i, 1] * w
                b += colors[i, 2] * w
                T = test_T
                n_last = k - start + 1
                contributed[i] = True
            image[py, px, 0] = r
            image[py, px, 1] = g
            image[py, px, 2] = b
            trans[py, px] = T
            last[py, px] = n_last
    return image, trans, last, contributed


@njit(cache=True)
def backward(width, height, tile, means, conics, opac, colors, offsets, lists,
             trans, last, grad_image):
    n = means.shape[0]
    n_tx = (width + tile - 1) // tile
    d_means = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_colors = np.zeros((n, 3))
    skip = _skip_thresholds(opac)
    acc = np.zeros(3)
    last_color = np.zeros(3)
    for py in range(height):
        for px in range(width):
            t = (py // tile) * n_tx + px // tile
            start = offsets[t]
            T = trans[py, px]
            acc[:] = 0.0
            last_color[:] = 0.0
            last_alpha = 0.0
            g0 = grad_image[py, px, 0]
            g1 = grad_image[py, px, 1]
            g2 = grad_image[py, px, 2]
            for k in range(start + last[py, px] - 1, start - 1, -1):
                i = lists[k]
                dx = px - means[i, 0]
                dy = py - means[i, 1]
                power = -0.5 * (conics[i, 0] * dx * dx + conics[i, 2] * dy * dy) - conics[i, 1] * dx * dy
                if power > 0.0 or power < skip[i]:
                    continue
                G = math.exp(power)
                raw = opac[i] * G
                alpha = min(ALPHA_MAX, raw)
                if alpha < ALPHA_MIN:
                    continue
                T = T / (1.0 - alpha)
                w = alpha * T
                d_colors[i, 0] += w * g0
                d_colors[i, 1] += w * g1
                d_colors[i, 2] += w * g2
                d_alpha = 0.0
                for c in range(3):
                    acc[c] = last_alpha * last_color[c] + (1.0 - last_alpha) * acc[c]
                    last_color[c] = colors[i, c]
                gs = (g0, g1, g2)
                for c in range(3):
                    d_alpha += (colors[i, c] - acc[c]) * gs[c]
                d_alpha *= T
                last_alpha = alpha
                if raw > ALPHA_MAX:
                    # capped alpha is constant in every input
                    continue
                d_opac[i] += G * d_alpha
                d_power = opac[i] * G * d_alpha
                d_means[i, 0] += d_power * (conics[i, 0] * dx + conics[i, 1] * dy)
                d_means[i, 1] += d_power * (conics[i, 1] * dx + conics[i, 2] * dy)
                d_conics[i, 0] += -0.5 * dx * dx * d_power
                d_conics[i, 1] += -dx * dy * d_power
                d_conics[i, 2] += -0.5 * dy * dy * d_power
    return d_means, d_conics, d_opac, d_colors

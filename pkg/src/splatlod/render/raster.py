"""Tile-based front-to-back alpha blending (numba kernels).

Every pixel walks the depth-sorted list of splats whose pixel rectangle covers
it.  The tiled kernel, the naive all-splats kernel and the backward kernel all
go through the same per-splat alpha evaluation, so tiled and naive output are
bitwise identical.
"""

import numpy as np
from numba import njit, prange

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4

# column layout of the per-pair gradient buffer
G_MX, G_MY, G_CA, G_CB, G_CC, G_R, G_G, G_B, G_D, G_FI, G_FP, G_AS = range(12)
N_GRAD = 12


@njit(inline="always", cache=True)
def _eval_alpha(s, px, py, mx, my, conic, asc, fi, fp, tt, invk):
    """Return (alpha, src_alpha, G, A, B) for splat ``s`` at pixel (px, py).

    ``src_alpha`` is the threshold value: the alpha this splat would have if
    the parent coverage were not split among siblings.
    """
    dx = px + 0.5 - mx[s]
    dy = py + 0.5 - my[s]
    power = -0.5 * (conic[s, 0] * dx * dx + conic[s, 2] * dy * dy) - conic[s, 1] * dx * dy
    if power > 0.0:
        power = 0.0
    g = np.exp(power)
    a = fi[s] * asc[s] * g
    ai = a if a < ALPHA_MAX else ALPHA_MAX
    t = tt[s]
    if t < 1.0:
        b = fp[s] * asc[s] * g
        bp = b if b < ALPHA_MAX else ALPHA_MAX
        ap = 1.0 - (1.0 - bp) ** invk[s]
        alpha = t * ai + (1.0 - t) * ap
        src = t * ai + (1.0 - t) * bp
    else:
        b = 0.0
        alpha = ai
        src = ai
    return alpha, src, g, a, b


@njit(inline="always", cache=True)
def _blend_pixel(px, py, lst, start, end, rect, mx, my, conic, asc, fi, fp, tt, invk, col, dep, grp, blended):
    """Blend one pixel over list entries [start, end); returns (r, g, b, depth, T, stop)."""
    T = 1.0
    cr = 0.0
    cg = 0.0
    cb = 0.0
    cd = 0.0
    pending = False
    stop_group = -1
    stop = start
    for e in range(start, end):
        s = lst[e]
        if px < rect[s, 0] or px > rect[s, 1] or py < rect[s, 2] or py > rect[s, 3]:
            stop = e + 1
            continue
        if pending and (grp[s] < 0 or grp[s] != stop_group):
            break
        stop = e + 1
        alpha, src, g, a, b = _eval_alpha(s, px, py, mx, my, conic, asc, fi, fp, tt, invk)
        if src < ALPHA_MIN:
            continue
        w = alpha * T
        cr += col[s, 0] * w
        cg += col[s, 1] * w
        cb += col[s, 2] * w
        cd += dep[s] * w
        blended[s] = 1
        T = T * (1.0 - alpha)
        if T < T_MIN and not pending:
            pending = True
            stop_group = grp[s]
            if stop_group < 0:
                break
    return cr, cg, cb, cd, T, stop


@njit(parallel=True, cache=True)
def forward_tiles(width, height, tile, tiles_x, tile_start, tile_end, pair_splat,
                  rect, mx, my, conic, asc, fi, fp, tt, invk, col, dep, grp, n_splats):
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    trans = np.ones((height, width))
    last = np.zeros((height, width), dtype=np.int64)
    blended = np.zeros(n_splats, dtype=np.uint8)
    n_tiles = len(tile_start)
    for ti in prange(n_tiles):
        tx = ti % tiles_x
        ty = ti // tiles_x
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                r, g, b, d, T, stop = _blend_pixel(
                    px, py, pair_splat, tile_start[ti], tile_end[ti], rect, mx, my, conic, asc,
                    fi, fp, tt, invk, col, dep, grp, blended,
                )
                color[py, px, 0] = r
                color[py, px, 1] = g
                color[py, px, 2] = b
                depth[py, px] = d
                trans[py, px] = T
                last[py, px] = stop
    return color, depth, trans, last, blended


@njit(cache=True)
def forward_naive(width, height, rect, mx, my, conic, asc, fi, fp, tt, invk, col, dep, grp):
    n = len(mx)
    lst = np.arange(n)
    color = np.zeros((height, width, 3))
    depth = np.zeros((height, width))
    trans = np.ones((height, width))
    blended = np.zeros(n, dtype=np.uint8)
    for py in range(height):
        for px in range(width):
            r, g, b, d, T, stop = _blend_pixel(
                px, py, lst, 0, n, rect, mx, my, conic, asc, fi, fp, tt, invk, col, dep, grp, blended
            )
            color[py, px, 0] = r
            color[py, px, 1] = g
            color[py, px, 2] = b
            depth[py, px] = d
            trans[py, px] = T
    return color, depth, trans, blended


@njit(parallel=True, cache=True)
def backward_tiles(width, height, tile, tiles_x, tile_start, last, pair_splat,
                   rect, mx, my, conic, asc, fi, fp, tt, invk, col, dep,
                   trans, g_img, g_dep, n_pairs):
    out = np.zeros((n_pairs, N_GRAD))
    n_tiles = len(tile_start)
    for ti in prange(n_tiles):
        tx = ti % tiles_x
        ty = ti // tiles_x
        x0 = tx * tile
        y0 = ty * tile
        x1 = min(x0 + tile, width)
        y1 = min(y0 + tile, height)
        for py in range(y0, y1):
            for px in range(x0, x1):
                gr = g_img[py, px, 0]
                gg = g_img[py, px, 1]
                gb = g_img[py, px, 2]
                gd = g_dep[py, px]
                T = trans[py, px]
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                for e in range(last[py, px] - 1, tile_start[ti] - 1, -1):
                    s = pair_splat[e]
                    if px < rect[s, 0] or px > rect[s, 1] or py < rect[s, 2] or py > rect[s, 3]:
                        continue
                    alpha, src, g, a, b = _eval_alpha(s, px, py, mx, my, conic, asc, fi, fp, tt, invk)
                    if src < ALPHA_MIN:
                        continue
                    one_m = 1.0 - alpha
                    t_before = T / one_m
                    w = alpha * t_before
                    out[e, G_R] += gr * w
                    out[e, G_G] += gg * w
                    out[e, G_B] += gb * w
                    out[e, G_D] += gd * w
                    g_alpha = (
                        gr * (col[s, 0] * t_before - acc_r / one_m)
                        + gg * (col[s, 1] * t_before - acc_g / one_m)
                        + gb * (col[s, 2] * t_before - acc_b / one_m)
                        + gd * (dep[s] * t_before - acc_d / one_m)
                    )
                    acc_r += col[s, 0] * w
                    acc_g += col[s, 1] * w
                    acc_b += col[s, 2] * w
                    acc_d += dep[s] * w
                    T = t_before

                    t = tt[s]
                    ga = g_alpha * t if a < ALPHA_MAX else 0.0
                    gbb = 0.0
                    if t < 1.0 and b < ALPHA_MAX:
                        gbb = g_alpha * (1.0 - t) * invk[s] * (1.0 - b) ** (invk[s] - 1.0)
                    sc = asc[s]
                    out[e, G_FI] += ga * sc * g
                    out[e, G_FP] += gbb * sc * g
                    out[e, G_AS] += (ga * fi[s] + gbb * fp[s]) * g
                    g_pow = (ga * fi[s] + gbb * fp[s]) * sc * g
                    dx = px + 0.5 - mx[s]
                    dy = py + 0.5 - my[s]
                    out[e, G_CA] += -0.5 * dx * dx * g_pow
                    out[e, G_CB] += -dx * dy * g_pow
                    out[e, G_CC] += -0.5 * dy * dy * g_pow
                    out[e, G_MX] += (conic[s, 0] * dx + conic[s, 1] * dy) * g_pow
                    out[e, G_MY] += (conic[s, 2] * dy + conic[s, 1] * dx) * g_pow
    return out


@njit(cache=True)
def duplicate(rect, tile, tiles_x):
    """Emit (tile id, splat) pairs in splat order for every tile a splat's
    pixel rectangle touches."""
    n = len(rect)
    counts = np.zeros(n, dtype=np.int64)
    for s in range(n):
        if rect[s, 0] > rect[s, 1] or rect[s, 2] > rect[s, 3]:
            continue
        counts[s] = (rect[s, 1] // tile - rect[s, 0] // tile + 1) * (rect[s, 3] // tile - rect[s, 2] // tile + 1)
    total = counts.sum()
    tile_ids = np.empty(total, dtype=np.int64)
    splat_ids = np.empty(total, dtype=np.int64)
    k = 0
    for s in range(n):
        if counts[s] == 0:
            continue
        for ty in range(rect[s, 2] // tile, rect[s, 3] // tile + 1):
            for tx in range(rect[s, 0] // tile, rect[s, 1] // tile + 1):
                tile_ids[k] = ty * tiles_x + tx
                splat_ids[k] = s
                k += 1
    return tile_ids, splat_ids

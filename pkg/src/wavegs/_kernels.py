"""Numba kernels for tile-based splat rasterization.

The tile forward/backward pair and the brute-force reference renderer all
evaluate the same per-pixel front-to-back alpha blend; the reference is an
independent code path with no tiling, no contribution skip and no
transmittance early-out. Pixels are sampled at integer coordinates.

Parallelism is over tiles (forward/backward) or pixels (reference); every
thread writes disjoint outputs, and per-splat gradient reduction happens
outside the kernels in a fixed order, so results are bit-identical for
any thread count.
"""

import math

import numpy as np
from numba import njit, prange

F8 = np.float64


@njit(cache=True)
def bin_splats(mean2d, radius, tiles_x, tiles_y, tile_size, width, height):
    """CSR tile lists for splats given screen-space AABB radii.

    Splats must already be depth-sorted; per-tile lists inherit that
    order. radius < 0 means unbounded (bin to every tile).
    """
    n = mean2d.shape[0]
    ntiles = tiles_x * tiles_y
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    rects = np.empty((n, 4), dtype=np.int64)
    for i in range(n):
        if radius[i] < 0.0:
            tx0, tx1, ty0, ty1 = 0, tiles_x - 1, 0, tiles_y - 1
        else:
            x0 = mean2d[i, 0] - radius[i]
            x1 = mean2d[i, 0] + radius[i]
            y0 = mean2d[i, 1] - radius[i]
            y1 = mean2d[i, 1] + radius[i]
            tx0 = max(0, min(tiles_x - 1, int(math.floor(x0 / tile_size))))
            tx1 = max(0, min(tiles_x - 1, int(math.floor(x1 / tile_size))))
            ty0 = max(0, min(tiles_y - 1, int(math.floor(y0 / tile_size))))
            ty1 = max(0, min(tiles_y - 1, int(math.floor(y1 / tile_size))))
            if x1 < 0.0 or y1 < 0.0 or x0 > width - 1.0 or y0 > height - 1.0:
                # AABB fully outside: mark empty rect
                tx0, tx1, ty0, ty1 = 0, -1, 0, -1
        rects[i, 0] = tx0
        rects[i, 1] = tx1
        rects[i, 2] = ty0
        rects[i, 3] = ty1
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    cursor = offsets[:-1].copy()
    idx = np.empty(offsets[-1], dtype=np.int64)
    for i in range(n):
        for ty in range(rects[i, 2], rects[i, 3] + 1):
            for tx in range(rects[i, 0], rects[i, 1] + 1):
                t = ty * tiles_x + tx
                idx[cursor[t]] = i
                cursor[t] += 1
    return offsets, idx


@njit(cache=True, parallel=True)
def forward_tiles(
    mean2d,
    conic,
    color,
    depth,
    alpha,
    node,
    tile_offsets,
    tile_idx,
    tiles_x,
    tile_size,
    height,
    width,
    background,
    alpha_skip,
    t_floor,
    out_color,
    out_accum,
    out_depth_sum,
    node_weight,
):
    # skipping pairs with alpha * exp(-power) provably below the
    # contribution threshold avoids the exp; alpha <= 1 makes the bound
    # exact, so results are bit-identical with or without it
    max_power = -math.log(alpha_skip) if alpha_skip > 0.0 else np.inf
    ntiles = tile_offsets.shape[0] - 1
    for tile in prange(ntiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                transmittance = 1.0
                acc_r = 0.0
                acc_g = 0.0
                acc_b = 0.0
                acc_d = 0.0
                for e in range(start, end):
                    if transmittance < t_floor:
                        break
                    i = tile_idx[e]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = 0.5 * (
                        conic[i, 0] * dx * dx
                        + 2.0 * conic[i, 1] * dx * dy
                        + conic[i, 2] * dy * dy
                    )
                    if power < 0.0 or power > max_power:
                        continue
                    a_eff = alpha[i] * math.exp(-power)
                    if a_eff < alpha_skip:
                        continue
                    w = a_eff * transmittance
                    acc_r += w * color[i, 0]
                    acc_g += w * color[i, 1]
                    acc_b += w * color[i, 2]
                    acc_d += w * depth[i]
                    node_weight[node[i], py, px] += w
                    transmittance *= 1.0 - a_eff
                out_color[py, px, 0] = acc_r + transmittance * background[0]
                out_color[py, px, 1] = acc_g + transmittance * background[1]
                out_color[py, px, 2] = acc_b + transmittance * background[2]
                out_accum[py, px] = 1.0 - transmittance
                out_depth_sum[py, px] = acc_d


@njit(cache=True, parallel=True)
def reference_forward(
    mean2d,
    conic,
    color,
    depth,
    alpha,
    node,
    height,
    width,
    background,
    out_color,
    out_accum,
    out_depth_sum,
    node_weight,
):
    """Brute force: every splat at every pixel, exact arithmetic, global
    depth order, no tiling and no cutoffs."""
    n = mean2d.shape[0]
    for p in prange(height * width):
        py = p // width
        px = p % width
        transmittance = 1.0
        acc_r = 0.0
        acc_g = 0.0
        acc_b = 0.0
        acc_d = 0.0
        for i in range(n):
            dx = px - mean2d[i, 0]
            dy = py - mean2d[i, 1]
            power = 0.5 * (
                conic[i, 0] * dx * dx
                + 2.0 * conic[i, 1] * dx * dy
                + conic[i, 2] * dy * dy
            )
            if power < 0.0:
                continue
            a_eff = alpha[i] * math.exp(-power)
            w = a_eff * transmittance
            acc_r += w * color[i, 0]
            acc_g += w * color[i, 1]
            acc_b += w * color[i, 2]
            acc_d += w * depth[i]
            node_weight[node[i], py, px] += w
            transmittance *= 1.0 - a_eff
        out_color[py, px, 0] = acc_r + transmittance * background[0]
        out_color[py, px, 1] = acc_g + transmittance * background[1]
        out_color[py, px, 2] = acc_b + transmittance * background[2]
        out_accum[py, px] = 1.0 - transmittance
        out_depth_sum[py, px] = acc_d


@njit(cache=True, parallel=True)
def backward_tiles(
    mean2d,
    conic,
    color,
    depth,
    alpha,
    node,
    tile_offsets,
    tile_idx,
    tiles_x,
    tile_size,
    height,
    width,
    background,
    alpha_skip,
    t_floor,
    grad_color,
    grad_accum,
    grad_depth,
    grad_node_px,
    entry_grads,
):
    """Adjoint of forward_tiles.

    Replays the forward blend per pixel, then walks it back-to-front.
    Gradients accumulate into `entry_grads`, one 10-wide slot per CSR
    entry: (du, dv, d_conic_a, d_conic_b, d_conic_c, d_alpha, d_color_rgb,
    d_depth). Slots are disjoint across tiles, so the kernel is race-free;
    the caller reduces slots onto splats in fixed order.
    """
    max_power = -math.log(alpha_skip) if alpha_skip > 0.0 else np.inf
    ntiles = tile_offsets.shape[0] - 1
    for tile in prange(ntiles):
        tx = tile % tiles_x
        ty = tile // tiles_x
        x0 = tx * tile_size
        y0 = ty * tile_size
        start = tile_offsets[tile]
        end = tile_offsets[tile + 1]
        cap = end - start
        if cap <= 0:
            continue
        hit_entry = np.empty(cap, dtype=np.int64)
        hit_aeff = np.empty(cap, dtype=F8)
        hit_trans = np.empty(cap, dtype=F8)
        for py in range(y0, min(y0 + tile_size, height)):
            for px in range(x0, min(x0 + tile_size, width)):
                # forward replay
                transmittance = 1.0
                acc_d = 0.0
                count = 0
                for e in range(start, end):
                    if transmittance < t_floor:
                        break
                    i = tile_idx[e]
                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    power = 0.5 * (
                        conic[i, 0] * dx * dx
                        + 2.0 * conic[i, 1] * dx * dy
                        + conic[i, 2] * dy * dy
                    )
                    if power < 0.0 or power > max_power:
                        continue
                    a_eff = alpha[i] * math.exp(-power)
                    if a_eff < alpha_skip:
                        continue
                    hit_entry[count] = e
                    hit_aeff[count] = a_eff
                    hit_trans[count] = transmittance
                    acc_d += a_eff * transmittance * depth[i]
                    count += 1
                    transmittance *= 1.0 - a_eff
                accum = 1.0 - transmittance
                has_depth = accum > 1e-12
                d_mean = acc_d / accum if has_depth else 0.0

                gc0 = grad_color[py, px, 0]
                gc1 = grad_color[py, px, 1]
                gc2 = grad_color[py, px, 2]
                ga = grad_accum[py, px]
                gd = grad_depth[py, px]

                # back-to-front: behind-payload recurrence avoids division
                behind = 0.0
                for k in range(count - 1, -1, -1):
                    e = hit_entry[k]
                    i = tile_idx[e]
                    a_eff = hit_aeff[k]
                    trans = hit_trans[k]
                    w = a_eff * trans
                    payload = (
                        gc0 * (color[i, 0] - background[0])
                        + gc1 * (color[i, 1] - background[1])
                        + gc2 * (color[i, 2] - background[2])
                        + ga
                        + grad_node_px[node[i], py, px]
                    )
                    if has_depth:
                        payload += gd * (depth[i] - d_mean) / accum
                    d_aeff = trans * (payload - behind)
                    behind = a_eff * payload + (1.0 - a_eff) * behind

                    dx = px - mean2d[i, 0]
                    dy = py - mean2d[i, 1]
                    gauss = a_eff / alpha[i]
                    d_power = -a_eff * d_aeff          # d/d(0.5 q) chain folded
                    # q = ca dx^2 + 2 cb dx dy + cc dy^2, power = q/2
                    dq = 0.5 * d_power
                    entry_grads[e, 0] += -dq * 2.0 * (conic[i, 0] * dx + conic[i, 1] * dy)
                    entry_grads[e, 1] += -dq * 2.0 * (conic[i, 1] * dx + conic[i, 2] * dy)
                    entry_grads[e, 2] += dq * dx * dx
                    entry_grads[e, 3] += dq * 2.0 * dx * dy
                    entry_grads[e, 4] += dq * dy * dy
                    entry_grads[e, 5] += d_aeff * gauss
                    entry_grads[e, 6] += gc0 * w
                    entry_grads[e, 7] += gc1 * w
                    entry_grads[e, 8] += gc2 * w
                    if has_depth:
                        entry_grads[e, 9] += gd * w / accum

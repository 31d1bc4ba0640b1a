"""Deterministic CPU splat renderer with analytic gradients.

Typical use::

    out = render(gaussians, cam)                 # color, inverse-depth-weighted depth, T
    img = apply_exposure(out, cam.exposure)
    out = render(gaussians, cam, retain=True)
    grads = render_backward(out, dloss_dimg)
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from ..errors import MissingForwardState
from . import raster
from .project import ALPHA_MIN, DILATION, NEAR, Projection, SplatBatch, project, project_backward, project_batch
from .sh import C0, eval_sh, sh_basis

TILE = 16

__all__ = [
    "ALPHA_MIN", "DILATION", "NEAR", "TILE", "C0",
    "RenderOutput", "SplatBatch", "SplatGradients",
    "apply_exposure", "exposure_backward", "project", "project_batch",
    "render", "render_backward", "render_naive", "eval_sh", "sh_basis",
]


@dataclass
class _ForwardState:
    batch: SplatBatch
    cam: object
    proj: Projection
    order: np.ndarray  # sorted visible splat -> batch index
    arrays: tuple
    tile_start: np.ndarray
    tile_end: np.ndarray
    pair_splat: np.ndarray
    tiles_x: int
    last: np.ndarray


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3), linear, before exposure
    depth: np.ndarray  # (H, W), sum_i T_i alpha_i d_i
    transmittance: np.ndarray  # (H, W), final T
    rendered_count: int
    visible_count: int = 0
    state: _ForwardState | None = None


@dataclass
class SplatGradients:
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray  # w.r.t. the (unnormalized) input quaternion
    falloff: np.ndarray
    parent_falloff: np.ndarray
    sh: np.ndarray
    mean2d: np.ndarray  # screen-space positional gradient, for densification statistics
    exposure: np.ndarray  # (3, 4)


def _kernel_arrays(proj: Projection, batch: SplatBatch, order):
    c = np.ascontiguousarray
    return (
        c(proj.pix_rect[order]),
        c(proj.mean2d[order, 0]),
        c(proj.mean2d[order, 1]),
        c(proj.conic[order]),
        c(proj.alpha_scale[order]),
        c(batch.falloff[order]),
        c(batch.parent_falloff[order]),
        c(batch.t[order]),
        c(1.0 / batch.k[order].astype(np.float64)),
        c(proj.color[order]),
        c(proj.depth[order]),
        c(batch.group[order]),
    )


def _sorted_visible(proj: Projection):
    idx = np.flatnonzero(proj.visible)
    keys = np.lexsort((idx, proj.depth[idx]))
    return idx[keys]


def render(splats, cam, *, retain: bool = False, timings: dict | None = None) -> RenderOutput:
    """Rasterize ``splats`` (Gaussians, GaussianArrays or SplatBatch) for ``cam``.

    Splats are sorted globally by view depth (ties by input index) and blended
    front to back per pixel with alpha = min(0.99, falloff * alpha_scale * G).
    """
    clock = time.perf_counter
    t0 = clock()
    batch = SplatBatch.of(splats)
    w, h = cam.resolution
    proj = project_batch(batch, cam)
    order = _sorted_visible(proj)
    arrays = _kernel_arrays(proj, batch, order)
    t1 = clock()

    tiles_x = (w + TILE - 1) // TILE
    tiles_y = (h + TILE - 1) // TILE
    tile_ids, splat_ids = raster.duplicate(arrays[0], TILE, tiles_x)
    perm = np.argsort(tile_ids, kind="stable")
    pair_splat = np.ascontiguousarray(splat_ids[perm])
    t2 = clock()
    sorted_tiles = tile_ids[perm]
    bins = np.arange(tiles_x * tiles_y)
    tile_start = np.searchsorted(sorted_tiles, bins, side="left").astype(np.int64)
    tile_end = np.searchsorted(sorted_tiles, bins, side="right").astype(np.int64)
    t3 = clock()

    color, depth, trans, last, blended = raster.forward_tiles(
        w, h, TILE, tiles_x, tile_start, tile_end, pair_splat, *arrays, len(order)
    )
    t4 = clock()
    if timings is not None:
        for key, dt in (("preprocess", t1 - t0), ("duplicate", t2 - t1), ("tile ranges", t3 - t2),
                        ("alpha-blend", t4 - t3)):
            timings[key] = timings.get(key, 0.0) + dt

    state = None
    if retain:
        state = _ForwardState(batch, cam, proj, order, arrays, tile_start, tile_end, pair_splat, tiles_x, last)
    return RenderOutput(color, depth, trans, int(blended.sum()), len(order), state)


def render_naive(splats, cam) -> RenderOutput:
    """Reference renderer: every pixel scans the full sorted splat list."""
    batch = SplatBatch.of(splats)
    w, h = cam.resolution
    proj = project_batch(batch, cam)
    order = _sorted_visible(proj)
    arrays = _kernel_arrays(proj, batch, order)
    color, depth, trans, blended = raster.forward_naive(w, h, *arrays)
    return RenderOutput(color, depth, trans, int(blended.sum()), len(order))


def apply_exposure(out, exposure) -> np.ndarray:
    """C_c = E [C | 1]^T per pixel."""
    img = out.color if isinstance(out, RenderOutput) else np.asarray(out, dtype=np.float64)
    e = np.asarray(exposure, dtype=np.float64).reshape(3, 4)
    return img @ e[:, :3].T + e[:, 3]


def exposure_backward(color, exposure, grad_out):
    """Gradients of an exposure-applied image: (dL/dcolor, dL/dE)."""
    e = np.asarray(exposure, dtype=np.float64).reshape(3, 4)
    g = grad_out.reshape(-1, 3)
    c = color.reshape(-1, 3)
    g_e = np.empty((3, 4))
    g_e[:, :3] = g.T @ c
    g_e[:, 3] = g.sum(axis=0)
    return (grad_out @ e[:, :3]), g_e


def render_backward(out: RenderOutput, loss_grad, depth_grad=None) -> SplatGradients:
    """Analytic gradients of a loss w.r.t. all splat attributes.

    ``loss_grad`` is dL/d(image after the camera's exposure), shape (H, W, 3);
    ``depth_grad`` optionally dL/d(depth map).  Falloff gradients vanish where
    the 0.99 alpha clamp is active.
    """
    st = out.state
    if st is None:
        raise MissingForwardState("render(..., retain=True) is required before render_backward")
    cam = st.cam
    w, h = cam.resolution
    loss_grad = np.asarray(loss_grad, dtype=np.float64).reshape(h, w, 3)
    g_color_img, g_exposure = exposure_backward(out.color, cam.exposure, loss_grad)
    g_dep = np.zeros((h, w)) if depth_grad is None else np.asarray(depth_grad, dtype=np.float64).reshape(h, w)

    pair = raster.backward_tiles(
        w, h, TILE, st.tiles_x, st.tile_start, st.last, st.pair_splat, *st.arrays[:11],
        out.transmittance, np.ascontiguousarray(g_color_img), np.ascontiguousarray(g_dep), len(st.pair_splat),
    )
    n_vis = len(st.order)
    per = np.zeros((n_vis, raster.N_GRAD))
    np.add.at(per, st.pair_splat, pair)

    n = len(st.batch)
    full = np.zeros((n, raster.N_GRAD))
    full[st.order] = per
    r = raster
    g_means, g_scales, g_rot, g_sh = project_backward(
        st.batch, cam, st.proj,
        full[:, [r.G_MX, r.G_MY]], full[:, [r.G_CA, r.G_CB, r.G_CC]], full[:, r.G_AS],
        full[:, [r.G_R, r.G_G, r.G_B]], full[:, r.G_D],
    )
    invisible = ~st.proj.visible
    for arr in (g_means, g_scales, g_rot, g_sh):
        arr[invisible] = 0.0
    return SplatGradients(
        g_means, g_scales, g_rot, full[:, r.G_FI], full[:, r.G_FP], g_sh,
        full[:, [r.G_MX, r.G_MY]], g_exposure,
    )

"""Screen-space projection of splats with EWA low-pass dilation, and its
analytic backward pass."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..model import GaussianArrays, ProjectedSplat, as_arrays, quat_to_rotmat
from .sh import eval_sh, sh_basis, sh_basis_grad

NEAR = 0.01
DILATION = 0.3  # px^2 added to the projected covariance
ALPHA_MIN = 1.0 / 255.0


@dataclass
class SplatBatch:
    """Splats as handed to the rasterizer.

    Besides the plain attributes, each splat may be in a parent-to-child
    transition: ``t`` is the weight of the splat's own blend alpha (1 = plain
    splat), ``parent_falloff`` and ``k`` describe the parent whose coverage is
    shared among its ``k`` children at ``t = 0``.  Siblings that start a
    transition together share a ``group`` id (-1 = none).
    """

    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    falloff: np.ndarray
    sh: np.ndarray
    t: np.ndarray = None
    parent_falloff: np.ndarray = None
    k: np.ndarray = None
    group: np.ndarray = None

    def __post_init__(self):
        n = len(self.means)
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.falloff = np.asarray(self.falloff, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, 16, 3)
        self.t = np.ones(n) if self.t is None else np.asarray(self.t, dtype=np.float64).reshape(n)
        self.parent_falloff = (
            np.zeros(n) if self.parent_falloff is None else np.asarray(self.parent_falloff, dtype=np.float64).reshape(n)
        )
        self.k = np.ones(n, dtype=np.int64) if self.k is None else np.asarray(self.k, dtype=np.int64).reshape(n)
        self.group = (
            np.full(n, -1, dtype=np.int64) if self.group is None else np.asarray(self.group, dtype=np.int64).reshape(n)
        )

    def __len__(self):
        return len(self.means)

    @classmethod
    def of(cls, splats) -> "SplatBatch":
        if isinstance(splats, SplatBatch):
            return splats
        g = as_arrays(splats)
        return cls(g.means, g.scales, g.rotations, g.falloff, g.sh)

    def take(self, idx) -> "SplatBatch":
        return SplatBatch(
            self.means[idx], self.scales[idx], self.rotations[idx], self.falloff[idx], self.sh[idx],
            self.t[idx], self.parent_falloff[idx], self.k[idx], self.group[idx],
        )

    def gaussians(self) -> GaussianArrays:
        return GaussianArrays(self.means, self.scales, self.rotations, self.falloff, self.sh)


@dataclass
class Projection:
    """Per-splat screen-space quantities (all splats, ``visible`` marks survivors)."""

    visible: np.ndarray
    mean2d: np.ndarray
    cov_pre: np.ndarray
    cov_post: np.ndarray
    conic: np.ndarray  # (N, 3): a, b, c of the inverse 2D covariance
    alpha_scale: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    color_clamped: np.ndarray
    radius: np.ndarray
    pix_rect: np.ndarray  # (N, 4) inclusive x0, x1, y0, y1 pixel bounds
    # retained for the backward pass
    cam_points: np.ndarray = field(repr=False, default=None)
    jac: np.ndarray = field(repr=False, default=None)
    rotmat: np.ndarray = field(repr=False, default=None)
    cov3: np.ndarray = field(repr=False, default=None)
    dirs: np.ndarray = field(repr=False, default=None)
    dir_norm: np.ndarray = field(repr=False, default=None)
    basis: np.ndarray = field(repr=False, default=None)


def project_batch(batch: SplatBatch, cam) -> Projection:
    n = len(batch)
    rot_w = cam.rotation
    p = batch.means @ rot_w.T + cam.translation
    z = p[:, 2]
    in_front = z > NEAR
    zs = np.where(in_front, z, 1.0)
    fx, fy = cam.focal
    cx, cy = cam.principal
    mean2d = np.stack([fx * p[:, 0] / zs + cx, fy * p[:, 1] / zs + cy], axis=1)

    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * p[:, 0] / zs**2
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * p[:, 1] / zs**2
    tmat = jac @ rot_w

    rq = quat_to_rotmat(batch.rotations)
    m = rq * batch.scales[:, None, :]
    cov3 = m @ np.swapaxes(m, 1, 2)
    cov_pre = tmat @ cov3 @ np.swapaxes(tmat, 1, 2)
    cov_post = cov_pre + DILATION * np.eye(2)

    a, b, c = cov_post[:, 0, 0], cov_post[:, 0, 1], cov_post[:, 1, 1]
    det_post = a * c - b * b
    det_pre = cov_pre[:, 0, 0] * cov_pre[:, 1, 1] - cov_pre[:, 0, 1] ** 2
    alpha_scale = np.sqrt(np.maximum(det_pre, 0.0) / det_post)
    conic = np.stack([c / det_post, -b / det_post, a / det_post], axis=1)

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    sigma = np.sqrt(lam_max)
    r3 = 3.0 * sigma
    f_eff = np.where(batch.t < 1.0, np.maximum(batch.falloff, batch.parent_falloff), batch.falloff)
    # Mahalanobis radius where the blend alpha drops below ALPHA_MIN, never below 3 sigma
    with np.errstate(divide="ignore"):
        m2 = 2.0 * np.log(np.maximum(f_eff * alpha_scale / ALPHA_MIN, 1e-300))
    radius = np.sqrt(np.maximum(m2, 9.0)) * sigma

    w, h = cam.resolution
    visible = (
        in_front
        & (mean2d[:, 0] + r3 > 0) & (mean2d[:, 0] - r3 < w)
        & (mean2d[:, 1] + r3 > 0) & (mean2d[:, 1] - r3 < h)
    )
    rect = np.empty((n, 4), dtype=np.int64)
    with np.errstate(invalid="ignore"):
        lo_x = np.ceil(mean2d[:, 0] - radius - 0.5)
        hi_x = np.floor(mean2d[:, 0] + radius - 0.5)
        lo_y = np.ceil(mean2d[:, 1] - radius - 0.5)
        hi_y = np.floor(mean2d[:, 1] + radius - 0.5)
    rect[:, 0] = np.clip(np.nan_to_num(lo_x, nan=w), 0, w)
    rect[:, 1] = np.clip(np.nan_to_num(hi_x, nan=-1), -1, w - 1)
    rect[:, 2] = np.clip(np.nan_to_num(lo_y, nan=h), 0, h)
    rect[:, 3] = np.clip(np.nan_to_num(hi_y, nan=-1), -1, h - 1)
    visible &= (rect[:, 0] <= rect[:, 1]) & (rect[:, 2] <= rect[:, 3])

    cam_pos = cam.position
    dvec = batch.means - cam_pos
    dn = np.linalg.norm(dvec, axis=1)
    dn = np.where(dn > 0, dn, 1.0)
    dirs = dvec / dn[:, None]
    basis = sh_basis(dirs)
    raw = np.einsum("nk,nkc->nc", basis, batch.sh) + 0.5
    clamped = raw < 0
    color = np.where(clamped, 0.0, raw)

    return Projection(
        visible, mean2d, cov_pre, cov_post, conic, alpha_scale, z, color, clamped, radius, rect,
        p, jac, rq, cov3, dirs, dn, basis,
    )


def project(g, cam):
    """Project a single Gaussian; returns a ProjectedSplat or None when culled."""
    pr = project_batch(SplatBatch.of([g]), cam)
    if not pr.visible[0]:
        return None
    return ProjectedSplat(pr.mean2d[0], pr.cov_post[0], float(pr.alpha_scale[0]), float(pr.depth[0]), pr.color[0])


def sh_color(sh, dirs):
    """View-dependent color as used by the renderer: max(0, SH(d) + 0.5)."""
    return np.maximum(eval_sh(sh, dirs) + 0.5, 0.0)


def _quat_backward(q, g_r):
    """dL/dq for an unnormalized quaternion given dL/dR."""
    nrm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / nrm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    g = g_r
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    gqn = np.stack([gw, gx, gy, gz], axis=1)
    return (gqn - qn * np.sum(qn * gqn, axis=1, keepdims=True)) / nrm


def project_backward(batch: SplatBatch, cam, pr: Projection, g_mean2d, g_conic, g_ascale, g_color, g_depth):
    """Chain screen-space gradients back to 3D splat attributes.

    ``g_conic`` holds dL/d(a, b, c) where the off-diagonal b enters the
    exponent as ``-b dx dy``.
    """
    n = len(batch)
    rot_w = cam.rotation
    fx, fy = cam.focal
    p = pr.cam_points
    z = np.where(p[:, 2] > NEAR, p[:, 2], 1.0)

    qa, qb, qc = pr.conic[:, 0], pr.conic[:, 1], pr.conic[:, 2]
    qm = np.empty((n, 2, 2))
    qm[:, 0, 0], qm[:, 0, 1], qm[:, 1, 0], qm[:, 1, 1] = qa, qb, qb, qc
    gq = np.empty((n, 2, 2))
    gq[:, 0, 0] = g_conic[:, 0]
    gq[:, 0, 1] = gq[:, 1, 0] = 0.5 * g_conic[:, 1]
    gq[:, 1, 1] = g_conic[:, 2]
    g_post = -qm @ gq @ qm
    g_post -= (0.5 * g_ascale * pr.alpha_scale)[:, None, None] * qm

    cp = pr.cov_pre
    det_pre = cp[:, 0, 0] * cp[:, 1, 1] - cp[:, 0, 1] ** 2
    ok = det_pre > 1e-300
    inv_pre = np.empty((n, 2, 2))
    safe = np.where(ok, det_pre, 1.0)
    inv_pre[:, 0, 0] = cp[:, 1, 1] / safe
    inv_pre[:, 1, 1] = cp[:, 0, 0] / safe
    inv_pre[:, 0, 1] = inv_pre[:, 1, 0] = -cp[:, 0, 1] / safe
    g_pre = g_post + np.where(ok, 0.5 * g_ascale * pr.alpha_scale, 0.0)[:, None, None] * inv_pre

    tmat = pr.jac @ rot_w
    g_cov3 = np.swapaxes(tmat, 1, 2) @ g_pre @ tmat
    g_t = 2.0 * g_pre @ tmat @ pr.cov3
    g_j = g_t @ rot_w.T

    g_p = np.zeros((n, 3))
    g_p[:, 0] += g_j[:, 0, 2] * (-fx / z**2)
    g_p[:, 1] += g_j[:, 1, 2] * (-fy / z**2)
    g_p[:, 2] += (
        g_j[:, 0, 0] * (-fx / z**2)
        + g_j[:, 0, 2] * (2 * fx * p[:, 0] / z**3)
        + g_j[:, 1, 1] * (-fy / z**2)
        + g_j[:, 1, 2] * (2 * fy * p[:, 1] / z**3)
    )
    g_p[:, 0] += g_mean2d[:, 0] * fx / z
    g_p[:, 1] += g_mean2d[:, 1] * fy / z
    g_p[:, 2] += -g_mean2d[:, 0] * fx * p[:, 0] / z**2 - g_mean2d[:, 1] * fy * p[:, 1] / z**2
    g_p[:, 2] += g_depth
    g_means = g_p @ rot_w

    gc = np.where(pr.color_clamped, 0.0, g_color)
    g_sh = pr.basis[:, :, None] * gc[:, None, :]
    g_dir = np.einsum("nkc,nc,nkj->nj", batch.sh, gc, sh_basis_grad(pr.dirs))
    d = pr.dirs
    g_means += (g_dir - d * np.sum(d * g_dir, axis=1, keepdims=True)) / pr.dir_norm[:, None]

    sym = 0.5 * (g_cov3 + np.swapaxes(g_cov3, 1, 2))
    mm = pr.rotmat * batch.scales[:, None, :]
    g_m = 2.0 * sym @ mm
    g_scales = np.sum(g_m * pr.rotmat, axis=1)
    g_rot = _quat_backward(batch.rotations, g_m * batch.scales[:, None, :])

    return g_means, g_scales, g_rot, g_sh

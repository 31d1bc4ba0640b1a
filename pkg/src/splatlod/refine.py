"""Optimization of interior nodes, plus depth alignment, exposure fitting and
the max-gradient densification statistic."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateSpread, NoInteriorNodes
from .lod import select_cut, transition_batch
from .metrics import ssim_grad
from .model import Hierarchy
from .render import apply_exposure, render, render_backward

L1_WEIGHT = 0.8
DSSIM_WEIGHT = 0.2


@dataclass(frozen=True)
class RefineConfig:
    tau_min: float = 3.0
    tau_max: float = 48.0
    steps: int = 200
    # plain gradient descent on a per-pixel mean loss, so the rates are large
    lr_mean: float = 0.1
    lr_scale: float = 30.0
    lr_rotation: float = 30.0
    lr_falloff: float = 300.0
    lr_sh: float = 300.0
    depth_weight_start: float = 1.0
    depth_weight_end: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.tau_min < self.tau_max:
            raise ValueError("need 0 < tau_min < tau_max")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")


def sample_tau(xi: float, cfg: RefineConfig) -> float:
    """Log-uniform target granularity tau_max^xi * tau_min^(1 - xi)."""
    return float(cfg.tau_max ** xi * cfg.tau_min ** (1.0 - xi))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def photometric_loss(img, target):
    """0.8 L1 + 0.2 D-SSIM with D-SSIM = (1 - SSIM) / 2; returns (loss, dL/dimg)."""
    diff = img - target
    l1 = float(np.abs(diff).mean())
    g_l1 = np.sign(diff) / diff.size
    s, g_s = ssim_grad(img, target)
    loss = L1_WEIGHT * l1 + DSSIM_WEIGHT * (1.0 - s) / 2.0
    return loss, L1_WEIGHT * g_l1 - DSSIM_WEIGHT * 0.5 * g_s


def depth_loss(rendered, target) -> float:
    """Mean absolute difference."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError("depth maps differ in shape")
    return float(np.abs(rendered - target).mean())


def depth_weight(step: int, total: int, start: float = 1.0, end: float = 0.01) -> float:
    """Exponential decay from ``start`` at step 0 to ``end`` at the final step."""
    if total <= 1:
        return start
    f = min(max(step / (total - 1), 0.0), 1.0)
    return float(start * (end / start) ** f)


@dataclass(frozen=True)
class DepthAlignment:
    scale_ratio: float
    offset: float

    def apply(self, d):
        return self.scale_ratio * np.asarray(d, dtype=np.float64) + self.offset


def _center_spread(v):
    t = float(np.median(v))
    return t, float(np.mean(np.abs(v - t)))


def fit_depth_alignment(mono_samples, sfm_values) -> DepthAlignment:
    mono_samples = np.asarray(mono_samples, dtype=np.float64).ravel()
    sfm_values = np.asarray(sfm_values, dtype=np.float64).ravel()
    if len(mono_samples) != len(sfm_values):
        raise ValueError("sample counts differ")
    if len(sfm_values) < 2:
        raise ValueError("need at least two SfM observations")
    t_d, s_d = _center_spread(mono_samples)
    t_s, s_s = _center_spread(sfm_values)
    if s_d == 0:
        raise DegenerateSpread("monocular depth has zero spread over the SfM pixels")
    ratio = s_s / s_d
    return DepthAlignment(ratio, t_s - t_d * ratio)


def align_depth(mono, pixels, sfm_values):
    """Bring an inverse-depth map to the SfM scale.

    ``pixels`` are integer (u, v) = (column, row) positions of the SfM
    observations with inverse depths ``sfm_values``.  Median and mean
    absolute deviation are taken over those pixels only; the affine map is
    applied to the whole image.  Returns (aligned map, DepthAlignment).
    """
    mono = np.asarray(mono, dtype=np.float64)
    px = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    al = fit_depth_alignment(mono[px[:, 1], px[:, 0]], sfm_values)
    return al.apply(mono), al


# ---------------------------------------------------------------------------
# exposure
# ---------------------------------------------------------------------------

def expon_lr(step, lr_init=1e-3, lr_final=1e-4, delay_mult=1e-3, delay_steps=5000, max_steps=30000):
    """Log-linear decay with a sinusoidal warm-up over ``delay_steps``."""
    if step < 0 or (lr_init == 0.0 and lr_final == 0.0):
        return 0.0
    if delay_steps > 0:
        delay = delay_mult + (1 - delay_mult) * np.sin(0.5 * np.pi * np.clip(step / delay_steps, 0, 1))
    else:
        delay = 1.0
    t = np.clip(step / max_steps, 0, 1)
    return float(delay * np.exp(np.log(lr_init) * (1 - t) + np.log(lr_final) * t))


def optimize_exposure(renders, targets, steps: int = 30000, lr_init=1e-3, lr_final=1e-4,
                      delay_mult=1e-3, delay_steps=5000, betas=(0.9, 0.999), eps=1e-15):
    """Fit one 3x4 affine exposure per image with Adam on the L1 loss.

    Returns an array of shape (n_images, 3, 4), initialized at [I | 0].
    """
    renders = [np.asarray(r, dtype=np.float64).reshape(-1, 3) for r in renders]
    targets = [np.asarray(t, dtype=np.float64).reshape(-1, 3) for t in targets]
    if len(renders) != len(targets):
        raise ValueError("need one target per render")
    out = np.empty((len(renders), 3, 4))
    b1, b2 = betas
    for i, (c, tgt) in enumerate(zip(renders, targets)):
        if c.shape != tgt.shape:
            raise ValueError("render and target differ in shape")
        ch = np.hstack([c, np.ones((len(c), 1))])
        e = np.hstack([np.eye(3), np.zeros((3, 1))])
        m = np.zeros_like(e)
        v = np.zeros_like(e)
        for k in range(steps):
            g = np.sign(ch @ e.T - tgt).T @ ch / tgt.size
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            mh = m / (1 - b1 ** (k + 1))
            vh = v / (1 - b2 ** (k + 1))
            lr = expon_lr(k, lr_init, lr_final, delay_mult, delay_steps, steps)
            e = e - lr * mh / (np.sqrt(vh) + eps)
        out[i] = e
    return out


# ---------------------------------------------------------------------------
# max-gradient statistic
# ---------------------------------------------------------------------------

def max_grad_stat(history) -> np.ndarray:
    """Per-splat maximum over observations (rows = observations)."""
    h = np.asarray(history, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if h.shape[0] == 0:
        raise ValueError("need at least one observation")
    return h.max(axis=0)


@dataclass
class MaxGradTracker:
    """Running maximum of screen-space gradient norms per splat."""

    size: int
    value: np.ndarray = field(init=False)
    seen: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.zeros(self.size)
        self.seen = np.zeros(self.size, dtype=bool)

    def update(self, idx, grad2d):
        idx = np.asarray(idx, dtype=np.int64)
        norm = np.linalg.norm(np.asarray(grad2d, dtype=np.float64).reshape(len(idx), -1), axis=1)
        np.maximum.at(self.value, idx, norm)
        self.seen[idx] = True

    def reset(self):
        self.value[:] = 0.0
        self.seen[:] = False


# ---------------------------------------------------------------------------
# interior refinement
# ---------------------------------------------------------------------------

@dataclass
class NodeParams:
    """Trainable parameterization of hierarchy attributes.

    Scales are stored as logs and falloff passes through an absolute-value
    activation.
    """

    means: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    falloff_raw: np.ndarray
    sh: np.ndarray

    @classmethod
    def from_hierarchy(cls, h: Hierarchy) -> "NodeParams":
        g = h.gaussians
        return cls(g.means.copy(), np.log(g.scales), g.rotations.copy(), g.falloff.copy(), g.sh.copy())

    def write(self, h: Hierarchy, nodes) -> None:
        g = h.gaussians
        g.means[nodes] = self.means[nodes]
        g.scales[nodes] = np.exp(self.log_scales[nodes])
        q = self.rotations[nodes]
        g.rotations[nodes] = q / np.linalg.norm(q, axis=1, keepdims=True)
        g.falloff[nodes] = np.abs(self.falloff_raw[nodes])
        g.sh[nodes] = self.sh[nodes]

    def zeros(self) -> "NodeParams":
        return NodeParams(*(np.zeros_like(a) for a in self.arrays()))

    def arrays(self):
        return self.means, self.log_scales, self.rotations, self.falloff_raw, self.sh


def cut_loss_and_grad(h: Hierarchy, params: NodeParams, nodes, child_weight, cam, target,
                      depth_target=None, depth_w: float = 0.0):
    """Loss of rendering ``nodes`` (blended toward their parents) against
    ``target`` and its gradient with respect to ``params`` of all nodes.

    The hierarchy's Gaussians must reflect ``params`` (see NodeParams.write).
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    b = np.asarray(child_weight, dtype=np.float64)
    par = h.parent[nodes]
    b = np.where(par >= 0, b, 1.0)
    p = np.where(par >= 0, par, nodes)
    batch = transition_batch(h, nodes, b)
    out = render(batch, cam, retain=True)
    img = apply_exposure(out, cam.exposure)
    loss, g_img = photometric_loss(img, target)
    g_depth = None
    if depth_target is not None and depth_w > 0:
        loss += depth_w * depth_loss(out.depth, depth_target)
        g_depth = depth_w * np.sign(out.depth - depth_target) / out.depth.size
    gr = render_backward(out, g_img, g_depth)

    g = h.gaussians
    grad = params.zeros()
    bb = b[:, None]
    np.add.at(grad.means, nodes, bb * gr.means)
    np.add.at(grad.means, p, (1 - bb) * gr.means)
    # d exp(ls) / d ls = scale
    np.add.at(grad.log_scales, nodes, bb * gr.scales * g.scales[nodes])
    np.add.at(grad.log_scales, p, (1 - bb) * gr.scales * g.scales[p])
    # the batch holds b*sign*q_n/|q_n| + (1-b)*q_p/|q_p|; chain through the normalization
    qn_raw, qp_raw = params.rotations[nodes], params.rotations[p]
    sign = np.where(np.einsum("ij,ij->i", g.rotations[nodes], g.rotations[p]) < 0, -1.0, 1.0)
    moving = b < 1.0
    sign = np.where(moving, sign, 1.0)
    np.add.at(grad.rotations, nodes, _normalize_backward(qn_raw, bb * sign[:, None] * gr.rotations))
    np.add.at(grad.rotations, p, _normalize_backward(qp_raw, (1 - bb) * gr.rotations))
    sgn_n = np.sign(params.falloff_raw[nodes])
    sgn_p = np.sign(params.falloff_raw[p])
    np.add.at(grad.falloff_raw, nodes, gr.falloff * sgn_n)
    np.add.at(grad.falloff_raw, p, np.where(moving, gr.parent_falloff, 0.0) * sgn_p)
    np.add.at(grad.sh, nodes, b[:, None, None] * gr.sh)
    np.add.at(grad.sh, p, (1 - b[:, None, None]) * gr.sh)
    return loss, grad, out


def _normalize_backward(q, g_unit):
    n = np.linalg.norm(q, axis=1, keepdims=True)
    u = q / n
    return (g_unit - u * np.einsum("ij,ij->i", u, g_unit)[:, None]) / n


def refine_hierarchy(h: Hierarchy, cams, images, cfg: RefineConfig = RefineConfig(), depths=None,
                     history: list | None = None) -> Hierarchy:
    """Optimize interior nodes by rendering random views at random target
    granularities.  Leaves and topology are left untouched.

    ``images`` are full-resolution targets (after exposure) for ``cams``;
    ``depths`` optionally holds per-view depth targets in the renderer's
    depth units.  Per-step losses are appended to ``history`` if given.
    """
    cams = list(cams)
    if len(cams) != len(images):
        raise ValueError("need one image per camera")
    out_h = h.copy()
    interior = np.flatnonzero(~h.is_leaf)
    if len(interior) == 0:
        warnings.warn("hierarchy has no interior nodes, nothing to refine", NoInteriorNodes, stacklevel=2)
        return out_h
    rng = np.random.default_rng(cfg.seed)
    params = NodeParams.from_hierarchy(out_h)
    lrs = (cfg.lr_mean, cfg.lr_scale, cfg.lr_rotation, cfg.lr_falloff, cfg.lr_sh)
    for step in range(cfg.steps):
        view = int(rng.integers(len(cams)))
        tau = sample_tau(float(rng.random()), cfg)
        cam = cams[view]
        cut = select_cut(out_h, cam, tau)
        dt = None if depths is None else depths[view]
        dw = depth_weight(step, cfg.steps, cfg.depth_weight_start, cfg.depth_weight_end)
        loss, grad, _ = cut_loss_and_grad(out_h, params, cut.nodes, 1.0 - cut.t, cam, images[view], dt, dw)
        if history is not None:
            history.append(loss)
        for arr, g, lr in zip(params.arrays(), grad.arrays(), lrs):
            arr[interior] -= lr * g[interior]
        params.write(out_h, interior)
    return out_h


"""Procedural test scenes and camera paths."""

from __future__ import annotations

import numpy as np

from .model import CameraModel, GaussianArrays, rotmat_to_quat
from .render.sh import C0


def _frame_from_normal(n):
    """Rotation matrices whose third column is ``n``."""
    n = n / np.linalg.norm(n, axis=1, keepdims=True)
    helper = np.where(np.abs(n[:, :1]) < 0.9, [[1.0, 0, 0]], [[0, 1.0, 0]])
    u = np.cross(helper, n)
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    v = np.cross(n, u)
    return np.stack([u, v, n], axis=2)


def _texture(p, rng):
    """Smooth color field with fine stripes so merges lose visible detail."""
    base = 0.5 + 0.35 * np.sin(p @ rng.normal(size=(3, 3)) * 1.5 + rng.uniform(0, 6, 3))
    fine = 0.15 * np.sign(np.sin(p[:, :1] * 9.0) * np.sin(p[:, 1:2] * 9.0 + 0.3))
    return np.clip(base + fine, 0.02, 0.98)


def surface_scene(n: int = 5000, seed: int = 0, radius: float = 3.0) -> GaussianArrays:
    """Flat splats on a ground disk plus a few spheres, colored procedurally."""
    rng = np.random.default_rng(seed)
    n_ground = n // 2
    n_rest = n - n_ground
    r = radius * np.sqrt(rng.random(n_ground))
    a = rng.uniform(0, 2 * np.pi, n_ground)
    ground = np.stack([r * np.cos(a), r * np.sin(a), np.zeros(n_ground)], axis=1)
    g_norm = np.tile([0.0, 0.0, 1.0], (n_ground, 1))

    centers = np.array([[-1.2, -0.8, 0.7], [1.1, 0.4, 0.9], [0.0, 1.4, 0.5], [0.3, -1.5, 0.6]])
    radii = centers[:, 2] * 0.9
    which = rng.integers(len(centers), size=n_rest)
    d = rng.normal(size=(n_rest, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    balls = centers[which] + radii[which, None] * d

    means = np.vstack([ground, balls])
    normals = np.vstack([g_norm, d])
    # spacing-based tangential size, thin along the normal
    area = np.concatenate([np.full(n_ground, np.pi * radius ** 2 / n_ground),
                           4 * np.pi * radii[which] ** 2 / np.bincount(which, minlength=len(centers))[which]])
    s = 0.5 * np.sqrt(area)
    scales = np.stack([s, s * rng.uniform(0.6, 1.0, n), 0.1 * s], axis=1)
    rot = rotmat_to_quat(_frame_from_normal(normals))
    color = _texture(means, rng)
    sh = np.zeros((n, 16, 3))
    sh[:, 0] = (color - 0.5) / C0
    falloff = rng.uniform(0.7, 0.95, n)
    return GaussianArrays(means, scales, rot, falloff, sh)


def orbit_cameras(count: int, radius: float = 9.0, height: float = 4.5, target=(0.0, 0.0, 0.3),
                  focal: float = 256.0, resolution=(256, 256), phase: float = 0.0) -> list:
    """Cameras on a horizontal circle looking at ``target`` (z up)."""
    out = []
    for k in range(count):
        a = phase + 2 * np.pi * k / count
        eye = np.array([radius * np.cos(a), radius * np.sin(a), height])
        out.append(CameraModel.look_at(eye, target, up=(0, 0, 1), focal=focal, resolution=resolution))
    return out

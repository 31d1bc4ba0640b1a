"""Merging child Gaussians into a parent node.

Weights follow the children's visible contribution (falloff times ellipsoid
surface); mean and covariance are moment matched, SH coefficients averaged
with the same weights, and the parent's falloff is the summed contribution
divided by its own surface.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import permutations, product

import numpy as np

from .errors import AllZeroWeights, DegenerateCovariance, NotSPD
from .model import Gaussian, GaussianArrays, covariance_from, quat_multiply, quat_normalize, rotmat_to_quat

THOMSEN_P = 1.6075
COV_FLOOR = 1e-12


def ellipsoid_surface(g) -> float:
    """Thomsen's approximation of the surface of an ellipsoid with semi-axes ``g.scale``."""
    scale = g.scale if isinstance(g, Gaussian) else g
    return float(surface_batch(np.asarray(scale, dtype=np.float64)[None])[0])


def surface_batch(scales) -> np.ndarray:
    a, b, c = (np.asarray(scales, dtype=np.float64)[:, i] for i in range(3))
    p = THOMSEN_P
    return 4.0 * np.pi * (((a * b) ** p + (a * c) ** p + (b * c) ** p) / 3.0) ** (1.0 / p)


@dataclass(frozen=True)
class MergeWeights:
    raw: np.ndarray
    normalized: np.ndarray
    surfaces: np.ndarray
    parent_surface: float = float("nan")


def merge_weights(children) -> MergeWeights:
    g = children if isinstance(children, GaussianArrays) else GaussianArrays.from_list(children)
    if len(g) == 0:
        raise ValueError("need at least one child")
    surf = surface_batch(g.scales)
    raw = g.falloff * surf
    total = raw.sum()
    if total > 0:
        norm = raw / total
    else:
        warnings.warn("all merge weights are zero, using uniform weights", AllZeroWeights, stacklevel=2)
        norm = np.full(len(raw), 1.0 / len(raw))
    return MergeWeights(raw, norm, surf)


def decompose_covariance(cov):
    """(scale, rotation) with scale sorted descending and a proper rotation."""
    cov = np.asarray(cov, dtype=np.float64)
    if cov.shape != (3, 3):
        raise NotSPD(f"expected a 3x3 matrix, got {cov.shape}")
    if np.abs(cov - cov.T).max() > 1e-8:
        raise NotSPD("matrix is not symmetric")
    scale, rot = decompose_batch(cov[None])
    return scale[0], rot[0]


def decompose_batch(covs):
    covs = 0.5 * (covs + np.swapaxes(covs, 1, 2))
    evals, evecs = np.linalg.eigh(covs)
    if np.any(evals[:, 0] <= 0) or not np.all(np.isfinite(evals)):
        raise NotSPD("matrix has a non-positive eigenvalue")
    evals = evals[:, ::-1]
    evecs = evecs[:, :, ::-1].copy()
    flip = np.linalg.det(evecs) < 0
    evecs[flip, :, 2] *= -1
    return np.sqrt(evals), rotmat_to_quat(evecs)


def merge_segments(g: GaussianArrays, starts: np.ndarray, counts: np.ndarray):
    """Merge contiguous child runs ``g[starts[j] : starts[j] + counts[j]]``.

    Returns (GaussianArrays of parents, raw weight sums).
    """
    starts = np.asarray(starts, dtype=np.int64)
    counts = np.asarray(counts, dtype=np.int64)
    idx = np.concatenate([np.arange(s, s + c) for s, c in zip(starts, counts)]) if len(starts) else np.zeros(0, int)
    seg = np.repeat(np.arange(len(starts)), counts)
    offsets = np.concatenate([[0], np.cumsum(counts)[:-1]])

    means = g.means[idx]
    covs = covariance_from(g.scales[idx], g.rotations[idx])
    raw = g.falloff[idx] * surface_batch(g.scales[idx])
    total = np.add.reduceat(raw, offsets) if len(idx) else np.zeros(0)
    zero = total <= 0
    if np.any(zero):
        warnings.warn(f"{zero.sum()} merge(s) with all-zero weights, using uniform weights",
                      AllZeroWeights, stacklevel=2)
    w = np.where(zero[seg], 1.0 / counts[seg], raw / np.where(zero, 1.0, total)[seg])

    mu = np.add.reduceat(w[:, None] * means, offsets)
    d = means - mu[seg]
    cov = np.add.reduceat(w[:, None, None] * (covs + d[:, :, None] * d[:, None, :]), offsets)
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    sh = np.add.reduceat(w[:, None, None] * g.sh[idx], offsets)

    evals = np.linalg.eigvalsh(cov)
    small = evals[:, 0] < COV_FLOOR
    if np.any(small):
        warnings.warn(f"{small.sum()} degenerate merged covariance(s), regularized",
                      DegenerateCovariance, stacklevel=2)
        cov[small] += COV_FLOOR * np.eye(3)
    scale, rot = decompose_batch(cov)
    falloff = np.where(zero, 0.0, total / surface_batch(scale))
    return GaussianArrays(mu, scale, rot, falloff, sh), total


def merge_gaussians(children, w: MergeWeights | None = None) -> Gaussian:
    """Moment-matched parent of ``children``.  ``w`` must come from
    :func:`merge_weights` over the same children (recomputed when omitted)."""
    g = children if isinstance(children, GaussianArrays) else GaussianArrays.from_list(children)
    if w is None:
        w = merge_weights(g)
    wn = w.normalized
    mu = wn @ g.means
    covs = covariance_from(g.scales, g.rotations)
    d = g.means - mu
    cov = np.einsum("i,ijk->jk", wn, covs + d[:, :, None] * d[:, None, :])
    cov = 0.5 * (cov + cov.T)
    if np.linalg.eigvalsh(cov)[0] < COV_FLOOR:
        warnings.warn("degenerate merged covariance, regularized", DegenerateCovariance, stacklevel=2)
        cov = cov + COV_FLOOR * np.eye(3)
    scale, rot = decompose_covariance(cov)
    sh = np.einsum("i,ijk->jk", wn, g.sh)
    total = w.raw.sum()
    falloff = total / ellipsoid_surface(scale) if total > 0 else 0.0
    return Gaussian(mu, scale, rot, falloff, sh)


def _cube_rotations():
    """Quaternions of the 24 signed axis permutations with det +1, identity first,
    together with the source axis of every permuted axis."""
    out = []
    for perm in permutations(range(3)):
        for signs in product((1, -1), repeat=3):
            p = np.zeros((3, 3))
            for j in range(3):
                p[perm[j], j] = signs[j]
            if np.linalg.det(p) > 0:
                out.append((p, np.array(perm)))
    mats = np.array([m for m, _ in out])
    perms = np.array([pm for _, pm in out])
    quats = rotmat_to_quat(mats)
    return quats, perms


AXIS_QUATS, AXIS_PERMS = _cube_rotations()


def match_orientation_batch(scales, rotations, parent_rotations):
    """Re-express each (scale, rotation) with the axis labelling whose
    quaternion is closest to the parent's; the covariance is unchanged."""
    q = quat_normalize(rotations)
    qp = quat_normalize(parent_rotations)
    cand = quat_multiply(q[:, None, :], AXIS_QUATS[None, :, :])  # (N, 24, 4)
    score = np.abs(np.einsum("nck,nk->nc", cand, qp))
    best = np.argmax(score, axis=1)  # first maximum -> identity wins ties
    new_q = cand[np.arange(len(q)), best]
    new_s = np.take_along_axis(scales, AXIS_PERMS[best], axis=1)
    keep = best == 0
    new_q[keep] = rotations[keep]
    return new_s, new_q


def match_orientation(child: Gaussian, parent_rotation) -> Gaussian:
    s, q = match_orientation_batch(child.scale[None], child.rotation[None], np.asarray(parent_rotation)[None])
    if np.array_equal(q[0], child.rotation):
        return child
    return child.replace(scale=s[0], rotation=q[0])

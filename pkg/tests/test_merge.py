import warnings
from itertools import permutations, product

import numpy as np
import pytest
from scipy import integrate

from splatlod.errors import AllZeroWeights, DegenerateCovariance, NotSPD
from splatlod.merge import (
    decompose_covariance, ellipsoid_surface, match_orientation, merge_gaussians, merge_segments, merge_weights,
)
from splatlod.model import Gaussian, GaussianArrays, covariance_from, quat_to_rotmat

from conftest import random_gaussian

ID = np.array([1.0, 0, 0, 0])
SH0 = np.zeros((16, 3))


def g_(mean=(0, 0, 0), scale=(1, 1, 1), rot=ID, falloff=1.0, sh=SH0):
    return Gaussian(np.asarray(mean, float), np.asarray(scale, float), np.asarray(rot, float), falloff, sh)


def numeric_surface(a, b, c):
    """Surface of an ellipsoid by integrating |r_u x r_v| over its parametrization."""
    def integrand(v, u):
        ru = np.array([-a * np.sin(u) * np.sin(v), b * np.cos(u) * np.sin(v), 0.0])
        rv = np.array([a * np.cos(u) * np.cos(v), b * np.sin(u) * np.cos(v), -c * np.sin(v)])
        return np.linalg.norm(np.cross(ru, rv))
    val, _ = integrate.dblquad(integrand, 0, 2 * np.pi, 0, np.pi, epsabs=1e-10, epsrel=1e-10)
    return val


def test_surface_of_spheres():
    assert ellipsoid_surface(g_()) == pytest.approx(4 * np.pi, rel=1e-12)
    assert ellipsoid_surface(g_(scale=(2, 2, 2))) == pytest.approx(16 * np.pi, rel=1e-12)


@pytest.mark.parametrize("abc, tol", [((1, 1, 0.5), 0.002), ((3, 1, 0.5), 0.012), ((2, 1.5, 1), 0.012)])
def test_surface_against_numeric_integral(abc, tol):
    assert ellipsoid_surface(g_(scale=abc)) == pytest.approx(numeric_surface(*abc), rel=tol)


def test_merge_weight_examples():
    w = merge_weights([g_(), g_()])
    assert np.allclose(w.normalized, [0.5, 0.5])
    w = merge_weights([g_(falloff=1.0), g_(falloff=0.0, scale=(3, 2, 1))])
    assert np.allclose(w.normalized, [1.0, 0.0])
    w = merge_weights([g_(falloff=0.5), g_(falloff=0.25, scale=(2, 2, 2))])
    assert np.allclose(w.raw, [0.5 * 4 * np.pi, 0.25 * 16 * np.pi])
    assert np.allclose(w.normalized, [1 / 3, 2 / 3])
    assert w.normalized.sum() == pytest.approx(1.0, abs=1e-9)


def test_all_zero_weights_fall_back_to_uniform():
    kids = [g_(falloff=0.0), g_(mean=(1, 0, 0), falloff=0.0)]
    with pytest.warns(AllZeroWeights):
        w = merge_weights(kids)
    assert np.allclose(w.normalized, [0.5, 0.5])
    p = merge_gaussians(kids, w)
    with pytest.warns(AllZeroWeights):
        merge_gaussians(kids)
    assert p.falloff == 0.0
    assert np.allclose(p.mean, [0.5, 0, 0])


def test_merge_two_unit_gaussians_by_hand():
    p = merge_gaussians([g_(), g_(mean=(2, 0, 0))])
    assert np.allclose(p.mean, [1, 0, 0])
    # independent evaluation: 0.5 * (I + d d^T) summed over d = (-1,0,0), (1,0,0)
    expected = np.diag([2.0, 1.0, 1.0])
    assert np.allclose(p.covariance, expected, atol=1e-12)


def test_merging_identical_children_is_idempotent(rng):
    c = random_gaussian(rng)
    for kids in ([c], [c, c], [c, c, c]):
        p = merge_gaussians(kids)
        assert np.allclose(p.mean, c.mean)
        assert np.allclose(p.covariance, c.covariance, atol=1e-12)
        assert np.allclose(p.sh, c.sh)
    assert merge_gaussians([c]).falloff == pytest.approx(c.falloff)


def test_contribution_is_conserved(rng):
    kids = [random_gaussian(rng, spread=5.0) for _ in range(5)]
    w = merge_weights(kids)
    p = merge_gaussians(kids, w)
    assert p.falloff * ellipsoid_surface(p) == pytest.approx(w.raw.sum(), rel=1e-12)


def test_weights_are_scale_invariant(rng):
    kids = [random_gaussian(rng) for _ in range(4)]
    a = merge_gaussians(kids)
    b = merge_gaussians([k.replace(falloff=k.falloff * 3.7) for k in kids])
    assert np.allclose(a.mean, b.mean)
    assert np.allclose(a.covariance, b.covariance)
    assert np.allclose(a.sh, b.sh)


def test_sh_uses_the_same_weights(rng):
    kids = [random_gaussian(rng) for _ in range(3)]
    w = merge_weights(kids)
    p = merge_gaussians(kids, w)
    assert np.allclose(p.sh, sum(wi * k.sh for wi, k in zip(w.normalized, kids)))


def test_moments_match_monte_carlo_mixture(rng):
    for _ in range(3):
        kids = [random_gaussian(rng, spread=0.5) for _ in range(int(rng.integers(2, 6)))]
        w = merge_weights(kids).normalized
        p = merge_gaussians(kids)
        n = 400_000
        comp = rng.choice(len(kids), size=n, p=w)
        x = np.empty((n, 3))
        for i, k in enumerate(kids):
            m = comp == i
            x[m] = rng.multivariate_normal(k.mean, k.covariance, size=m.sum())
        cov = np.cov(x.T)
        scale = np.sqrt(np.linalg.norm(p.covariance))
        assert np.linalg.norm(x.mean(axis=0) - p.mean) <= 0.01 * scale
        assert np.linalg.norm(cov - p.covariance) <= 0.01 * np.linalg.norm(p.covariance)


def test_merge_segments_matches_single_merges(rng):
    g = GaussianArrays.from_list([random_gaussian(rng) for _ in range(7)])
    parents, totals = merge_segments(g, np.array([0, 3]), np.array([3, 4]))
    for j, (s, c) in enumerate([(0, 3), (3, 4)]):
        ref = merge_gaussians(g.take(np.arange(s, s + c)))
        assert np.allclose(parents.means[j], ref.mean)
        assert np.allclose(covariance_from(parents.scales[j], parents.rotations[j]), ref.covariance)
        assert parents.falloff[j] == pytest.approx(ref.falloff)


def test_degenerate_covariance_is_regularized():
    flat = (1.0, 1.0, 1e-9)
    kids = [g_(scale=flat), g_(mean=(1, 0, 0), scale=flat), g_(mean=(0, 1, 0), scale=flat)]
    with pytest.warns(DegenerateCovariance):
        p = merge_gaussians(kids)
    assert np.all(p.scale > 0)


def test_decompose_examples(rng):
    s, q = decompose_covariance(np.diag([4.0, 1.0, 1.0]))
    assert np.allclose(s, [2, 1, 1])
    assert np.allclose(np.abs(quat_to_rotmat(q)[:, 0]), [1, 0, 0])
    r = quat_to_rotmat(rng.normal(size=4))
    s, q = decompose_covariance(r @ np.diag([9.0, 4.0, 1.0]) @ r.T)
    assert np.allclose(s, [3, 2, 1])
    assert np.linalg.det(quat_to_rotmat(q)) == pytest.approx(1.0)
    s, q = decompose_covariance(np.eye(3))
    assert np.allclose(covariance_from(s, q), np.eye(3))


def test_decompose_rejects_bad_matrices():
    with pytest.raises(NotSPD):
        decompose_covariance(np.array([[1.0, 0.1, 0], [0, 1, 0], [0, 0, 1]]))
    with pytest.raises(NotSPD):
        decompose_covariance(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(NotSPD):
        decompose_covariance(np.eye(2))


def _all_candidates(child):
    """Every signed axis relabelling with det +1, built from rotation matrices."""
    r = quat_to_rotmat(child.rotation)
    out = []
    for perm in permutations(range(3)):
        for signs in product((1, -1), repeat=3):
            p = np.zeros((3, 3))
            for j in range(3):
                p[perm[j], j] = signs[j]
            if np.linalg.det(p) > 0:
                out.append((r @ p, child.scale[list(perm)]))
    return out


def test_match_orientation_keeps_aligned_child(rng):
    c = random_gaussian(rng)
    assert match_orientation(c, c.rotation) is c


def test_match_orientation_recovers_swapped_axes():
    parent_q = np.array([np.cos(0.3), 0.0, np.sin(0.3), 0.0])
    rz = np.array([np.cos(np.pi / 4), 0, 0, np.sin(np.pi / 4)])  # 90 degrees about z
    from splatlod.model import quat_multiply
    child = g_(scale=(2.0, 1.0, 0.5), rot=quat_multiply(parent_q, rz))
    out = match_orientation(child, parent_q)
    assert np.allclose(np.abs(np.dot(out.rotation, parent_q)), 1.0)
    assert np.allclose(out.scale, [1.0, 2.0, 0.5])
    assert np.allclose(out.covariance, child.covariance)


def test_match_orientation_is_exhaustive_optimum(rng):
    from splatlod.model import rotmat_to_quat
    for _ in range(50):
        c = random_gaussian(rng)
        parent_q = rng.normal(size=4)
        parent_q /= np.linalg.norm(parent_q)
        out = match_orientation(c, parent_q)
        best = max(abs(np.dot(rotmat_to_quat(m), parent_q)) for m, _ in _all_candidates(c))
        assert abs(np.dot(out.rotation, parent_q)) >= best - 1e-12
        assert np.allclose(out.covariance, c.covariance, atol=1e-12)

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import random_rotation, wsff_pair_reference
from splatgeom.manifold import estimate_all
from splatgeom.pipeline import angle_deg
from splatgeom.surfaces import interior_mask
from splatgeom.types import EstimatorConfig, FrameSet, LocalFrame
from splatgeom.varifold import (
    EmptySupportError,
    WsffMatrix,
    curvatures_from_wsff,
    estimate_all_varifold,
    kernel_chi,
    kernel_upsilon,
    kernel_upsilon_prime,
    wsff_matrix,
    wsff_pair_term,
)


def _frame(R):
    return LocalFrame(R[:, 0], R[:, 1], R[:, 2])


def test_kernel_values_at_origin_and_support():
    assert kernel_chi(0.0, 0.7) == pytest.approx(np.exp(-1))
    assert kernel_upsilon_prime(0.0, 0.7) == 0.0
    for r in (0.7, 0.71, 5.0):
        assert kernel_chi(r, 0.7) == 0.0 and kernel_upsilon_prime(r, 0.7) == 0.0


def test_upsilon_prime_matches_finite_differences():
    eps, h = 0.8, 1e-6
    r = np.linspace(1e-3, eps - 1e-3, 400)
    fd = (kernel_upsilon(r + h, eps) - kernel_upsilon(r - h, eps)) / (2 * h)
    assert np.max(np.abs(fd - kernel_upsilon_prime(r, eps))) < 1e-6


def test_pair_term_coplanar_is_zero():
    f = LocalFrame.identity()
    B = wsff_pair_term([0, 0, 0], [0.3, -0.2, 0], f, f)
    assert np.allclose(B, 0, atol=1e-15)


def test_pair_term_coincident_positions():
    rng = np.random.default_rng(0)
    fi, fj = _frame(random_rotation(rng)), _frame(random_rotation(rng))
    mu = rng.normal(size=3)
    assert np.array_equal(wsff_pair_term(mu, mu, fi, fj), np.zeros((2, 2)))


@settings(max_examples=300, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_pair_term_matches_unsimplified_form(seed):
    rng = np.random.default_rng(seed)
    Ri, Rj = random_rotation(rng), random_rotation(rng)
    mi, mj = rng.normal(size=3), rng.normal(size=3)
    ref = wsff_pair_reference(mi, mj, Ri[:, 0], Ri[:, 1], Ri[:, 2], Rj[:, 2])
    assert np.allclose(wsff_pair_term(mi, mj, _frame(Ri), _frame(Rj)), ref, rtol=0, atol=1e-10)


def _small_patch(seed=0, m=12):
    rng = np.random.default_rng(seed)
    pts = np.r_[[[0, 0, 0]], rng.uniform(-0.3, 0.3, (m, 3))]
    R = [random_rotation(rng) for _ in range(m + 1)]
    frames = FrameSet([r[:, 0] for r in R], [r[:, 1] for r in R], [r[:, 2] for r in R])
    return pts, frames


def test_wsff_matrix_coplanar_is_zero():
    rng = np.random.default_rng(1)
    pts = np.c_[rng.uniform(-0.3, 0.3, (20, 2)), np.zeros(20)]
    I = np.eye(3)
    frames = FrameSet(np.tile(I[0], (20, 1)), np.tile(I[1], (20, 1)), np.tile(I[2], (20, 1)))
    B = wsff_matrix(0, np.arange(20), pts, frames, None, 1.0)
    assert np.allclose(B.b, 0, atol=1e-15)


def test_wsff_matrix_single_neighbor():
    pts, frames = _small_patch()
    eps = 1.0
    r = np.linalg.norm(pts[0] - pts[3])
    B = wsff_matrix(0, [3], pts, frames, None, eps).b
    pair = wsff_pair_term(pts[0], pts[3], frames[0], frames[3])
    ref = kernel_upsilon_prime(r, eps) / (3 * r * kernel_chi(r, eps)) * pair
    assert np.allclose(B, (ref + ref.T) / 2, atol=1e-13)


def test_wsff_matrix_empty_support():
    pts, frames = _small_patch()
    with pytest.raises(EmptySupportError):
        wsff_matrix(0, [1, 2], pts, frames, None, 1e-6)


def test_compact_support_is_bit_exact():
    pts, frames = _small_patch()
    far = np.r_[pts, [[5.0, 5.0, 5.0]]]
    ff = FrameSet(np.r_[frames.u1, [[1, 0, 0]]], np.r_[frames.u2, [[0, 1, 0]]], np.r_[frames.n, [[0, 0, 1]]])
    a = wsff_matrix(0, np.arange(1, 13), pts, frames, None, 0.6).b
    b = wsff_matrix(0, np.arange(1, 14), far, ff, None, 0.6).b
    assert np.array_equal(a, b)


def test_doubling_masses_leaves_matrix_unchanged():
    pts, frames = _small_patch()
    m = np.random.default_rng(3).uniform(0.5, 2, len(pts))
    a = wsff_matrix(0, np.arange(1, 13), pts, frames, m, 0.6).b
    b = wsff_matrix(0, np.arange(1, 13), pts, frames, 2 * m, 0.6).b
    assert np.array_equal(a, b)


def test_curvatures_from_zero_and_diagonal():
    f = LocalFrame.identity()
    z = curvatures_from_wsff(WsffMatrix(np.zeros((2, 2))), f)
    assert (z.tau1, z.tau2) == (0.0, 0.0)
    c = curvatures_from_wsff(WsffMatrix(np.diag([2.0, 0.1])), f)
    assert (c.tau1, c.tau2) == (2.0, 0.1)
    assert abs(np.dot(c.w1, f.u1)) == 1.0 and abs(np.dot(c.w2, f.u2)) == 1.0


def test_batch_matches_per_point(samples):
    cloud = samples("cylinder:0.5", n=1500)
    base = estimate_all(cloud)
    res = estimate_all_varifold(cloud, base.frames)
    eps = res.params["varifold_eps"]
    for i in (0, 100, 999):
        B = wsff_matrix(i, np.arange(len(cloud)), cloud.positions, base.frames, None, eps)
        c = curvatures_from_wsff(B, base.frames[i])
        assert [c.tau1, c.tau2] == pytest.approx(list(res.tau[i]), abs=1e-10)


def test_missing_frames_rejected(samples):
    with pytest.raises(ValueError):
        estimate_all_varifold(samples("plane", n=500), None)


def test_sphere_plane_cylinder_accuracy(samples):
    s = samples("sphere:1")
    rs = estimate_all_varifold(s, estimate_all(s).frames)
    assert np.median(np.abs(np.abs(rs.tau) - 1)) < 0.2
    p = samples("plane")
    rp = estimate_all_varifold(p, estimate_all(p).frames)
    assert np.median(np.abs(rp.tau[interior_mask(p)])) < 0.05
    c = samples("cylinder:0.5")
    rc = estimate_all_varifold(c, estimate_all(c).frames)
    m = interior_mask(c)
    assert np.median(np.abs(np.abs(rc.tau[m, 0]) - 2)) < 0.4
    assert np.median(90 - angle_deg(rc.w1[m], np.tile([0, 0, 1.0], (m.sum(), 1)))) < 10


def test_scaling_law(samples):
    cloud = samples("sphere:1", n=1000)
    frames = estimate_all(cloud).frames
    a = estimate_all_varifold(cloud, frames, EstimatorConfig(varifold_eps=0.3))
    b = estimate_all_varifold(cloud.positions * 2.5, frames, EstimatorConfig(varifold_eps=0.75))
    assert np.allclose(b.tau, a.tau / 2.5, rtol=1e-9, atol=1e-12)


def test_rigid_motion_invariance(samples):
    cloud = samples("cylinder:0.5", n=1500)
    frames = estimate_all(cloud).frames
    R = random_rotation(np.random.default_rng(8))
    moved = FrameSet(frames.u1 @ R.T, frames.u2 @ R.T, frames.n @ R.T)
    cfg = EstimatorConfig(varifold_eps=0.25)
    a = estimate_all_varifold(cloud, frames, cfg)
    b = estimate_all_varifold(cloud.positions @ R.T + [1, 2, 3], moved, cfg)
    assert np.allclose(a.tau, b.tau, atol=1e-6)
    assert np.allclose(np.abs(np.einsum("nd,nd->n", b.w1, a.w1 @ R.T)), 1, atol=1e-6)

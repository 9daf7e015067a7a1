import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import chisquare

from oracles import random_rotation
from splatgeom.pipeline import angle_deg
from splatgeom.spatial import SpatialIndex
from splatgeom.surfaces import (
    AnalyticSurface,
    OffSurfaceError,
    RankDeficientError,
    analytic_curvature,
    interior_mask,
    parse_surface,
    pca_baseline_frame,
    pca_frames,
    sample_elimination,
    sample_surface,
)


def test_parse_surface():
    s = parse_surface("torus:3,0.25")
    assert s.kind == "torus" and s.params == {"major": 3.0, "minor": 0.25}
    assert parse_surface("sphere").params == {"radius": 1.0}
    for bad in ("cube", "sphere:1,2", "sphere:-1"):
        with pytest.raises(ValueError):
            parse_surface(bad)


def test_pose_must_be_rotation():
    with pytest.raises(ValueError):
        AnalyticSurface("plane", rotation=np.diag([1, 1, -1.0]))


def test_analytic_examples():
    _, c = analytic_curvature(parse_surface("plane"), [0.2, 0.3, 0])
    assert (c.tau1, c.tau2) == (0, 0)
    f, c = analytic_curvature(parse_surface("sphere:2"), [0, 0, 2.0])
    assert abs(c.tau1) == pytest.approx(0.5) and abs(c.tau2) == pytest.approx(0.5)
    assert abs(f.n[2]) == pytest.approx(1.0)
    f, c = analytic_curvature(parse_surface("torus:2,0.5"), [2.5, 0, 0])
    assert abs(c.tau1) == pytest.approx(2.0) and abs(c.tau2) == pytest.approx(0.4)
    f, c = analytic_curvature(parse_surface("cylinder:0.5"), [0, 0.5, 0.1])
    assert abs(c.tau1) == pytest.approx(2.0) and c.tau2 == pytest.approx(0.0, abs=1e-12)
    assert c.w1[2] == pytest.approx(0.0, abs=1e-12)


def test_sign_convention_outward_sphere():
    f, c = analytic_curvature(parse_surface("sphere:1"), [1.0, 0, 0])
    assert f.n[0] == pytest.approx(1.0)
    assert c.tau1 == pytest.approx(-1.0) and c.tau2 == pytest.approx(-1.0)


def test_off_surface_point_rejected():
    with pytest.raises(OffSurfaceError):
        analytic_curvature(parse_surface("sphere:1"), [0, 0, 1.001])


def test_posed_surface_truth():
    R = random_rotation(np.random.default_rng(0))
    s = AnalyticSurface("cylinder", {"radius": 0.5}, rotation=R, translation=[1, 2, 3])
    p = s.to_world(np.array([[0.5, 0, 0.3]]))[0]
    f, c = analytic_curvature(s, p)
    assert abs(c.tau1) == pytest.approx(2.0)
    assert abs(np.dot(f.n, R[:, 0])) == pytest.approx(1.0)


def test_sampled_truth_sphere_and_cylinder(samples):
    s = samples("sphere:1")
    assert np.allclose(np.abs(s.truth["tau"]), 1.0)
    assert np.allclose(np.abs(np.einsum("nd,nd->n", s.truth["normal"], s.positions)), 1.0)
    c = samples("cylinder:0.5")
    assert np.allclose(np.abs(c.truth["tau"]), [2.0, 0.0])
    assert np.allclose(c.truth["w1"][:, 2], 0.0, atol=1e-12)


def test_helicoid_is_minimal_everywhere():
    cloud = sample_surface(parse_surface("helicoid"), 3000, seed=1)
    tau = cloud.truth["tau"]
    assert np.allclose(tau[:, 0], -tau[:, 1], atol=1e-12)
    assert np.all(np.abs(tau[:, 0]) > 0)


def test_samples_lie_on_surface():
    for spec in ("plane", "sphere:1.5", "cylinder:0.5", "torus:2,0.5", "helicoid"):
        surf = parse_surface(spec)
        cloud = sample_surface(surf, 300, seed=2, scheme="iid")
        for p in cloud.positions[::50]:
            analytic_curvature(surf, p)


def test_noise_added_after_truth(samples):
    clean, noisy = samples("sphere:1"), samples("sphere:1", sigma=0.01)
    assert np.array_equal(clean.truth["normal"], noisy.truth["normal"])
    r = np.linalg.norm(noisy.positions, axis=1)
    assert 0.005 < np.std(r) < 0.015


@pytest.mark.parametrize("scheme", ["iid", "blue"])
def test_sphere_octants_are_uniform(scheme):
    cloud = sample_surface(parse_surface("sphere:1"), 50_000, seed=3, scheme=scheme)
    octant = (cloud.positions > 0).astype(int) @ [1, 2, 4]
    counts = np.bincount(octant, minlength=8)
    assert chisquare(counts).pvalue > 0.01


def test_deterministic_per_seed():
    for scheme in ("iid", "blue"):
        a = sample_surface(parse_surface("torus"), 800, seed=11, noise_sigma=0.01, scheme=scheme)
        b = sample_surface(parse_surface("torus"), 800, seed=11, noise_sigma=0.01, scheme=scheme)
        assert np.array_equal(a.positions, b.positions)
        c = sample_surface(parse_surface("torus"), 800, seed=12, noise_sigma=0.01, scheme=scheme)
        assert not np.array_equal(a.positions, c.positions)


def test_sample_elimination_spreads_points():
    rng = np.random.default_rng(4)
    cand = rng.uniform(0, 1, (5000, 3)) * [1, 1, 0]
    keep = sample_elimination(cand, 1000, 1.0)
    assert len(keep) == 1000 and len(np.unique(keep)) == 1000
    nn = lambda P: SpatialIndex(P).knn_all(1)[0][:, 0].min()
    assert nn(cand[keep]) > 3 * nn(cand[rng.choice(5000, 1000, replace=False)])


def test_interior_mask_excludes_boundary():
    cloud = sample_surface(parse_surface("plane"), 4000, seed=5)
    m = interior_mask(cloud)
    assert 0.6 < m.mean() < 0.95
    assert np.all(np.max(np.abs(cloud.positions[m, :2]), axis=1) < 1.0)
    assert interior_mask(sample_surface(parse_surface("sphere"), 500)).all()


def test_pca_planar_normal():
    R = random_rotation(np.random.default_rng(6))
    P = np.c_[np.random.default_rng(7).uniform(-1, 1, (200, 2)), np.zeros(200)] @ R.T
    f = pca_baseline_frame(SpatialIndex(P), 0, 12)
    assert abs(np.dot(f.n, R[:, 2])) > 1 - 1e-12
    frames, flagged = pca_frames(P, 12)
    assert not flagged.any()
    assert np.all(np.abs(frames.n @ R[:, 2]) > 1 - 1e-12)


def test_pca_rank_deficient():
    line = np.c_[np.linspace(0, 1, 20), np.zeros((20, 2))]
    with pytest.raises(RankDeficientError):
        pca_baseline_frame(SpatialIndex(line), 3, 5)
    assert pca_frames(line, 5)[1].all()
    with pytest.raises(ValueError):
        pca_baseline_frame(SpatialIndex(line), 3, 2)


def test_pca_batch_matches_single(samples):
    cloud = samples("torus:2,0.5", n=2000)
    idx = SpatialIndex(cloud.positions)
    frames, _ = pca_frames(cloud.positions, 20, idx)
    for i in (0, 500, 1999):
        assert abs(np.dot(frames.n[i], pca_baseline_frame(idx, i, 20).n)) > 1 - 1e-10


def test_pca_sphere_clean_and_noisy(samples):
    def err(cloud):
        frames, _ = pca_frames(cloud.positions, 30)
        return np.median(angle_deg(frames.n, cloud.truth["normal"]))
    clean, noisy = err(samples("sphere:1")), err(samples("sphere:1", sigma=0.005))
    assert clean < 5.0
    assert noisy > clean


@settings(max_examples=50, deadline=None)
@given(theta=st.floats(0, 2 * np.pi), phi=st.floats(0, 2 * np.pi))
def test_torus_closed_form(theta, phi):
    R0, r0 = 2.0, 0.5
    p = [(R0 + r0 * np.cos(theta)) * np.cos(phi), (R0 + r0 * np.cos(theta)) * np.sin(phi), r0 * np.sin(theta)]
    f, c = analytic_curvature(parse_surface("torus:2,0.5"), p)
    k = sorted([abs(1 / r0), abs(np.cos(theta) / (R0 + r0 * np.cos(theta)))], reverse=True)
    assert [abs(c.tau1), abs(c.tau2)] == pytest.approx(k, abs=1e-9)
    assert np.linalg.norm(f.n) == pytest.approx(1.0)

import numpy as np
import pytest
from scipy.spatial.distance import pdist

from piv3d.descriptor import (
    LAYER_COUNTS,
    LAYER_RADII,
    ParticleIndex,
    build_layout,
    evaluate,
    evaluate_batch,
    ncc,
    ssd,
)
from piv3d.geometry import ParticleSet

LAYOUT = build_layout()
# Table-target nearest-neighbor spacing per layer
NEIGHBOR_SPACING = (None, 1.052, 1.205, 1.278, 2.019, 3.190)


def brute_force_descriptor(center, particles, layout):
    """Oracle: linear scan over particles + exhaustive stable 331-vertex k-NN."""
    out = np.zeros(layout.n_vertices)
    dc = np.sqrt(((particles.positions - center) ** 2).sum(axis=1))
    for j in np.flatnonzero(dc < layout.radius):
        o = particles.positions[j] - center
        diff = o - layout.vertices
        d2 = (diff * diff).sum(axis=1)
        order = np.argsort(d2, kind="stable")[: layout.splat_k]
        d5 = np.sqrt(d2[order])
        u = np.exp(-d5 / 2.0)
        u = u / u.sum()
        np.add.at(out, order, particles.intensities[j] * u * layout.center_weights[order])
    return out


def random_particles(rng, n=300, box=(100.0, 80.0, 60.0)):
    return ParticleSet(rng.uniform(0, 1, (n, 3)) * np.asarray(box),
                       rng.uniform(0.3, 1.0, n))


def test_layout_has_331_vertices():
    assert LAYOUT.n_vertices == 331
    assert tuple(np.bincount(LAYOUT.layer_of_vertex)) == LAYER_COUNTS


def test_layer_radii_match_table():
    for layer, radius in enumerate(LAYER_RADII):
        pts = LAYOUT.vertices[LAYOUT.layer_of_vertex == layer]
        assert np.allclose(np.linalg.norm(pts, axis=1), radius, atol=1e-9)


def test_layer_neighbor_spacing_within_5_percent():
    for layer in range(1, 6):
        pts = LAYOUT.vertices[LAYOUT.layer_of_vertex == layer]
        spacing = pdist(pts).min()
        assert spacing == pytest.approx(NEIGHBOR_SPACING[layer], rel=0.05)


def test_center_weights_normalized():
    assert LAYOUT.center_weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(LAYOUT.center_weights > 0)
    # w_g = exp(-|g|/10) up to the common normalization
    norms = np.linalg.norm(LAYOUT.vertices, axis=1)
    ratio = LAYOUT.center_weights / np.exp(-norms / 10.0)
    assert np.allclose(ratio, ratio[0], rtol=1e-12)


def test_all_vertices_within_outer_radius():
    assert np.linalg.norm(LAYOUT.vertices, axis=1).max() <= 8.693 + 1e-9


def test_particle_index_strict_radius_vs_linear_scan():
    rng = np.random.default_rng(0)
    ps = random_particles(rng, 400)
    index = ParticleIndex(ps)
    for _ in range(25):
        center = rng.uniform(10, 50, 3)
        r = rng.uniform(2, 15)
        got = index.query_radius(center[None, :], r)[0]
        d = np.sqrt(((ps.positions - center) ** 2).sum(axis=1))
        expected = np.flatnonzero(d < r)
        assert np.array_equal(got, expected)


def test_evaluate_equals_brute_force_exactly():
    rng = np.random.default_rng(1)
    ps = random_particles(rng, 500)
    index = ParticleIndex(ps)
    for _ in range(40):
        center = rng.uniform(5, 55, 3)
        fast = evaluate(center, index, LAYOUT)
        oracle = brute_force_descriptor(center, ps, LAYOUT)
        assert np.array_equal(fast, oracle)


def test_no_particles_in_range_gives_zero():
    ps = ParticleSet(np.array([[100.0, 100.0, 100.0]]), np.array([1.0]))
    out = evaluate(np.zeros(3), ParticleIndex(ps), LAYOUT)
    assert np.all(out == 0)


def test_particle_at_center_vertex():
    center = np.array([50.0, 50.0, 50.0])
    ps = ParticleSet(center[None, :], np.array([1.0]))
    out = evaluate(center, ParticleIndex(ps), LAYOUT)
    # center vertex gets the largest raw splat share among the 5 neighbors
    contributing = np.flatnonzero(out)
    shares = out[contributing] / LAYOUT.center_weights[contributing]
    center_vertex = int(np.argmin(np.linalg.norm(LAYOUT.vertices, axis=1)))
    assert center_vertex in contributing
    assert shares.max() == pytest.approx(
        out[center_vertex] / LAYOUT.center_weights[center_vertex])
    # splat weights sum to one before the w_g scaling
    assert shares.sum() == pytest.approx(1.0, abs=1e-12)


def test_outer_shell_particles_still_contribute():
    center = np.array([50.0, 50.0, 50.0])
    ps = ParticleSet((center + [9.6, 0, 0])[None, :], np.array([1.0]))  # 8.693 < 9.6 < 10.5
    out = evaluate(center, ParticleIndex(ps), LAYOUT)
    assert out.sum() > 0


def test_range_correctness():
    rng = np.random.default_rng(2)
    center = np.array([50.0, 50.0, 50.0])
    near = rng.uniform(-5, 5, (20, 3)) + center
    far = center + np.array([10.5001, 0.0, 0.0]) + rng.uniform(0, 5, (10, 3)) * [1, 0, 0]
    both = ParticleSet(np.vstack([near, far]), np.ones(30))
    only_near = ParticleSet(near, np.ones(20))
    a = evaluate(center, ParticleIndex(both), LAYOUT)
    b = evaluate(center, ParticleIndex(only_near), LAYOUT)
    assert np.array_equal(a, b)


def test_translation_equivariance_exact():
    rng = np.random.default_rng(3)
    ps = random_particles(rng, 200)
    delta = np.array([3.25, -1.5, 0.75])
    shifted = ps.translated(delta)
    center = np.array([40.0, 40.0, 30.0])
    a = evaluate(center, ParticleIndex(ps), LAYOUT)
    b = evaluate(center + delta, ParticleIndex(shifted), LAYOUT)
    assert np.array_equal(a, b)


def test_piecewise_differentiability():
    # finite difference of the descriptor matches the analytic splat-weight
    # derivative when no particle's vertex set changes
    rng = np.random.default_rng(4)
    center = np.array([50.0, 50.0, 50.0])
    pos = center + rng.uniform(-6, 6, (15, 3))
    c = rng.uniform(0.3, 1.0, 15)
    ps = ParticleSet(pos, c)
    index = ParticleIndex(ps)
    h = 1e-4

    def analytic_directional(center, axis):
        grad = np.zeros(LAYOUT.n_vertices)
        for j in range(len(ps)):
            o = pos[j] - center
            diff = o - LAYOUT.vertices
            d2 = (diff * diff).sum(axis=1)
            order = np.argsort(d2, kind="stable")[:5]
            d5 = np.sqrt(d2[order])
            u = np.exp(-d5 / 2.0)
            s = u.sum()
            # d d_i / d center_axis = -(o - h_i)_axis / d_i
            dd = -(o[None, :] - LAYOUT.vertices[order])[:, axis] / d5
            du = -0.5 * u * dd
            dw = (du * s - u * du.sum()) / (s * s)
            grad[order] += c[j] * dw * LAYOUT.center_weights[order]
        return grad

    for axis in range(3):
        e = np.zeros(3)
        e[axis] = h
        d_plus = evaluate(center + e, index, LAYOUT)
        d_minus = evaluate(center - e, index, LAYOUT)
        fd = (d_plus - d_minus) / (2 * h)
        ana = analytic_directional(center, axis)
        denom = max(np.abs(ana).max(), 1e-12)
        assert np.abs(fd - ana).max() / denom < 1e-3


def test_ssd_examples():
    rng = np.random.default_rng(5)
    a = rng.uniform(0, 1, 331)
    b = rng.uniform(0, 1, 331)
    assert ssd(a, a) == 0.0
    assert ssd(np.zeros(331), b) == pytest.approx((b**2).sum())
    assert ssd(a, b) == pytest.approx(ssd(b, a))


def test_ncc_examples():
    rng = np.random.default_rng(6)
    a = rng.uniform(0, 1, 331)
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, 2 * a + 3) == pytest.approx(1.0)
    # mean-removed orthogonal vectors
    u = np.zeros(331)
    u[0], u[1] = 1.0, -1.0
    v = np.zeros(331)
    v[2], v[3] = 1.0, -1.0
    assert ncc(u, v) == pytest.approx(0.0, abs=1e-12)
    assert ncc(np.full(331, 2.0), a) == 0.0


def test_ncc_bounds_random():
    rng = np.random.default_rng(7)
    for _ in range(200):
        a = rng.normal(size=331)
        b = rng.normal(size=331)
        val = ncc(a, b)
        assert -1.0 <= val <= 1.0


def test_float32_path_close_to_float64():
    rng = np.random.default_rng(8)
    ps = random_particles(rng, 300)
    index = ParticleIndex(ps)
    centers = rng.uniform(10, 50, (20, 3))
    a = evaluate_batch(centers, index, LAYOUT)
    b = evaluate_batch(centers, index, LAYOUT, dtype=np.float32)
    assert np.abs(a - b).max() < 1e-6


def test_evaluate_allocates_no_volume_sized_buffer():
    # structural memory claim: evaluation is O(particles in range + 331)
    from piv3d.memory import track_peak_allocations

    rng = np.random.default_rng(9)
    ps = random_particles(rng, 2000, box=(256.0, 128.0, 88.0))
    index = ParticleIndex(ps)
    center = np.array([100.0, 60.0, 40.0])
    evaluate(center, index, LAYOUT)  # warm up
    with track_peak_allocations() as report:
        evaluate(center, index, LAYOUT)
    volume_bytes = 256 * 128 * 88 * 4
    assert report.peak_bytes < min(2_000_000, volume_bytes)

import numpy as np
import pytest

from piv3d.errors import DimensionMismatchError
from piv3d.geometry import CameraModel, Domain, ParticleSet, make_rotated_camera
from piv3d.mart import (
    MartConfig,
    build_ray_weights,
    extract_peaks,
    gamma_stretch,
    mart_reconstruct,
)

IDENTITY_CAM = CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (10, 10))


def test_ray_weights_axis_aligned():
    dom = Domain((10, 10, 10))
    rw = build_ray_weights([IDENTITY_CAM], dom, cone_radius=1.0)
    vox, w = rw.cameras[0].entries_for_pixel(5, 5)
    # voxels (5,5,z) carry weight 1; (4,5,z) and (6,5,z) sit at distance 1 -> weight 0
    coords = np.array(np.unravel_index(vox, dom.extents)).T
    on_axis = coords[(coords[:, 0] == 5) & (coords[:, 1] == 5)]
    assert len(on_axis) == 10
    assert np.allclose(w[(coords[:, 0] == 5) & (coords[:, 1] == 5)], 1.0)
    assert not np.any((coords[:, 0] == 4) & (coords[:, 1] == 5) & (w > 0))


def test_ray_weights_miss_is_empty():
    dom = Domain((10, 10, 10))
    cam = CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (30, 30))
    rw = build_ray_weights([cam], dom, cone_radius=0.75)
    vox, w = rw.cameras[0].entries_for_pixel(25, 5)
    assert len(vox) == 0


def test_ray_weights_oblique_matches_brute_force():
    dom = Domain((8, 8, 8))
    cam = make_rotated_camera(30.0, 12.0, (16, 16), dom)
    radius = 0.9
    rw = build_ray_weights([cam], dom, radius)
    gx, gy, gz = np.meshgrid(*[np.arange(8)] * 3, indexing="ij")
    centers = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(float)
    d = cam.ray_direction()
    back = cam.pixel_backproject()
    for pixel in [(8, 8), (5, 10), (11, 6)]:
        p0 = back @ (np.asarray(pixel, dtype=float) - cam.offset)
        # brute force point-to-line distance for every voxel
        rel = centers - p0
        dist = np.linalg.norm(rel - (rel @ d)[:, None] * d, axis=1)
        expected = np.maximum(0.0, 1.0 - dist / radius)
        vox, w = rw.cameras[0].entries_for_pixel(*pixel)
        got = np.zeros(len(centers))
        got[vox] = w
        assert np.allclose(got, expected, atol=1e-9)


def _single_voxel_setup(intensity):
    dom = Domain((1, 1, 1))
    cam = CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (1, 1))
    rw = build_ray_weights([cam], dom, cone_radius=0.75)
    img = np.full((1, 1), float(intensity))
    return dom, rw, img


def test_mart_single_pixel_update_and_fixed_point():
    _, rw, img = _single_voxel_setup(2.0)
    vox, w = rw.cameras[0].entries_for_pixel(0, 0)
    assert np.allclose(w, [1.0])
    one = mart_reconstruct([img], rw, MartConfig(n_iterations=1))
    # U = 1 * (2/1)^1 = 2 after the first update
    assert one[0, 0, 0] == pytest.approx(2.0)
    five = mart_reconstruct([img], rw, MartConfig(n_iterations=5))
    assert five[0, 0, 0] == pytest.approx(2.0)


def test_mart_zero_images_zero_covered_voxels():
    dom = Domain((6, 6, 6))
    cam = CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (6, 6))
    rw = build_ray_weights([cam], dom, cone_radius=0.75)
    out = mart_reconstruct([np.zeros((6, 6))], rw, MartConfig(n_iterations=1))
    covered = np.zeros(dom.n_voxels, dtype=bool)
    covered[rw.cameras[0].voxel_idx[rw.cameras[0].weight > 0]] = True
    assert np.all(out.reshape(-1)[covered] == 0.0)


def test_mart_consistency_fixed_point():
    # if sum(w U) already equals I(j) for all pixels, U is unchanged;
    # a uniform volume also passes the smoothing untouched
    dom = Domain((6, 6, 6))
    cam = CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (6, 6))
    rw = build_ray_weights([cam], dom, cone_radius=0.75)
    cw = rw.cameras[0]
    entry_pix = np.repeat(np.arange(cw.n_pixels), np.diff(cw.pixel_ptr))
    img = np.bincount(entry_pix, weights=cw.weight, minlength=36).reshape(6, 6)
    out = mart_reconstruct([img], rw, MartConfig(n_iterations=3))
    assert np.allclose(out, 1.0, atol=1e-12)


def test_mart_matches_sequential_reference():
    # gather-then-apply equals a per-pixel loop over the same volume snapshot
    dom = Domain((5, 4, 3))
    cam = make_rotated_camera(20.0, 0.0, (12, 10), dom)
    rw = build_ray_weights([cam], dom, cone_radius=0.75)
    rng = np.random.default_rng(0)
    img = rng.uniform(0.0, 1.0, (10, 12))
    got = mart_reconstruct([img], rw, MartConfig(n_iterations=1, smoothing_sigma=0.8))

    u = np.ones(dom.n_voxels)
    snapshot = u.copy()
    factors = np.ones_like(u)
    cw = rw.cameras[0]
    for py in range(10):
        for px in range(12):
            vox, w = cw.entries_for_pixel(px, py)
            if len(vox) == 0:
                continue
            denom = (w * snapshot[vox]).sum()
            if denom <= 1e-12:
                continue
            factors[vox] *= (img[py, px] / denom) ** w
    u = u * factors
    from piv3d.mart import _smooth_3x3x1
    ref = _smooth_3x3x1(u.reshape(dom.extents), 0.8)
    assert np.allclose(got, ref, atol=1e-12)


def test_mart_nonnegativity_and_zero_preservation():
    dom = Domain((6, 6, 6))
    cam = CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (6, 6))
    rw = build_ray_weights([cam], dom, cone_radius=0.75)
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (6, 6))
    img[2, 3] = 0.0  # forces the voxels on that ray to zero
    out = mart_reconstruct([img], rw, MartConfig(n_iterations=3))
    assert np.all(out >= 0)


def test_mart_dimension_mismatch():
    dom = Domain((4, 4, 4))
    rw = build_ray_weights([CameraModel(np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]), (4, 4))],
                           dom, 0.75)
    with pytest.raises(DimensionMismatchError):
        mart_reconstruct([np.zeros((5, 5))], rw, MartConfig())
    with pytest.raises(DimensionMismatchError):
        mart_reconstruct([], rw, MartConfig())


def test_gamma_stretch_examples():
    vol = np.array([[[0.0, 1.0, 0.5]]])
    out = gamma_stretch(vol, 0.7)
    assert out[0, 0, 0] == 0.0
    assert out[0, 0, 1] == 1.0
    assert out[0, 0, 2] == pytest.approx(0.5**0.7)
    # monotonicity on random pairs
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 2, (2, 100))
    ga, gb = gamma_stretch(a, 0.7), gamma_stretch(b, 0.7)
    assert np.all((a <= b) == (ga <= gb))


def test_extract_peaks_single_voxel():
    vol = np.zeros((7, 7, 7))
    vol[3, 4, 2] = 1.0
    ps = extract_peaks(vol, 0.1)
    assert len(ps) == 1
    assert np.allclose(ps.positions[0], [3, 4, 2])
    assert ps.intensities[0] == pytest.approx(1.0)


def brute_force_nms(vol, min_intensity):
    """27-neighborhood scan with the same plateau tie-break (smallest index wins)."""
    dims = vol.shape
    peaks = []
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                v0 = vol[i, j, k]
                if v0 <= min_intensity:
                    continue
                wins = True
                for di in (-1, 0, 1):
                    for dj in (-1, 0, 1):
                        for dk in (-1, 0, 1):
                            if di == dj == dk == 0:
                                continue
                            ni, nj, nk = i + di, j + dj, k + dk
                            if not (0 <= ni < dims[0] and 0 <= nj < dims[1] and 0 <= nk < dims[2]):
                                continue
                            nv = vol[ni, nj, nk]
                            if nv > v0 or (nv == v0 and (ni, nj, nk) < (i, j, k)):
                                wins = False
                if wins:
                    peaks.append((i, j, k))
    return peaks


def test_extract_peaks_plateau_matches_brute_force():
    vol = np.zeros((6, 6, 6))
    vol[2, 2, 2] = 1.0
    vol[2, 2, 3] = 1.0  # two equal adjacent maxima
    got = extract_peaks(vol, 0.1)
    expected = brute_force_nms(vol, 0.1)
    assert len(got) == len(expected) == 1
    rng = np.random.default_rng(3)
    vol = np.round(rng.uniform(0, 1, (8, 8, 8)), 1)  # many ties
    got = extract_peaks(vol, 0.2)
    expected = brute_force_nms(vol, 0.2)
    assert len(got) == len(expected)


def test_extract_peaks_subvoxel_blob():
    # the log-parabolic three-point fit recovers a Gaussian blob center
    truth = np.array([10.3, 10.0, 10.0])
    gx, gy, gz = np.meshgrid(*[np.arange(21, dtype=float)] * 3, indexing="ij")
    r2 = (gx - truth[0]) ** 2 + (gy - truth[1]) ** 2 + (gz - truth[2]) ** 2
    vol = np.exp(-r2 / 1.0)
    ps = extract_peaks(vol, 0.1)
    assert len(ps) == 1
    assert np.linalg.norm(ps.positions[0] - truth) < 0.05
    assert ps.intensities[0] == pytest.approx(1.0, abs=1e-6)


def test_extract_peaks_translation_equivariant():
    rng = np.random.default_rng(4)
    base = np.zeros((16, 16, 16))
    center = np.array([6.4, 7.1, 8.3])
    gx, gy, gz = np.meshgrid(*[np.arange(16, dtype=float)] * 3, indexing="ij")
    base = np.exp(-((gx - center[0]) ** 2 + (gy - center[1]) ** 2 + (gz - center[2]) ** 2))
    shifted = np.roll(base, (2, 1, 3), axis=(0, 1, 2))
    p0 = extract_peaks(base, 0.1).positions[0]
    p1 = extract_peaks(shifted, 0.1).positions[0]
    assert np.allclose(p1 - p0, [2, 1, 3], atol=1e-9)

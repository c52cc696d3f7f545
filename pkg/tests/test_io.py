import numpy as np
import pytest

from piv3d import io as pio
from piv3d.geometry import CameraModel, Domain, ParticleSet, make_rotated_camera


def test_particles_csv_roundtrip_9_digits(tmp_path):
    rng = np.random.default_rng(0)
    ps = ParticleSet(rng.uniform(0, 100, (50, 3)), rng.uniform(0, 1, 50))
    path = tmp_path / "p.csv"
    pio.write_particles_csv(path, ps)
    back = pio.read_particles_csv(path)
    # %.9g keeps 9 significant digits
    assert np.allclose(back.positions, ps.positions, rtol=1e-8, atol=1e-8)
    assert np.allclose(back.intensities, ps.intensities, rtol=1e-8)
    # writing the parsed set again is byte-identical
    path2 = tmp_path / "p2.csv"
    pio.write_particles_csv(path2, back)
    assert path.read_bytes() == path2.read_bytes()


def test_particles_csv_empty(tmp_path):
    path = tmp_path / "e.csv"
    pio.write_particles_csv(path, ParticleSet.empty())
    assert len(pio.read_particles_csv(path)) == 0


def test_particles_csv_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ValueError):
        pio.read_particles_csv(path)


def test_cameras_roundtrip(tmp_path):
    dom = Domain((64, 48, 40))
    cams = [make_rotated_camera(35, 18, (100, 80), dom),
            make_rotated_camera(-35, -18, (100, 80), dom)]
    path = tmp_path / "cams.txt"
    pio.write_cameras(path, cams)
    back = pio.read_cameras(path)
    assert len(back) == 2
    for orig, rt in zip(cams, back):
        assert np.array_equal(orig.matrix, rt.matrix)
        assert orig.image_size == rt.image_size


def test_pfm_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 2, (13, 17))
    path = tmp_path / "img.pfm"
    pio.write_pfm(path, img)
    back = pio.read_pfm(path)
    assert back.shape == img.shape
    assert np.allclose(back, img, atol=1e-6)


def test_pgm16_roundtrip_with_sidecar(tmp_path):
    rng = np.random.default_rng(2)
    img = rng.uniform(0, 0.9, (9, 11))
    path = tmp_path / "img.pgm"
    scale = pio.write_pgm16(path, img)
    assert scale > 0
    back = pio.read_pgm16(path)
    assert np.allclose(back, img, atol=1.0 / scale)


def test_volume_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    vol = rng.uniform(0, 1, (6, 5, 4))
    path = tmp_path / "v.pfm3"
    pio.write_volume(path, vol)
    back = pio.read_volume(path)
    assert back.shape == vol.shape
    assert np.allclose(back, vol, atol=1e-6)


def test_flow_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    vec = rng.normal(size=(6, 5, 4, 3))
    path = tmp_path / "f.fld"
    pio.write_flow(path, vec, stride=4)
    back, stride = pio.read_flow(path)
    assert stride == 4
    assert back.shape == vec.shape
    assert np.allclose(back, vec, atol=1e-6)


def test_grid_csv(tmp_path):
    grid = np.array([[1.5, 2.0], [3.25, -4.0]])
    path = tmp_path / "g.csv"
    pio.write_grid_csv(path, grid)
    rows = [[float(t) for t in line.split(",")]
            for line in path.read_text().strip().splitlines()]
    assert np.allclose(rows, grid)

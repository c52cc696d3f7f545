"""File formats: particle CSV, camera calibration text, PFM/PGM images, voxel volumes, flow fields.

PFM (little-endian float32) is the canonical image interchange format.
Volumes use a "PF3" header followed by float32 data in x-fastest order;
flow fields use "FLW1" with grid dims, stride and float32 xyz triples.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import CameraModel, ParticleSet

__all__ = [
    "write_particles_csv", "read_particles_csv",
    "write_cameras", "read_cameras",
    "write_pfm", "read_pfm",
    "write_pgm16", "read_pgm16",
    "write_volume", "read_volume",
    "write_flow", "read_flow",
    "write_grid_csv",
]


def write_particles_csv(path: str | Path, particles: ParticleSet) -> None:
    """CSV with header x,y,z,intensity; %.9g keeps 9 significant digits round-trip exact."""
    lines = ["x,y,z,intensity"]
    for p, c in zip(particles.positions, particles.intensities):
        lines.append(f"{p[0]:.9g},{p[1]:.9g},{p[2]:.9g},{c:.9g}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_particles_csv(path: str | Path, time_index: int = 0) -> ParticleSet:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != "x,y,z,intensity":
        raise ValueError(f"{path}: expected header 'x,y,z,intensity'")
    rows = [[float(tok) for tok in line.split(",")] for line in text[1:] if line.strip()]
    if not rows:
        return ParticleSet.empty(time_index)
    arr = np.asarray(rows, dtype=float)
    return ParticleSet(arr[:, :3], arr[:, 3], time_index)


def write_cameras(path: str | Path, cameras: list[CameraModel]) -> None:
    """One block per camera: 8 matrix entries (row-major 2x4), then 'width height'."""
    blocks = []
    for cam in cameras:
        m = cam.matrix
        blocks.append(
            f"{m[0, 0]:.17g} {m[0, 1]:.17g} {m[0, 2]:.17g} {m[0, 3]:.17g}\n"
            f"{m[1, 0]:.17g} {m[1, 1]:.17g} {m[1, 2]:.17g} {m[1, 3]:.17g}\n"
            f"{cam.width} {cam.height}\n"
        )
    Path(path).write_text("\n".join(blocks))


def read_cameras(path: str | Path) -> list[CameraModel]:
    tokens = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0]
        tokens.extend(line.split())
    if len(tokens) % 10 != 0:
        raise ValueError(f"{path}: expected blocks of 10 numbers, got {len(tokens)} tokens")
    cameras = []
    for i in range(0, len(tokens), 10):
        vals = [float(t) for t in tokens[i:i + 10]]
        matrix = np.asarray(vals[:8]).reshape(2, 4)
        cameras.append(CameraModel(matrix, (int(vals[8]), int(vals[9]))))
    return cameras


def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Grayscale PFM, little-endian float32, rows stored bottom-up per the format."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 2:
        raise ValueError("PFM writer expects a 2D grayscale image")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")  # negative scale marks little-endian
        f.write(np.flipud(img).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM file")
        w, h = (int(t) for t in f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(w * h * 4), dtype="<f4" if scale < 0 else ">f4")
    img = data.reshape(h, w)
    return np.flipud(img).astype(float)


def write_pgm16(path: str | Path, image: np.ndarray, scale: float | None = None) -> float:
    """16-bit PGM plus a JSON sidecar recording the scale factor applied.

    ``stored = round(value * scale)``; by default the scale maps the image
    maximum to 65535.  Returns the scale used.
    """
    img = np.asarray(image, dtype=float)
    if scale is None:
        peak = float(img.max()) if img.size else 0.0
        scale = 65535.0 / peak if peak > 0 else 1.0
    h, w = img.shape
    stored = np.clip(np.rint(img * scale), 0, 65535).astype(">u2")
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(stored.tobytes())
    Path(str(path) + ".json").write_text(json.dumps({"scale": scale}))
    return scale


def read_pgm16(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise ValueError(f"{path}: not a binary PGM file")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        maxval = int(f.readline())
        dtype = ">u2" if maxval > 255 else "u1"
        data = np.frombuffer(f.read(), dtype=dtype)[: w * h]
    scale = json.loads(Path(str(path) + ".json").read_text())["scale"]
    return data.reshape(h, w).astype(float) / scale


def write_volume(path: str | Path, values: np.ndarray) -> None:
    """Voxel volume: magic PF3, dims N M L, float32 little-endian, x fastest."""
    vol = np.asarray(values, dtype=np.float32)
    n, m, l = vol.shape
    with open(path, "wb") as f:
        f.write(b"PF3\n")
        f.write(f"{n} {m} {l}\n".encode())
        # x-fastest: transpose so the last (fastest) C axis is x
        f.write(np.ascontiguousarray(vol.transpose(2, 1, 0)).astype("<f4").tobytes())


def read_volume(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"PF3":
            raise ValueError(f"{path}: not a PF3 volume file")
        n, m, l = (int(t) for t in f.readline().split())
        data = np.frombuffer(f.read(n * m * l * 4), dtype="<f4")
    return data.reshape(l, m, n).transpose(2, 1, 0).astype(float)


def write_flow(path: str | Path, vectors: np.ndarray, stride: int) -> None:
    """Flow field: magic FLW1, grid dims N M L, stride, float32 xyz triples, x fastest."""
    v = np.asarray(vectors, dtype=np.float32)
    n, m, l, _ = v.shape
    with open(path, "wb") as f:
        f.write(b"FLW1\n")
        f.write(f"{n} {m} {l}\n".encode())
        f.write(f"{int(stride)}\n".encode())
        f.write(np.ascontiguousarray(v.transpose(2, 1, 0, 3)).astype("<f4").tobytes())


def read_flow(path: str | Path) -> tuple[np.ndarray, int]:
    with open(path, "rb") as f:
        if f.readline().strip() != b"FLW1":
            raise ValueError(f"{path}: not a FLW1 flow file")
        n, m, l = (int(t) for t in f.readline().split())
        stride = int(f.readline())
        data = np.frombuffer(f.read(n * m * l * 12), dtype="<f4")
    vectors = data.reshape(l, m, n, 3).transpose(2, 1, 0, 3).astype(float)
    return vectors, stride


def write_grid_csv(path: str | Path, grid: np.ndarray) -> None:
    """2D array as plain CSV, one row per line."""
    lines = [",".join(f"{v:.9g}" for v in row) for row in np.atleast_2d(grid)]
    Path(path).write_text("\n".join(lines) + "\n")

"""Coordinate frames, affine cameras, rays and the shared particle/image/volume types.

Conventions used throughout the package:

* Volume coordinates are voxels.  Voxel ``(i, j, k)`` of an intensity grid is
  centered at the point ``(i, j, k)``; the reconstruction domain is the cuboid
  ``[0, N] x [0, M] x [0, L]``.
* Pixel ``(i, j)`` samples the continuous image plane at its center, i.e. at
  the point ``(i, j)``.  Images are stored as ``(height, width)`` arrays with
  ``image[y, x]``.
* 3D points are float arrays ``[x, y, z]``; stacks of points have shape
  ``(n, 3)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from .errors import NoIntersectionError

__all__ = [
    "Particle",
    "ParticleSet",
    "Domain",
    "CameraModel",
    "project",
    "ray_through_pixel",
    "render_particles",
    "gaussian_blob_patches",
    "bilinear_sample",
    "make_rotated_camera",
    "BLOB_TRUNCATION_SIGMAS",
]

# Blobs are cut off at this many sigmas from the projected center.
BLOB_TRUNCATION_SIGMAS = 3.0


class Particle(NamedTuple):
    position: np.ndarray
    intensity: float


@dataclass
class ParticleSet:
    """Sparse set of 3D particles: positions (Q, 3) and nonnegative intensities (Q,)."""

    positions: np.ndarray
    intensities: np.ndarray
    time_index: int = 0

    def __post_init__(self) -> None:
        self.positions = np.atleast_2d(np.asarray(self.positions, dtype=float))
        if self.positions.size == 0:
            self.positions = self.positions.reshape(0, 3)
        self.intensities = np.asarray(self.intensities, dtype=float).reshape(-1)
        if self.positions.shape != (len(self.intensities), 3):
            raise ValueError(
                f"positions {self.positions.shape} do not match "
                f"{len(self.intensities)} intensities"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("particle positions must be finite")
        if np.any(self.intensities < 0):
            raise ValueError("particle intensities must be >= 0")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def __iter__(self) -> Iterator[Particle]:
        for p, c in zip(self.positions, self.intensities):
            yield Particle(p, float(c))

    @classmethod
    def empty(cls, time_index: int = 0) -> "ParticleSet":
        return cls(np.zeros((0, 3)), np.zeros(0), time_index)

    def subset(self, mask: np.ndarray) -> "ParticleSet":
        return ParticleSet(self.positions[mask], self.intensities[mask], self.time_index)

    def translated(self, delta: np.ndarray) -> "ParticleSet":
        return ParticleSet(self.positions + np.asarray(delta, dtype=float),
                           self.intensities.copy(), self.time_index)


@dataclass(frozen=True)
class Domain:
    """Cuboid reconstruction volume [0, N] x [0, M] x [0, L], extents in voxels."""

    extents: tuple[int, int, int]

    def __post_init__(self) -> None:
        if len(self.extents) != 3 or any(int(e) < 1 for e in self.extents):
            raise ValueError(f"invalid domain extents {self.extents}")
        object.__setattr__(self, "extents", tuple(int(e) for e in self.extents))

    @property
    def size(self) -> np.ndarray:
        return np.asarray(self.extents, dtype=float)

    @property
    def center(self) -> np.ndarray:
        return self.size / 2.0

    @property
    def n_voxels(self) -> int:
        n, m, l = self.extents
        return n * m * l

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        pts = np.atleast_2d(points)
        lo = pts >= margin
        hi = pts <= self.size - margin
        return np.all(lo & hi, axis=1)


@dataclass(frozen=True)
class CameraModel:
    """Affine (near-orthographic) camera: 2x4 matrix mapping [x,y,z,1] to pixels."""

    matrix: np.ndarray
    image_size: tuple[int, int]  # (width, height) in pixels

    def __post_init__(self) -> None:
        m = np.asarray(self.matrix, dtype=float)
        if m.shape != (2, 4):
            raise ValueError(f"camera matrix must be 2x4, got {m.shape}")
        if np.linalg.matrix_rank(m[:, :3]) != 2:
            raise ValueError("linear part of the camera matrix must have rank 2")
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :3]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 3]

    @property
    def width(self) -> int:
        return self.image_size[0]

    @property
    def height(self) -> int:
        return self.image_size[1]

    def ray_direction(self) -> np.ndarray:
        """Unit direction shared by all viewing rays (null space of the linear part)."""
        d = np.cross(self.linear[0], self.linear[1])
        return d / np.linalg.norm(d)

    def pixel_backproject(self) -> np.ndarray:
        """Min-norm right inverse of the linear part, shape (3, 2)."""
        a = self.linear
        return a.T @ np.linalg.inv(a @ a.T)


def project(camera: CameraModel, points: np.ndarray) -> np.ndarray:
    """Affine projection of one point (3,) or a stack (n, 3) to pixel coordinates."""
    pts = np.asarray(points, dtype=float)
    out = pts @ camera.linear.T + camera.offset
    return out


def ray_through_pixel(
    camera: CameraModel, pixel: tuple[float, float], domain: Domain
) -> tuple[np.ndarray, np.ndarray]:
    """Entry and exit points of the pixel's viewing ray with the domain cuboid.

    The ray is the affine preimage of the pixel; entry precedes exit along the
    camera's ray direction.  Raises :class:`NoIntersectionError` if the line
    misses the cuboid.
    """
    d = camera.ray_direction()
    rhs = np.asarray(pixel, dtype=float) - camera.offset
    p0 = camera.pixel_backproject() @ rhs

    # Slab test against [0, extent] per axis.
    t_lo, t_hi = -np.inf, np.inf
    for ax in range(3):
        if abs(d[ax]) < 1e-300:
            if p0[ax] < 0.0 or p0[ax] > domain.extents[ax]:
                raise NoIntersectionError(f"ray misses domain (axis {ax})")
            continue
        t0 = (0.0 - p0[ax]) / d[ax]
        t1 = (domain.extents[ax] - p0[ax]) / d[ax]
        if t0 > t1:
            t0, t1 = t1, t0
        t_lo = max(t_lo, t0)
        t_hi = min(t_hi, t1)
    if t_lo > t_hi:
        raise NoIntersectionError(f"ray through pixel {pixel} misses domain")
    return p0 + t_lo * d, p0 + t_hi * d


def gaussian_blob_patches(
    centers2d: np.ndarray, sigma: float, width: int, height: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-blob pixel patches for truncated Gaussian blobs of unit intensity.

    Returns ``(px, py, g, dx, dy)``, each of shape (n, P, P) where
    ``P = 2*ceil(3*sigma) + 1``.  ``g`` holds the blob values
    ``exp(-d^2/sigma^2) / sigma^2`` and is zero outside the image or beyond
    the 3-sigma truncation radius; ``dx``/``dy`` are pixel offsets from the
    continuous blob center (used for position gradients).
    """
    mu = np.atleast_2d(centers2d)
    w = int(math.ceil(BLOB_TRUNCATION_SIGMAS * sigma))
    off = np.arange(-w, w + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    cx = np.rint(mu[:, 0]).astype(np.int64)
    cy = np.rint(mu[:, 1]).astype(np.int64)
    px = cx[:, None, None] + ox[None, :, :]
    py = cy[:, None, None] + oy[None, :, :]
    dx = px - mu[:, 0][:, None, None]
    dy = py - mu[:, 1][:, None, None]
    d2 = dx * dx + dy * dy
    r2 = (BLOB_TRUNCATION_SIGMAS * sigma) ** 2
    inside = (d2 <= r2) & (px >= 0) & (px < width) & (py >= 0) & (py < height)
    g = np.where(inside, np.exp(-d2 / (sigma * sigma)) / (sigma * sigma), 0.0)
    return px, py, g, dx, dy


def render_particles(particles: ParticleSet, camera: CameraModel, sigma: float) -> np.ndarray:
    """Render a particle set as a sum of truncated Gaussian blobs.

    Each particle contributes ``c * exp(-|x - mu|^2 / sigma^2) / sigma^2`` on
    pixels within ``3*sigma`` of its projected center ``mu``; blobs add up.
    Returns a ``(height, width)`` float array.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    w, h = camera.image_size
    img = np.zeros((h, w))
    if len(particles) == 0:
        return img
    mu = project(camera, particles.positions)
    px, py, g, _, _ = gaussian_blob_patches(mu, sigma, w, h)
    vals = particles.intensities[:, None, None] * g
    sel = g > 0.0
    # np.add.at accumulates in element order, keeping the render deterministic.
    np.add.at(img, (py[sel], px[sel]), vals[sel])
    return img


def bilinear_sample(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample of image[y, x] at continuous coordinates, clamped at borders."""
    h, w = image.shape
    xf = np.clip(np.asarray(x, dtype=float), 0.0, w - 1.0)
    yf = np.clip(np.asarray(y, dtype=float), 0.0, h - 1.0)
    x0 = np.clip(np.floor(xf).astype(np.int64), 0, w - 2) if w > 1 else np.zeros_like(xf, dtype=np.int64)
    y0 = np.clip(np.floor(yf).astype(np.int64), 0, h - 2) if h > 1 else np.zeros_like(yf, dtype=np.int64)
    fx = xf - x0
    fy = yf - y0
    if w == 1:
        fx = np.zeros_like(fx)
    if h == 1:
        fy = np.zeros_like(fy)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v00 = image[y0, x0]
    v01 = image[y0, x1]
    v10 = image[y1, x0]
    v11 = image[y1, x1]
    return (v00 * (1 - fx) * (1 - fy) + v01 * fx * (1 - fy)
            + v10 * (1 - fx) * fy + v11 * fx * fy)


def make_rotated_camera(
    yaw_deg: float,
    pitch_deg: float,
    image_size: tuple[int, int],
    domain: Domain,
) -> CameraModel:
    """Orthographic camera rotated about the volume center.

    ``yaw`` tilts the viewing direction about the vertical (y) axis,
    ``pitch`` about the x axis; the domain center projects to the image
    center.  Rows of the linear part are orthonormal, so pixel distances
    equal 3D distances orthogonal to the ray.
    """
    ya = math.radians(yaw_deg)
    pa = math.radians(pitch_deg)
    ry = np.array([
        [math.cos(ya), 0.0, math.sin(ya)],
        [0.0, 1.0, 0.0],
        [-math.sin(ya), 0.0, math.cos(ya)],
    ])
    rx = np.array([
        [1.0, 0.0, 0.0],
        [0.0, math.cos(pa), -math.sin(pa)],
        [0.0, math.sin(pa), math.cos(pa)],
    ])
    rot = rx @ ry
    linear = rot[:2, :]
    w, h = image_size
    img_center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
    offset = img_center - linear @ domain.center
    matrix = np.hstack([linear, offset[:, None]])
    return CameraModel(matrix, (w, h))

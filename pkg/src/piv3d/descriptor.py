"""Layered spherical descriptor of local particle constellations.

A descriptor is a 331-vector: vertex counts per spherical layer are
(1, 12, 42, 92, 92, 92) at radii (0, 1, 2.205, 3.484, 5.503, 8.693), the
non-center layers being geodesic icosahedron subdivisions.  Every particle
closer than the descriptor radius (10.5) splats its intensity onto its 5
nearest vertices with distance weights ``exp(-d/2)`` normalized per particle,
scaled by a per-vertex center weight ``exp(-|g|/10)`` (normalized to sum 1).

Per-particle vertex lookup uses a precomputed cell grid over the offset cube:
the set of points whose k-NN set equals a fixed set S is an intersection of
half-spaces, hence convex, so a cell whose 8 corners strictly agree on S is
correct for every interior point.  Ambiguous cells fall back to an exhaustive
stable selection so results are reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.spatial import cKDTree

from .geometry import ParticleSet

__all__ = [
    "LAYER_COUNTS", "LAYER_RADII",
    "DescriptorLayout", "ParticleIndex",
    "build_layout", "evaluate", "evaluate_batch",
    "pairs_in_radius", "evaluate_pairs",
    "ssd", "ncc", "ssd_batch", "ncc_batch",
]

LAYER_COUNTS = (1, 12, 42, 92, 92, 92)
LAYER_RADII = (0.0, 1.0, 2.205, 3.484, 5.503, 8.693)
_LAYER_FREQUENCIES = (0, 1, 2, 3, 3, 3)

_GRID_CELL = 0.5
_TIE_MARGIN = 1e-9


def _icosahedron_vertices() -> np.ndarray:
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=float)
    return v / np.linalg.norm(v[0])


_ICO_FACES = np.array([
    [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
    [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
    [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
    [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
], dtype=int)


def _slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    omega = np.arccos(np.clip(np.dot(a, b), -1.0, 1.0))
    return (np.sin((1.0 - t) * omega) * a + np.sin(t * omega) * b) / np.sin(omega)


def icosphere(frequency: int) -> np.ndarray:
    """Unit-sphere geodesic subdivision with 10*f^2 + 2 vertices (f in {1, 2, 3}).

    Edges are split at equal arcs, so neighboring points along an original
    edge are a chord of (edge arc)/f apart; for f = 3 each face additionally
    gets its normalized centroid.  Vertices are ordered lexicographically.
    """
    f = int(frequency)
    if f not in (1, 2, 3):
        raise ValueError("icosphere frequency must be 1, 2 or 3")
    base = _icosahedron_vertices()
    pts = [v for v in base]
    edges = sorted({tuple(sorted((face[i], face[(i + 1) % 3])))
                    for face in _ICO_FACES for i in range(3)})
    for i, j in edges:
        for step in range(1, f):
            pts.append(_slerp(base[i], base[j], step / f))
    if f == 3:
        for face in _ICO_FACES:
            c = base[face].sum(axis=0)
            pts.append(c / np.linalg.norm(c))
    pts = np.round(np.asarray(pts), 12)
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    pts = pts[order]
    assert len(pts) == 10 * f * f + 2, f"icosphere({f}) produced {len(pts)} vertices"
    return pts


@dataclass
class DescriptorLayout:
    """Fixed 331-vertex arrangement plus the precomputed splat lookup tables."""

    vertices: np.ndarray          # (331, 3) offsets from the descriptor center
    layer_of_vertex: np.ndarray   # (331,) int
    radius: float                 # particle inclusion radius
    splat_k: int                  # neighbors each particle splats over
    center_weights: np.ndarray    # (331,) w_g, sums to 1
    grid_sets: np.ndarray         # (n_cells, splat_k) int16, per-cell k-NN set
    grid_valid: np.ndarray        # (n_cells,) bool
    grid_half: float              # half-extent of the cell grid cube
    grid_cell: float
    grid_n: int                   # cells per axis
    vertex_tree: cKDTree
    cand_ptr: np.ndarray          # (n_cells + 1,) CSR offsets of per-cell candidate sets
    cand_idx: np.ndarray          # candidate vertex indices for ambiguous cells
    cand_width: int               # max candidates of any cell

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


def _stable_select_k(d: np.ndarray, idx: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise k smallest by (distance, index); matches a stable argsort over all vertices."""
    o1 = np.argsort(idx, axis=1)
    idx = np.take_along_axis(idx, o1, axis=1)
    d = np.take_along_axis(d, o1, axis=1)
    o2 = np.argsort(d, axis=1, kind="stable")
    idx = np.take_along_axis(idx, o2, axis=1)
    d = np.take_along_axis(d, o2, axis=1)
    return idx[:, :k], d


def _exhaustive_knn(points: np.ndarray, vertices: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stable k nearest vertices. Returns (idx, d_k, margin d_{k+1} - d_k)."""
    d = np.sqrt(((points[:, None, :] - vertices[None, :, :]) ** 2).sum(axis=2))
    part = np.argpartition(d, k, axis=1)[:, : k + 1]
    dpart = np.take_along_axis(d, part, axis=1)
    idx, dsorted = _stable_select_k(dpart, part, k)
    return idx, dsorted[:, k - 1], dsorted[:, k] - dsorted[:, k - 1]


@lru_cache(maxsize=4)
def build_layout(radius: float = 10.5, splat_k: int = 5) -> DescriptorLayout:
    """Construct the six-layer 331-vertex layout and its splat lookup tables."""
    verts = []
    layers = []
    for layer, (count, r, f) in enumerate(zip(LAYER_COUNTS, LAYER_RADII, _LAYER_FREQUENCIES)):
        if layer == 0:
            pts = np.zeros((1, 3))
        else:
            pts = icosphere(f) * r
        assert len(pts) == count
        verts.append(pts)
        layers.extend([layer] * count)
    vertices = np.vstack(verts)
    layer_of_vertex = np.asarray(layers, dtype=int)

    norms = np.linalg.norm(vertices, axis=1)
    w = np.exp(-norms / 10.0)
    center_weights = w / w.sum()

    half = radius
    n_cells = int(round(2 * half / _GRID_CELL))
    corner_coords = -half + _GRID_CELL * np.arange(n_cells + 1)
    cx, cy, cz = np.meshgrid(corner_coords, corner_coords, corner_coords, indexing="ij")
    corners = np.stack([cx, cy, cz], axis=-1).reshape(-1, 3)

    corner_sets = np.empty((len(corners), splat_k), dtype=np.int16)
    corner_dk = np.empty(len(corners))
    corner_strict = np.empty(len(corners), dtype=bool)
    chunk = 8192
    for lo in range(0, len(corners), chunk):
        idx, dk, margin = _exhaustive_knn(corners[lo:lo + chunk], vertices, splat_k)
        corner_sets[lo:lo + chunk] = np.sort(idx, axis=1)
        corner_dk[lo:lo + chunk] = dk
        corner_strict[lo:lo + chunk] = margin > _TIE_MARGIN

    shape = (n_cells + 1,) * 3
    sets3 = corner_sets.reshape(*shape, splat_k)
    strict3 = corner_strict.reshape(shape)
    dk3 = corner_dk.reshape(shape)
    agree = np.ones((n_cells,) * 3, dtype=bool)
    max_dk = np.full((n_cells,) * 3, -np.inf)
    ref = sets3[:-1, :-1, :-1]
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                blk = sets3[dx:dx + n_cells, dy:dy + n_cells, dz:dz + n_cells]
                agree &= np.all(blk == ref, axis=-1)
                agree &= strict3[dx:dx + n_cells, dy:dy + n_cells, dz:dz + n_cells]
                np.maximum(max_dk, dk3[dx:dx + n_cells, dy:dy + n_cells, dz:dz + n_cells],
                           out=max_dk)
    grid_valid = agree.reshape(-1)
    grid_sets = ref.reshape(-1, splat_k)

    # candidate supersets for ambiguous cells: every point p of a cell has its
    # k-th neighbor within max corner d_k + half diagonal, so all of its k
    # nearest vertices lie within that radius plus another half diagonal of
    # the cell center.
    tree = cKDTree(vertices)
    half_diag = 0.5 * _GRID_CELL * math.sqrt(3.0)
    ambiguous = np.flatnonzero(~grid_valid)
    cand_ptr = np.zeros(len(grid_valid) + 1, dtype=np.int64)
    cand_chunks = []
    if len(ambiguous):
        cell_xyz = np.stack(np.unravel_index(ambiguous, (n_cells,) * 3), axis=1)
        cell_centers = -half + _GRID_CELL * (cell_xyz + 0.5)
        radii = max_dk.reshape(-1)[ambiguous] + 2.0 * half_diag + 1e-9
        lists = tree.query_ball_point(cell_centers, radii)
        lengths = np.fromiter(map(len, lists), dtype=np.int64, count=len(lists))
        cand_ptr[ambiguous + 1] = lengths
        cand_chunks = [np.sort(np.asarray(l, dtype=np.int16)) for l in lists]
    np.cumsum(cand_ptr, out=cand_ptr)
    cand_idx = (np.concatenate(cand_chunks) if cand_chunks
                else np.empty(0, dtype=np.int16))
    cand_width = int(max((len(c) for c in cand_chunks), default=0))

    return DescriptorLayout(
        vertices=vertices,
        layer_of_vertex=layer_of_vertex,
        radius=float(radius),
        splat_k=int(splat_k),
        center_weights=center_weights,
        grid_sets=grid_sets,
        grid_valid=grid_valid,
        grid_half=half,
        grid_cell=_GRID_CELL,
        grid_n=n_cells,
        vertex_tree=tree,
        cand_ptr=cand_ptr,
        cand_idx=cand_idx,
        cand_width=cand_width,
    )


class ParticleIndex:
    """KD-tree over a particle set; radius queries are strict (|p - center| < r)."""

    def __init__(self, particles: ParticleSet):
        self.particles = particles
        self._tree = cKDTree(particles.positions) if len(particles) else None

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def positions(self) -> np.ndarray:
        return self.particles.positions

    @property
    def intensities(self) -> np.ndarray:
        return self.particles.intensities

    def query_radius(self, centers: np.ndarray, radius: float) -> list[np.ndarray]:
        """Sorted particle indices strictly within radius of each center."""
        centers = np.atleast_2d(centers)
        if self._tree is None:
            return [np.empty(0, dtype=np.int64) for _ in range(len(centers))]
        raw = self._tree.query_ball_point(centers, radius)
        out = []
        pos = self.particles.positions
        for c, lst in zip(centers, raw):
            idx = np.sort(np.asarray(lst, dtype=np.int64))
            if len(idx):
                d = np.sqrt(((pos[idx] - c) ** 2).sum(axis=1))
                idx = idx[d < radius]
            out.append(idx)
        return out


def _splat_vertex_sets(layout: DescriptorLayout, offsets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-offset k-NN vertex indices and distances, ordered by (distance, index).

    Valid grid cells answer from the stored unique set; ambiguous cells carry
    a precomputed candidate superset guaranteed to contain the true k-NN of
    every interior point.  Both paths reproduce the stable ordering of an
    exhaustive scan over all vertices.  Computes in the dtype of ``offsets``;
    the float64 path is bit-identical to the exhaustive scan.
    """
    k = layout.splat_k
    nv = layout.n_vertices
    n = len(offsets)
    vertices = layout.vertices.astype(offsets.dtype, copy=False)
    idx5 = np.empty((n, k), dtype=np.int64)
    d5 = np.empty((n, k), dtype=offsets.dtype)
    cell = np.floor((offsets + layout.grid_half) / layout.grid_cell).astype(np.int64)
    np.clip(cell, 0, layout.grid_n - 1, out=cell)
    flat = (cell[:, 0] * layout.grid_n + cell[:, 1]) * layout.grid_n + cell[:, 2]
    ok = layout.grid_valid[flat]
    if np.any(ok):
        sets = layout.grid_sets[flat[ok]].astype(np.int64)  # stored ascending by index
        diff = offsets[ok][:, None, :] - vertices[sets]
        d2 = (diff * diff).sum(axis=2)
        order = np.argsort(d2, axis=1, kind="stable")
        idx5[ok] = np.take_along_axis(sets, order, axis=1)
        d5[ok] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    fb = np.flatnonzero(~ok)
    if len(fb):
        cells = flat[fb]
        base = layout.cand_ptr[cells]
        length = layout.cand_ptr[cells + 1] - base
        cols = np.arange(layout.cand_width)
        gather = base[:, None] + np.minimum(cols[None, :], length[:, None] - 1)
        cand = layout.cand_idx[gather].astype(np.int64)
        pad = cols[None, :] >= length[:, None]
        diff = offsets[fb][:, None, :] - vertices[cand]
        d2 = (diff * diff).sum(axis=2)
        d2[pad] = np.inf
        cand[pad] = nv  # sentinel sorts last
        # Shortlist the k+3 smallest squared distances; the (distance, index)
        # top-k is contained in it unless more than k+3 candidates tie at the
        # k-th distance, in which case that row takes the full-width path.
        short = min(k + 3, cand.shape[1])
        part = np.argpartition(d2, short - 1, axis=1)[:, :short]
        d2_part = np.take_along_axis(d2, part, axis=1)
        cand_part = np.take_along_axis(cand, part, axis=1)
        boundary = np.partition(d2, k - 1, axis=1)[:, k - 1]
        exact = (d2 <= boundary[:, None]).sum(axis=1) <= short
        sel, d2sorted = _stable_select_k(d2_part, cand_part, k)
        d2sel = d2sorted[:, :k]
        if not np.all(exact):
            rows = np.flatnonzero(~exact)
            sel_f, d2_f = _stable_select_k(d2[rows], cand[rows], k)
            sel[rows] = sel_f
            d2sel[rows] = d2_f[:, :k]
        idx5[fb] = sel
        d5[fb] = np.sqrt(d2sel)
    return idx5, d5


def pairs_in_radius(
    centers: np.ndarray, index: ParticleIndex, radius: float
) -> tuple[np.ndarray, np.ndarray]:
    """(center, particle) pair indices within a closed ball, sorted by (center, particle).

    A superset of the strict-< pairs the descriptor uses; callers may pass a
    slightly enlarged radius and reuse the pairs for several nearby centers.
    """
    import itertools

    centers = np.atleast_2d(centers)
    if len(index) == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    lists = index._tree.query_ball_point(centers, radius, workers=-1)
    counts = np.fromiter(map(len, lists), dtype=np.int64, count=len(lists))
    total = int(counts.sum())
    pj = np.fromiter(itertools.chain.from_iterable(lists), dtype=np.int64, count=total)
    ci = np.repeat(np.arange(len(centers)), counts)
    order = np.lexsort((pj, ci))
    return ci[order], pj[order]


def evaluate_pairs(
    centers: np.ndarray,
    ci: np.ndarray,
    pj: np.ndarray,
    index: ParticleIndex,
    layout: DescriptorLayout,
    scale: float = 1.0,
    dtype: np.dtype = np.float64,
) -> np.ndarray:
    """Descriptors from precomputed candidate pairs; enforces the strict radius.

    ``dtype=float32`` trades the bit-exactness of the float64 path for speed;
    the flow solver uses it for cost probing.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=dtype))
    nv = layout.n_vertices
    out = np.zeros((len(centers), nv), dtype=dtype)
    if len(ci) == 0:
        return out
    diff = index.positions.astype(dtype, copy=False)[pj] - centers[ci]
    dist2 = (diff * diff).sum(axis=1)
    rr = dtype(layout.radius / scale) if dtype == np.float32 else layout.radius / scale
    keep = np.sqrt(dist2) < rr
    if not np.any(keep):
        return out
    ci = ci[keep]
    pj = pj[keep]
    offsets = diff[keep] * dtype(scale)

    idx5, d5 = _splat_vertex_sets(layout, offsets)
    u = np.exp(-d5 / 2.0)
    u /= u.sum(axis=1)[:, None]
    vals = (index.intensities.astype(dtype, copy=False)[pj][:, None]
            * u * layout.center_weights.astype(dtype, copy=False)[idx5])
    flat = np.repeat(ci, layout.splat_k) * nv + idx5.ravel()
    # bincount accumulates per bin in input order, matching the brute-force scan
    out += np.bincount(flat, weights=vals.ravel(),
                       minlength=len(centers) * nv).reshape(len(centers), nv).astype(dtype)
    return out


def evaluate_batch(
    centers: np.ndarray,
    index: ParticleIndex,
    layout: DescriptorLayout,
    scale: float = 1.0,
    dtype: np.dtype = np.float64,
) -> np.ndarray:
    """Descriptors at many centers, shape (n, 331).

    ``scale`` < 1 evaluates a coarse-to-fine level: offsets are multiplied by
    ``scale``, which is equivalent to enlarging all layout radii by 1/scale
    in full-resolution coordinates.
    """
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    if len(index) == 0:
        return np.zeros((len(centers), layout.n_vertices), dtype=dtype)
    ci, pj = pairs_in_radius(centers, index, layout.radius / scale)
    return evaluate_pairs(centers, ci, pj, index, layout, scale, dtype)


def evaluate(
    center: np.ndarray,
    index: ParticleIndex,
    layout: DescriptorLayout,
    scale: float = 1.0,
) -> np.ndarray:
    """Descriptor vector (331,) at a single center."""
    return evaluate_batch(np.asarray(center, dtype=float)[None, :], index, layout, scale)[0]


def ssd(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of squared differences between two descriptor vectors."""
    d = np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    return float(np.dot(d, d))


def ncc(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation of two descriptor vectors; 0 if either is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    a0 = a - a.mean()
    b0 = b - b.mean()
    denom = np.sqrt(np.dot(a0, a0) * np.dot(b0, b0))
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(a0, b0) / denom, -1.0, 1.0))


def ssd_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return (d * d).sum(axis=1)


def ncc_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    const_a = np.all(a == a[:, :1], axis=1)
    const_b = np.all(b == b[:, :1], axis=1)
    a0 = a - a.mean(axis=1)[:, None]
    b0 = b - b.mean(axis=1)[:, None]
    denom = np.sqrt((a0 * a0).sum(axis=1) * (b0 * b0).sum(axis=1))
    good = ~(const_a | const_b) & (denom > 0.0)
    out = np.zeros(len(a))
    out[good] = np.clip((a0[good] * b0[good]).sum(axis=1) / denom[good], -1.0, 1.0)
    return out

"""Variational volumetric flow on a strided grid.

Minimizes  lambda * E_data(v) + E_reg(v)  with a Chambolle-Pock style
primal-dual scheme.  The data term is a per-grid-point convex model rebuilt
at every warp: an affine model from central-difference probing of the sparse
descriptor cost, or a quadratic model from the windowed dense-volume SSD.
Regularizers couple grid points through forward-difference gradients and,
for the QRD variants, a backward-difference divergence whose dual acts as a
pressure field.

Coarse-to-fine: level scale s multiplies all coordinates, so the descriptor
radii effectively grow by 1/s at coarse levels while the grid keeps a fixed
spacing in scaled units; flow vectors live in scaled units and are multiplied
by the scale ratio at prolongation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .descriptor import (
    DescriptorLayout,
    ParticleIndex,
    evaluate_batch,
    evaluate_pairs,
    ncc,
    ncc_batch,
    pairs_in_radius,
    ssd,
    ssd_batch,
)
from .errors import NonFiniteError
from .geometry import Domain, ParticleSet

__all__ = [
    "FlowField", "DualState", "RegularizerSpec", "SolverConfig",
    "gradient", "gradient_adjoint", "divergence", "divergence_adjoint",
    "prox_dual_regularizer", "prox_primal_sparse", "linearize_sparse_data",
    "particles_to_volume", "dense_ssd_linearize",
    "LinearDataModel", "QuadDataModel", "LevelState",
    "primal_dual_solve", "warp_and_rebuild", "sample_grid",
    "upsample_flow", "solve_flow", "grid_dims",
]

LAMBDA_DEFAULTS = {"sparse_ssd": 2.0e4, "sparse_ncc": 10.0, "dense_ssd": 20.0}


@dataclass
class FlowField:
    """Displacement vectors on a strided voxel grid; grid point (i,j,k) sits at stride*(i,j,k)."""

    vectors: np.ndarray  # (nx, ny, nz, 3), voxels per frame
    stride: int = 4

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.vectors.shape[:3]

    @classmethod
    def zeros(cls, domain: Domain, stride: int = 4) -> "FlowField":
        return cls(np.zeros((*grid_dims(domain.extents, stride), 3)), stride)

    def grid_coords(self) -> np.ndarray:
        axes = [np.arange(n) * self.stride for n in self.dims]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(float)


def grid_dims(extents: tuple[int, int, int], stride: int) -> tuple[int, int, int]:
    return tuple(max(2, int(math.ceil(e / stride))) for e in extents)


@dataclass
class RegularizerSpec:
    kind: str  # "qr" | "qrd_inf" | "qrd_alpha"
    alpha: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in ("qr", "qrd_inf", "qrd_alpha"):
            raise ValueError(f"unknown regularizer {self.kind!r}")
        if self.kind == "qrd_alpha" and self.alpha <= 0:
            raise ValueError("alpha must be positive")

    @property
    def uses_divergence(self) -> bool:
        return self.kind != "qr"


@dataclass
class SolverConfig:
    lam: float | None = None  # resolved from LAMBDA_DEFAULTS when None
    pyramid_levels: int = 9
    pyramid_factor: float = 0.95
    warps_per_level: int = 10
    inner_iterations: int = 20
    data_term: str = "sparse_ssd"  # sparse_ssd | sparse_ncc | dense_ssd
    window: int = 13
    fd_probe_h: float = 0.5
    stride: int = 4
    chunk: int = 1024

    def __post_init__(self) -> None:
        if not (0 < self.pyramid_factor < 1):
            raise ValueError("pyramid_factor must be in (0, 1)")
        if min(self.pyramid_levels, self.warps_per_level, self.inner_iterations) < 1:
            raise ValueError("iteration counts must be >= 1")
        if self.data_term not in ("sparse_ssd", "sparse_ncc", "dense_ssd"):
            raise ValueError(f"unknown data term {self.data_term!r}")
        if self.window % 2 == 0:
            raise ValueError("window must be odd")

    @property
    def lam_resolved(self) -> float:
        return LAMBDA_DEFAULTS[self.data_term] if self.lam is None else self.lam


# ---------------------------------------------------------------------------
# finite-difference operators and their exact adjoints

def _fwd_diff(u: np.ndarray, axis: int) -> np.ndarray:
    out = np.zeros_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim
    src[axis] = slice(1, None)
    dst[axis] = slice(0, -1)
    out[tuple(dst)] = u[tuple(src)] - u[tuple(dst)]
    return out


def _fwd_diff_adjoint(y: np.ndarray, axis: int) -> np.ndarray:
    # <Dv, y> = <v, D^T y> with D^T y[i] = y[i-1] (i>=1) - y[i] (i<=n-2)
    out = np.zeros_like(y)
    n = y.shape[axis]
    take = lambda a, b: tuple(slice(a, b) if ax == axis else slice(None) for ax in range(y.ndim))
    out[take(1, None)] += y[take(0, n - 1)]
    out[take(0, n - 1)] -= y[take(0, n - 1)]
    return out


def gradient(v: np.ndarray) -> np.ndarray:
    """Forward-difference gradient with Neumann boundary; (nx,ny,nz,3) -> (nx,ny,nz,3,3)."""
    out = np.zeros(v.shape + (3,))
    for c in range(3):
        for a in range(3):
            out[..., c, a] = _fwd_diff(v[..., c], a)
    return out


def gradient_adjoint(y: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`gradient`; (nx,ny,nz,3,3) -> (nx,ny,nz,3)."""
    out = np.zeros(y.shape[:4])
    for c in range(3):
        for a in range(3):
            out[..., c] += _fwd_diff_adjoint(y[..., c, a], a)
    return out


def divergence(v: np.ndarray) -> np.ndarray:
    """Backward-difference divergence at points whose backward neighbors all exist.

    Output is zero on the lower boundary faces, so a through-flow at the grid
    border carries no artificial divergence and the incompressibility
    constraint only acts where the stencil is complete.
    """
    out = np.zeros(v.shape[:3])
    out[1:, 1:, 1:] = (
        v[1:, 1:, 1:, 0] - v[:-1, 1:, 1:, 0]
        + v[1:, 1:, 1:, 1] - v[1:, :-1, 1:, 1]
        + v[1:, 1:, 1:, 2] - v[1:, 1:, :-1, 2]
    )
    return out


def divergence_adjoint(q: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`divergence`; scalar grid -> (nx,ny,nz,3)."""
    out = np.zeros(q.shape + (3,))
    core = q[1:, 1:, 1:]
    out[1:, 1:, 1:, 0] += core
    out[:-1, 1:, 1:, 0] -= core
    out[1:, 1:, 1:, 1] += core
    out[1:, :-1, 1:, 1] -= core
    out[1:, 1:, 1:, 2] += core
    out[1:, 1:, :-1, 2] -= core
    return out


@dataclass
class DualState:
    y_grad: np.ndarray           # (nx,ny,nz,3,3)
    y_div: np.ndarray | None     # (nx,ny,nz) for QRD variants, else None

    @classmethod
    def zeros(cls, dims: tuple[int, int, int], spec: RegularizerSpec) -> "DualState":
        y_grad = np.zeros((*dims, 3, 3))
        y_div = np.zeros(dims) if spec.uses_divergence else None
        return cls(y_grad, y_div)


def prox_dual_regularizer(dual: DualState, sigma: float, spec: RegularizerSpec) -> DualState:
    """Per-point prox of the conjugate regularizer: y <- y * a / (a + sigma).

    Gradient duals always use a = 1; the divergence dual uses a = alpha for
    the soft penalty and stays untouched for the hard constraint.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y_grad = dual.y_grad / (1.0 + sigma)
    y_div = dual.y_div
    if spec.kind == "qrd_alpha" and y_div is not None:
        y_div = y_div * (spec.alpha / (spec.alpha + sigma))
    elif spec.kind == "qr":
        y_div = None
    return DualState(y_grad, y_div)


# ---------------------------------------------------------------------------
# data models

@dataclass
class LinearDataModel:
    """Affine per-point data cost lam * (const + <slope, v - v0>)."""

    lam: float
    slope: np.ndarray  # (nx,ny,nz,3)
    const: np.ndarray  # (nx,ny,nz)
    v0: np.ndarray     # (nx,ny,nz,3)

    def prox(self, v_hat: np.ndarray, tau: float) -> np.ndarray:
        return v_hat - tau * self.lam * self.slope

    def energy(self, v: np.ndarray) -> float:
        return float(self.lam * (self.const + (self.slope * (v - self.v0)).sum(axis=-1)).sum())


@dataclass
class QuadDataModel:
    """Quadratic per-point data cost lam * (v^T A v - 2 b^T v + c)."""

    lam: float
    a2: np.ndarray  # (nx,ny,nz,3,3)
    a1: np.ndarray  # (nx,ny,nz,3)
    a0: np.ndarray  # (nx,ny,nz)

    def prox(self, v_hat: np.ndarray, tau: float) -> np.ndarray:
        dims = v_hat.shape[:3]
        lhs = (np.eye(3) / tau) + 2.0 * self.lam * self.a2.reshape(-1, 3, 3)
        rhs = v_hat.reshape(-1, 3) / tau + 2.0 * self.lam * self.a1.reshape(-1, 3)
        return np.linalg.solve(lhs, rhs[..., None])[..., 0].reshape(*dims, 3)

    def energy(self, v: np.ndarray) -> float:
        quad = np.einsum("...i,...ij,...j->...", v, self.a2, v)
        lin = (self.a1 * v).sum(axis=-1)
        return float(self.lam * (quad - 2.0 * lin + self.a0).sum())


def prox_primal_sparse(
    v_hat: np.ndarray, tau: float, lam: float, slope: np.ndarray
) -> np.ndarray:
    """Closed-form prox of the linearized data model: v_hat - tau * lam * slope."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    return np.asarray(v_hat, dtype=float) - tau * lam * np.asarray(slope, dtype=float)


# ---------------------------------------------------------------------------
# sparse-descriptor linearization

def _metric_batch(metric: str):
    if metric in ("ssd", "sparse_ssd"):
        return ssd_batch
    if metric in ("ncc", "sparse_ncc"):
        return lambda a, b: -ncc_batch(a, b)
    raise ValueError(f"unknown metric {metric!r}")


def linearize_sparse_data(
    center: np.ndarray,
    v0: np.ndarray,
    descriptor_t0: np.ndarray,
    index_t1: ParticleIndex,
    layout: DescriptorLayout,
    metric: str = "ssd",
    h: float = 0.5,
    scale: float = 1.0,
) -> tuple[float, np.ndarray]:
    """Affine model of S(D_t0(center), D_t1(center + v)) around v0 at one grid point.

    Returns (constant, slope); the slope per axis is the central difference of
    the cost over the probes at v0 +- h e_axis, i.e. the least-squares linear
    fit through the six probe values.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    if metric in ("ssd", "sparse_ssd"):
        cost = ssd
    elif metric in ("ncc", "sparse_ncc"):
        cost = lambda a, b: -ncc(a, b)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    center = np.asarray(center, dtype=float)
    v0 = np.asarray(v0, dtype=float)
    d0 = np.asarray(descriptor_t0, dtype=float)
    probes = [center + v0]
    for a in range(3):
        e = np.zeros(3)
        e[a] = h
        probes.extend([center + v0 + e, center + v0 - e])
    d1 = evaluate_batch(np.asarray(probes), index_t1, layout, scale)
    s = [cost(d0, row) for row in d1]
    slope = np.array([(s[1 + 2 * a] - s[2 + 2 * a]) / (2.0 * h) for a in range(3)])
    return float(s[0]), slope


def _linearize_sparse_level(
    grid_scaled: np.ndarray,        # (n, 3) grid coordinates in scaled units
    v: np.ndarray,                  # (n, 3) flow in scaled units
    index0: ParticleIndex,
    index1: ParticleIndex,
    layout: DescriptorLayout,
    metric: str,
    h: float,
    scale: float,
    lam: float,
    chunk: int,
    dims: tuple[int, int, int],
) -> LinearDataModel:
    cost = _metric_batch(metric)
    n = len(grid_scaled)
    const = np.zeros(n)
    slope = np.zeros((n, 3))
    inv_s = 1.0 / scale
    f32 = np.float32
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        gc = grid_scaled[lo:hi]
        vc = v[lo:hi]
        d0 = evaluate_batch(gc * inv_s, index0, layout, scale, dtype=f32)
        center = (gc + vc) * inv_s
        # one ball query with probe margin serves the center and all six probes
        ci, pj = pairs_in_radius(center, index1, (layout.radius + h) * inv_s)
        const[lo:hi] = cost(d0, evaluate_pairs(center, ci, pj, index1, layout,
                                               scale, dtype=f32))
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            s_plus = cost(d0, evaluate_pairs((gc + vc + e) * inv_s, ci, pj,
                                             index1, layout, scale, dtype=f32))
            s_minus = cost(d0, evaluate_pairs((gc + vc - e) * inv_s, ci, pj,
                                              index1, layout, scale, dtype=f32))
            slope[lo:hi, a] = (s_plus - s_minus) / (2.0 * h)
    return LinearDataModel(lam, slope.reshape(*dims, 3), const.reshape(dims),
                           v.reshape(*dims, 3).copy())


# ---------------------------------------------------------------------------
# dense-volume SSD baseline

def particles_to_volume(particles: ParticleSet, domain: Domain) -> np.ndarray:
    """Trilinear splat of particle intensities onto their 2x2x2 nearest voxels."""
    vol = np.zeros(domain.extents)
    if len(particles) == 0:
        return vol
    pos = particles.positions
    base = np.floor(pos).astype(np.int64)
    frac = pos - base
    dims = np.asarray(domain.extents)
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                idx = base + np.array([dx, dy, dz])
                w = (np.where(dx, frac[:, 0], 1 - frac[:, 0])
                     * np.where(dy, frac[:, 1], 1 - frac[:, 1])
                     * np.where(dz, frac[:, 2], 1 - frac[:, 2]))
                ok = np.all((idx >= 0) & (idx < dims), axis=1) & (w > 0)
                if np.any(ok):
                    np.add.at(vol, (idx[ok, 0], idx[ok, 1], idx[ok, 2]),
                              w[ok] * particles.intensities[ok])
    return vol


def _central_gradient(u: np.ndarray) -> list[np.ndarray]:
    return list(np.gradient(u, edge_order=1))


def dense_ssd_linearize(
    u0: np.ndarray,
    u1: np.ndarray,
    v0_voxels: np.ndarray,
    window: int,
    grid_idx: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadratic model of the windowed dense SSD at the given grid voxels.

    For each grid point the model is the box-filtered expansion
    ``sum_j |U0(j) - U1(j + v0_j) - (v - v0_j)^T grad U1|^2 / |N|``; returns
    per-point (A, b, c) with cost ``v^T A v - 2 b^T v + c``.  U1 samples and
    gradients outside the volume are 0.
    """
    if u0.shape != u1.shape:
        raise ValueError("volumes must have the same shape")
    dims = u0.shape
    coords = np.stack(np.meshgrid(*[np.arange(d) for d in dims], indexing="ij"), axis=0).astype(float)
    warped = coords + np.moveaxis(v0_voxels, -1, 0)
    u1w = ndimage.map_coordinates(u1, warped, order=1, mode="constant", cval=0.0)
    grads_full = _central_gradient(u1)
    g = [ndimage.map_coordinates(gf, warped, order=1, mode="constant", cval=0.0)
         for gf in grads_full]
    outside = np.zeros(dims, dtype=bool)
    for a in range(3):
        outside |= (warped[a] < 0) | (warped[a] > dims[a] - 1)
    for a in range(3):
        g[a][outside] = 0.0
    u1w[outside] = 0.0

    r = u0 - u1w
    s = r + sum(g[a] * v0_voxels[..., a] for a in range(3))

    def box(f):
        return ndimage.uniform_filter(f, size=window, mode="constant", cval=0.0)

    gi, gj, gk = grid_idx[:, 0], grid_idx[:, 1], grid_idx[:, 2]
    a2 = np.zeros((len(grid_idx), 3, 3))
    a1 = np.zeros((len(grid_idx), 3))
    for a in range(3):
        for b in range(a, 3):
            f = box(g[a] * g[b])[gi, gj, gk]
            a2[:, a, b] = f
            a2[:, b, a] = f
        a1[:, a] = box(g[a] * s)[gi, gj, gk]
    a0 = box(s * s)[gi, gj, gk]
    return a2, a1, a0


# ---------------------------------------------------------------------------
# primal-dual inner loop

@dataclass
class LevelState:
    v: np.ndarray
    dual: DualState
    data: LinearDataModel | QuadDataModel


def _regularizer_energy(v: np.ndarray, spec: RegularizerSpec) -> float:
    g = gradient(v)
    e = 0.5 * float((g * g).sum())
    if spec.kind == "qrd_alpha":
        d = divergence(v)
        e += 0.5 * spec.alpha * float((d * d).sum())
    return e


def primal_dual_solve(
    state: LevelState, config: SolverConfig, spec: RegularizerSpec
) -> tuple[LevelState, dict]:
    """Runs config.inner_iterations of the primal/dual update pair.

    Steps tau = sigma = 1/sqrt(B) with the analytic operator-norm bound
    B = 12 (gradient only) or 24 (gradient plus divergence); the dual step
    uses the over-relaxed primal iterate 2 v_new - v_old.
    """
    bound = 24.0 if spec.uses_divergence else 12.0
    tau = sigma = 1.0 / math.sqrt(bound)
    v = state.v
    dual = state.dual
    e_first = state.data.energy(v) + _regularizer_energy(v, spec)
    for _ in range(config.inner_iterations):
        dty = gradient_adjoint(dual.y_grad)
        if dual.y_div is not None:
            dty += divergence_adjoint(dual.y_div)
        v_old = v
        v = state.data.prox(v - tau * dty, tau)
        v_bar = 2.0 * v - v_old
        y_grad = dual.y_grad + sigma * gradient(v_bar)
        y_div = dual.y_div + sigma * divergence(v_bar) if dual.y_div is not None else None
        dual = prox_dual_regularizer(DualState(y_grad, y_div), sigma, spec)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError("flow iterate is not finite")
    e_last = state.data.energy(v) + _regularizer_energy(v, spec)
    return LevelState(v, dual, state.data), {"energy_first": e_first, "energy_last": e_last}


# ---------------------------------------------------------------------------
# warping and resampling helpers

def sample_grid(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear sample of a grid (nx,ny,nz[,C]) at (n,3) grid-unit coords, clamped."""
    dims = values.shape[:3]
    c = np.atleast_2d(np.asarray(coords, dtype=float)).copy()
    for a in range(3):
        np.clip(c[:, a], 0.0, dims[a] - 1.0, out=c[:, a])
    i0 = np.minimum(np.floor(c).astype(np.int64), np.maximum(np.asarray(dims) - 2, 0))
    f = c - i0
    vdim = values.ndim > 3
    out = 0.0
    for dx in range(2):
        for dy in range(2):
            for dz in range(2):
                idx = (np.minimum(i0[:, 0] + dx, dims[0] - 1),
                       np.minimum(i0[:, 1] + dy, dims[1] - 1),
                       np.minimum(i0[:, 2] + dz, dims[2] - 1))
                w = ((f[:, 0] if dx else 1 - f[:, 0])
                     * (f[:, 1] if dy else 1 - f[:, 1])
                     * (f[:, 2] if dz else 1 - f[:, 2]))
                vals = values[idx]
                out = out + (vals * (w[:, None] if vdim else w))
    return out


def warp_and_rebuild(particles: ParticleSet, field: FlowField) -> ParticleIndex:
    """Move each particle by the trilinearly interpolated flow and rebuild its index."""
    if len(particles) == 0:
        return ParticleIndex(particles)
    coords = particles.positions / field.stride
    motion = sample_grid(field.vectors, coords)
    moved = ParticleSet(particles.positions + motion, particles.intensities.copy(),
                        particles.time_index)
    return ParticleIndex(moved)


def upsample_flow(field: FlowField, domain: Domain) -> np.ndarray:
    """Trilinear upsample of the grid flow to full voxel resolution (N,M,L,3)."""
    n, m, l = domain.extents
    gx, gy, gz = np.meshgrid(np.arange(n), np.arange(m), np.arange(l), indexing="ij")
    coords = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(float) / field.stride
    return sample_grid(field.vectors, coords).reshape(n, m, l, 3)


def _downsample_volume(u: np.ndarray, scale: float) -> np.ndarray:
    if scale >= 0.999:
        return np.asarray(u, dtype=float)
    sigma = 0.5 * math.sqrt(1.0 / (scale * scale) - 1.0)
    smoothed = ndimage.gaussian_filter(np.asarray(u, dtype=float), sigma, mode="nearest")
    return ndimage.zoom(smoothed, scale, order=1, grid_mode=False)


# ---------------------------------------------------------------------------
# coarse-to-fine driver

def _level_scales(config: SolverConfig) -> list[float]:
    return [config.pyramid_factor ** (config.pyramid_levels - 1 - i)
            for i in range(config.pyramid_levels)]


def _prolong(v_prev: np.ndarray, dims_new: tuple[int, int, int],
             ratio: float) -> np.ndarray:
    """Trilinear prolongation with magnitudes rescaled by the inter-level scale ratio.

    ``ratio = scale_new / scale_old``; a grid point g on the new level sits at
    the old-level grid coordinate g / ratio (both grids share the stride in
    their own scaled units).
    """
    axes = [np.arange(n) for n in dims_new]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(float)
    sampled = sample_grid(v_prev, pts / ratio)
    return (sampled * ratio).reshape(*dims_new, 3)


def solve_flow(
    t0: ParticleSet | np.ndarray,
    t1: ParticleSet | np.ndarray,
    domain: Domain,
    config: SolverConfig,
    spec: RegularizerSpec,
    layout: DescriptorLayout | None = None,
    collect_diagnostics: bool = False,
):
    """Coarse-to-fine flow estimation; returns a FlowField on the strided grid.

    Sparse data terms take two ParticleSets; the dense baseline takes two
    intensity volumes (or ParticleSets, which are splatted to volumes first).
    """
    lam = config.lam_resolved
    scales = _level_scales(config)
    diagnostics: list[dict] = []
    dense = config.data_term == "dense_ssd"

    if dense:
        u0 = t0 if isinstance(t0, np.ndarray) else particles_to_volume(t0, domain)
        u1 = t1 if isinstance(t1, np.ndarray) else particles_to_volume(t1, domain)
    else:
        if not isinstance(t0, ParticleSet) or not isinstance(t1, ParticleSet):
            raise ValueError("sparse data terms require ParticleSet inputs")
        if layout is None:
            from .descriptor import build_layout
            layout = build_layout()
        index0 = ParticleIndex(t0)
        index1 = ParticleIndex(t1)
        metric = "ssd" if config.data_term == "sparse_ssd" else "ncc"

    v = None
    prev_scale = None
    for scale in scales:
        if dense:
            u0_l = _downsample_volume(u0, scale)
            u1_l = _downsample_volume(u1, scale)
            dims = grid_dims(u0_l.shape, config.stride)
            axes = [np.arange(n) * config.stride for n in dims]
            gi, gj, gk = np.meshgrid(*axes, indexing="ij")
            np.clip(gi, 0, u0_l.shape[0] - 1, out=gi)
            np.clip(gj, 0, u0_l.shape[1] - 1, out=gj)
            np.clip(gk, 0, u0_l.shape[2] - 1, out=gk)
            grid_idx = np.stack([gi, gj, gk], axis=-1).reshape(-1, 3)
        else:
            dims = grid_dims(tuple(int(math.ceil(e * scale)) for e in domain.extents),
                             config.stride)
            axes = [np.arange(n) * config.stride for n in dims]
            gx, gy, gz = np.meshgrid(*axes, indexing="ij")
            grid_scaled = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3).astype(float)

        if v is None:
            v = np.zeros((*dims, 3))
        else:
            v = _prolong(v, dims, scale / prev_scale)
        dual = DualState.zeros(dims, spec)

        for _ in range(config.warps_per_level):
            if dense:
                vox_dims = u0_l.shape
                vx, vy, vz = np.meshgrid(*[np.arange(d) for d in vox_dims], indexing="ij")
                vox_coords = np.stack([vx, vy, vz], axis=-1).reshape(-1, 3).astype(float)
                v0_vox = sample_grid(v, vox_coords / config.stride).reshape(*vox_dims, 3)
                a2, a1, a0 = dense_ssd_linearize(u0_l, u1_l, v0_vox, config.window, grid_idx)
                data = QuadDataModel(lam, a2.reshape(*dims, 3, 3),
                                     a1.reshape(*dims, 3), a0.reshape(dims))
            else:
                data = _linearize_sparse_level(
                    grid_scaled, v.reshape(-1, 3), index0, index1, layout,
                    metric, config.fd_probe_h, scale, lam, config.chunk, dims)
            state, diag = primal_dual_solve(LevelState(v, dual, data), config, spec)
            v, dual = state.v, state.dual
            if collect_diagnostics:
                diag["scale"] = scale
                diagnostics.append(diag)
        prev_scale = scale

    field = FlowField(v, config.stride)
    if collect_diagnostics:
        return field, diagnostics
    return field

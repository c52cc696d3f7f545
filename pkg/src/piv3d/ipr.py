"""Energy-based iterative particle reconstruction.

Alternates two phases: candidate generation from residual images (2D peaks,
epipolar pairing, multi-view least-squares triangulation) and inertial
proximal minimization of

    E = sum_k sum_pixels (I_k - rendered blobs)^2  +  eta * ||c||_0  (c >= 0)

over particle positions and intensities.  The sparsity prox deletes
particles whose intensity falls below sqrt(2*eta/L_c); deleted particles
stay deleted for the remainder of the call.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .errors import NonFiniteError
from .geometry import (
    CameraModel,
    Domain,
    ParticleSet,
    bilinear_sample,
    gaussian_blob_patches,
    project,
    render_particles,
)

__all__ = [
    "IprConfig", "IprState", "Candidates",
    "residual_images", "detect_peaks_2d", "triangulate_candidates",
    "init_intensity", "energy_data", "prox_sparsity",
    "ipalm_minimize", "ipr_reconstruct",
]

_DESCENT_SLACK = 1e-9
_MAX_BACKTRACKS = 80


def default_epsilon_schedule(n: int = 24, lo: float = 0.8, hi: float = 2.0) -> tuple[float, ...]:
    return tuple(np.linspace(lo, hi, n))


@dataclass
class IprConfig:
    eta: float = 0.02
    sigma: float = 1.0
    theta: float = 0.04
    epsilon_schedule: tuple[float, ...] = field(default_factory=default_epsilon_schedule)
    n_inner: int = 40
    tau_inertia: float = 1.0 / math.sqrt(2.0)
    dedup_radius: float = 0.5

    def __post_init__(self) -> None:
        eps = tuple(float(e) for e in self.epsilon_schedule)
        if any(e <= 0 for e in eps) or any(b < a for a, b in zip(eps, eps[1:])):
            raise ValueError("epsilon_schedule must be positive and nondecreasing")
        if min(self.eta, self.sigma, self.theta) <= 0 or self.n_inner < 1:
            raise ValueError("invalid IPR configuration")
        self.epsilon_schedule = eps


@dataclass
class IprState:
    """Optimization state: particle blocks plus inertia history and step estimates."""

    positions: np.ndarray           # (Q, 3)
    intensities: np.ndarray         # (Q,)
    prev_positions: np.ndarray
    prev_intensities: np.ndarray
    alive: np.ndarray               # (Q,) bool; dead entries are pinned at c = 0
    lip_p: float = 1.0
    lip_c: float = 1.0

    @classmethod
    def empty(cls) -> "IprState":
        z3 = np.zeros((0, 3))
        z1 = np.zeros(0)
        return cls(z3, z1, z3.copy(), z1.copy(), np.zeros(0, dtype=bool))

    @classmethod
    def from_particles(cls, particles: ParticleSet) -> "IprState":
        p = particles.positions.astype(float).copy()
        c = particles.intensities.astype(float).copy()
        return cls(p, c, p.copy(), c.copy(), c > 0)

    def __len__(self) -> int:
        return len(self.intensities)

    def n_alive(self) -> int:
        return int(self.alive.sum())

    def add_particles(self, positions: np.ndarray, intensities: np.ndarray) -> None:
        """Append new candidates with zero inertial momentum."""
        positions = np.atleast_2d(positions)
        self.positions = np.vstack([self.positions, positions])
        self.intensities = np.concatenate([self.intensities, intensities])
        self.prev_positions = np.vstack([self.prev_positions, positions])
        self.prev_intensities = np.concatenate([self.prev_intensities, intensities])
        self.alive = np.concatenate([self.alive, intensities > 0])

    def compact(self) -> "IprState":
        """Drop deleted particles from the vector layout."""
        m = self.alive
        return IprState(self.positions[m], self.intensities[m],
                        self.prev_positions[m], self.prev_intensities[m],
                        np.ones(int(m.sum()), dtype=bool), self.lip_p, self.lip_c)

    def to_particles(self, time_index: int = 0) -> ParticleSet:
        m = self.alive & (self.intensities > 0)
        return ParticleSet(self.positions[m], self.intensities[m], time_index)


def residual_images(
    images: list[np.ndarray],
    particles: ParticleSet,
    cameras: list[CameraModel],
    sigma: float,
) -> list[np.ndarray]:
    """Observed minus rendered, not clamped (ghost particles leave negative dips)."""
    return [img - render_particles(particles, cam, sigma)
            for img, cam in zip(images, cameras)]


def detect_peaks_2d(image: np.ndarray, theta: float) -> np.ndarray:
    """Strict 8-neighborhood maxima above theta, refined per axis like extract_peaks.

    Returns sub-pixel peak coordinates as an (n, 2) array of (x, y).
    """
    from scipy.ndimage import maximum_filter

    from .mart import three_point_peak_fit

    img = np.asarray(image, dtype=float)
    h, w = img.shape
    footmax = maximum_filter(img, size=3, mode="constant", cval=-np.inf)
    cand = np.argwhere((img >= footmax) & (img > theta))
    peaks = []
    for y, x in cand:
        v0 = img[y, x]
        strict = True
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == dy == 0:
                    continue
                ny, nx = y + dy, x + dx
                if 0 <= ny < h and 0 <= nx < w and img[ny, nx] >= v0:
                    strict = False
                    break
            if not strict:
                break
        if not strict:
            continue
        sx = sy = 0.0
        if 0 < x < w - 1:
            sx, _ = three_point_peak_fit(img[y, x - 1], v0, img[y, x + 1])
        if 0 < y < h - 1:
            sy, _ = three_point_peak_fit(img[y - 1, x], v0, img[y + 1, x])
        peaks.append((x + sx, y + sy))
    return np.asarray(peaks, dtype=float).reshape(-1, 2)


class Candidates(NamedTuple):
    """Triangulated candidate particles; m counts accepted candidates per reference peak."""

    positions: np.ndarray  # (n, 3)
    m: np.ndarray          # (n,) int
    ref: np.ndarray        # (n,) index of the camera-1 peak

    def __len__(self) -> int:
        return len(self.m)


def _clip_rays_to_domain(
    camera: CameraModel, pixels: np.ndarray, domain: Domain
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized entry/exit of the back-projected rays; returns (entry, exit, hit mask)."""
    d = camera.ray_direction()
    p0 = (pixels - camera.offset) @ camera.pixel_backproject().T
    n = len(pixels)
    t_lo = np.full(n, -np.inf)
    t_hi = np.full(n, np.inf)
    hit = np.ones(n, dtype=bool)
    for ax in range(3):
        ext = domain.extents[ax]
        if abs(d[ax]) < 1e-300:
            hit &= (p0[:, ax] >= 0.0) & (p0[:, ax] <= ext)
            continue
        t0 = (0.0 - p0[:, ax]) / d[ax]
        t1 = (ext - p0[:, ax]) / d[ax]
        lo = np.minimum(t0, t1)
        hi = np.maximum(t0, t1)
        t_lo = np.maximum(t_lo, lo)
        t_hi = np.minimum(t_hi, hi)
    hit &= t_lo <= t_hi
    entry = p0 + t_lo[:, None] * d
    exit_ = p0 + t_hi[:, None] * d
    return entry, exit_, hit


def triangulate_candidates(
    peaks_per_camera: list[np.ndarray],
    cameras: list[CameraModel],
    domain: Domain,
    epsilon: float,
) -> Candidates:
    """Candidate particles from peak constellations with reprojection error < epsilon.

    For every camera-1 peak, the domain-clipped ray projects to an epipolar
    segment in camera 2; each nearby peak forms a two-view hypothesis, which
    is completed with the nearest peak (within a 2*epsilon gate) in every
    further view, triangulated by least squares over all views and accepted
    only if the reprojection error is below epsilon everywhere.
    """
    if len(cameras) < 2:
        raise ValueError("triangulation needs at least two cameras")
    empty = Candidates(np.zeros((0, 3)), np.zeros(0, dtype=int), np.zeros(0, dtype=int))
    peaks = [np.atleast_2d(np.asarray(p, dtype=float)).reshape(-1, 2) for p in peaks_per_camera]
    if any(len(p) == 0 for p in peaks):
        return empty

    entry, exit_, hit = _clip_rays_to_domain(cameras[0], peaks[0], domain)
    if not np.any(hit):
        return empty

    cam2 = cameras[1]
    a = project(cam2, entry)
    b = project(cam2, exit_)
    seg = b - a
    seg_len2 = np.maximum((seg ** 2).sum(axis=1), 1e-30)
    p2 = peaks[1]

    ref_list = []
    p2_list = []
    chunk = 512
    for lo in range(0, len(a), chunk):
        hi_ = min(lo + chunk, len(a))
        diff = p2[None, :, :] - a[lo:hi_, None, :]
        t = (diff * seg[lo:hi_, None, :]).sum(axis=2) / seg_len2[lo:hi_, None]
        np.clip(t, 0.0, 1.0, out=t)
        closest = a[lo:hi_, None, :] + t[:, :, None] * seg[lo:hi_, None, :]
        dist = np.sqrt(((p2[None, :, :] - closest) ** 2).sum(axis=2))
        ri, pj = np.nonzero((dist < epsilon) & hit[lo:hi_, None])
        ref_list.append(ri + lo)
        p2_list.append(pj)
    ref = np.concatenate(ref_list)
    idx2 = np.concatenate(p2_list)
    if len(ref) == 0:
        return empty

    lin1, off1 = cameras[0].linear, cameras[0].offset
    lin2, off2 = cam2.linear, cam2.offset
    pinv2 = np.linalg.pinv(np.vstack([lin1, lin2]))
    rhs2 = np.hstack([peaks[0][ref] - off1, p2[idx2] - off2])
    x2 = rhs2 @ pinv2.T

    chosen = [ref, idx2]
    keep = np.ones(len(ref), dtype=bool)
    for cam_i in range(2, len(cameras)):
        cam = cameras[cam_i]
        proj = project(cam, x2)
        tree = cKDTree(peaks[cam_i])
        dist, idx = tree.query(proj, k=1, distance_upper_bound=2.0 * epsilon)
        keep &= np.isfinite(dist)
        chosen.append(np.where(np.isfinite(dist), idx, 0))
    if not np.any(keep):
        return empty
    chosen = [c[keep] for c in chosen]
    ref = chosen[0]
    x2 = x2[keep]

    mats = np.vstack([cam.linear for cam in cameras])
    pinv_all = np.linalg.pinv(mats)
    rhs = np.hstack([
        peaks[k][chosen[k]] - cameras[k].offset for k in range(len(cameras))
    ])
    x_full = rhs @ pinv_all.T

    max_err = np.zeros(len(x_full))
    for k, cam in enumerate(cameras):
        reproj = project(cam, x_full)
        err = np.sqrt(((reproj - peaks[k][chosen[k]]) ** 2).sum(axis=1))
        max_err = np.maximum(max_err, err)
    ok = max_err < epsilon
    if not np.any(ok):
        return empty
    ref = ref[ok]
    x_full = x_full[ok]
    counts = np.bincount(ref, minlength=len(peaks[0]))
    return Candidates(x_full, counts[ref].astype(int), ref.astype(int))


def init_intensity(reference_intensity: float, n_cameras: int, m: int) -> float:
    """Initial candidate intensity I * K / (K - 1 + m)."""
    if n_cameras < 1 or m < 1:
        raise ValueError("need n_cameras >= 1 and m >= 1")
    return reference_intensity * n_cameras / (n_cameras - 1 + m)


def prox_sparsity(c_bar: np.ndarray | float, t: float, eta: float) -> np.ndarray | float:
    """Closed-form prox of eta*|c|_0 + nonnegativity: zero iff t*c^2 < 2*eta or c < 0."""
    if t <= 0 or eta <= 0:
        raise ValueError("t and eta must be positive")
    c = np.asarray(c_bar, dtype=float)
    out = np.where((t * c * c < 2.0 * eta) | (c < 0.0), 0.0, c)
    if np.isscalar(c_bar):
        return float(out)
    return out


def _forward(
    positions: np.ndarray,
    intensities: np.ndarray,
    images: list[np.ndarray],
    cameras: list[CameraModel],
    sigma: float,
    want_grad: bool,
) -> tuple[float, np.ndarray | None, np.ndarray | None]:
    """Data energy and (optionally) analytic gradients through the blob model."""
    q = len(intensities)
    energy = 0.0
    grad_p = np.zeros((q, 3)) if want_grad else None
    grad_c = np.zeros(q) if want_grad else None
    inv_s2 = 1.0 / (sigma * sigma)
    for img, cam in zip(images, cameras):
        h, w = img.shape
        if q == 0:
            energy += float((img * img).sum())
            continue
        mu = project(cam, positions)
        px, py, g, dx, dy = gaussian_blob_patches(mu, sigma, w, h)
        vals = intensities[:, None, None] * g
        flat = np.clip(py, 0, h - 1) * w + np.clip(px, 0, w - 1)
        pred = np.bincount(flat.ravel(), weights=vals.ravel(), minlength=h * w)
        res_flat = img.ravel() - pred
        energy += float(res_flat @ res_flat)
        if want_grad:
            rp = res_flat[flat] * g  # residual gathered on each blob's support
            grad_c += -2.0 * rp.sum(axis=(1, 2))
            sx = (rp * dx).sum(axis=(1, 2))
            sy = (rp * dy).sum(axis=(1, 2))
            grad_mu = (-4.0 * inv_s2) * intensities[:, None] * np.stack([sx, sy], axis=1)
            grad_p += grad_mu @ cam.linear
    if not np.isfinite(energy):
        raise NonFiniteError("IPR data energy is not finite")
    if want_grad and not (np.all(np.isfinite(grad_p)) and np.all(np.isfinite(grad_c))):
        raise NonFiniteError("IPR gradient is not finite")
    return energy, grad_p, grad_c


def energy_data(
    state: IprState,
    images: list[np.ndarray],
    cameras: list[CameraModel],
    sigma: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Data energy with gradients w.r.t. positions and intensities (dead entries zeroed)."""
    e, gp, gc = _forward(state.positions, np.where(state.alive, state.intensities, 0.0),
                         images, cameras, sigma, want_grad=True)
    gp[~state.alive] = 0.0
    gc[~state.alive] = 0.0
    return e, gp, gc


def _descent_ok(e_new: float, e_base: float, inner: float, step_sq: float, lip: float) -> bool:
    rhs = e_base + inner + 0.5 * lip * step_sq
    return e_new <= rhs + _DESCENT_SLACK * (1.0 + abs(rhs))


def ipalm_minimize(
    state: IprState,
    images: list[np.ndarray],
    cameras: list[CameraModel],
    config: IprConfig,
) -> IprState:
    """Inertial proximal alternating minimization over (positions, intensities).

    Each block takes an inertial extrapolation, an explicit gradient step with
    step size 1/L, a prox on the intensity block, and doubles L until the
    descent lemma holds; L is halved once after each accepted step.  Particles
    zeroed by the prox leave the active set permanently and are compacted out
    of the returned state.
    """
    if len(state) == 0:
        return state
    sigma = config.sigma
    tau = config.tau_inertia
    pos = state.positions.copy()
    its = np.where(state.alive, state.intensities, 0.0)
    pos_prev = state.prev_positions.copy()
    its_prev = np.where(state.alive, state.prev_intensities, 0.0)
    alive = state.alive.copy()
    lip_p, lip_c = state.lip_p, state.lip_c

    def energy_only(p, c):
        e, _, _ = _forward(p, c, images, cameras, sigma, want_grad=False)
        return e

    for _ in range(config.n_inner):
        # positions block
        p_hat = pos + tau * (pos - pos_prev)
        e_hat, g_p, _ = _forward(p_hat, its, images, cameras, sigma, want_grad=True)
        g_p[~alive] = 0.0
        for _bt in range(_MAX_BACKTRACKS):
            p_new = p_hat - g_p / lip_p
            e_new = energy_only(p_new, its)
            delta = p_new - p_hat
            if _descent_ok(e_new, e_hat, float((g_p * delta).sum()),
                           float((delta * delta).sum()), lip_p):
                break
            lip_p *= 2.0
        else:
            raise NonFiniteError("position backtracking failed to satisfy the descent lemma")
        pos_prev, pos = pos, p_new
        lip_p = max(0.5 * lip_p, 1e-6)

        # intensities block
        c_hat = its + tau * (its - its_prev)
        c_hat[~alive] = 0.0
        e_hat_c, _, g_c = _forward(pos, c_hat, images, cameras, sigma, want_grad=True)
        g_c[~alive] = 0.0
        for _bt in range(_MAX_BACKTRACKS):
            c_bar = c_hat - g_c / lip_c
            c_new = prox_sparsity(c_bar, lip_c, config.eta)
            c_new[~alive] = 0.0
            e_new = energy_only(pos, c_new)
            delta = c_new - c_hat
            if _descent_ok(e_new, e_hat_c, float((g_c * delta).sum()),
                           float((delta * delta).sum()), lip_c):
                break
            lip_c *= 2.0
        else:
            raise NonFiniteError("intensity backtracking failed to satisfy the descent lemma")
        its_prev, its = its, c_new
        lip_c = max(0.5 * lip_c, 1e-6)
        alive &= its > 0.0  # deletions are permanent within this call

    out = IprState(pos, its, pos_prev, its_prev, alive, lip_p, lip_c)
    return out.compact()


def _sequential_dedup(positions: np.ndarray, keep: np.ndarray, radius: float) -> np.ndarray:
    """Indices of candidates at least `radius` away from every earlier accepted one."""
    accepted: list[int] = []
    for i in np.flatnonzero(keep):
        if accepted:
            d2 = ((positions[accepted] - positions[i]) ** 2).sum(axis=1)
            if d2.min() < radius * radius:
                continue
        accepted.append(i)
    return np.asarray(accepted, dtype=int)


def ipr_reconstruct(
    images: list[np.ndarray],
    cameras: list[CameraModel],
    domain: Domain,
    config: IprConfig,
    return_log: bool = False,
):
    """Full reconstruction: alternate candidate generation and energy minimization."""
    if len(cameras) < 2:
        raise ValueError("IPR needs at least two cameras")
    state = IprState.empty()
    log = []
    for it, eps in enumerate(config.epsilon_schedule):
        current = state.to_particles()
        residuals = residual_images(images, current, cameras, config.sigma)
        peaks = [detect_peaks_2d(res, config.theta) for res in residuals]
        cands = triangulate_candidates(peaks, cameras, domain, eps)
        n_new = 0
        if len(cands):
            proj1 = project(cameras[0], cands.positions)
            ref_val = bilinear_sample(residuals[0], proj1[:, 0], proj1[:, 1])
            c0 = ref_val * len(cameras) / (len(cameras) - 1 + cands.m)
            good = c0 > 0
            new_pos = cands.positions[good]
            new_c = c0[good]
            if len(new_pos):
                keep = np.ones(len(new_pos), dtype=bool)
                if state.n_alive():
                    tree = cKDTree(state.positions[state.alive])
                    d, _ = tree.query(new_pos, k=1)
                    keep &= d >= config.dedup_radius
                accepted = _sequential_dedup(new_pos, keep, config.dedup_radius)
                if len(accepted):
                    state.add_particles(new_pos[accepted], new_c[accepted])
                    n_new = len(accepted)
        state = ipalm_minimize(state, images, cameras, config)
        if return_log:
            e, _, _ = _forward(state.positions, state.intensities, images, cameras,
                               config.sigma, want_grad=False)
            log.append({
                "iteration": it,
                "epsilon": float(eps),
                "n_candidates": int(n_new),
                "n_particles": len(state),
                "energy": float(e),
                "lip_p": float(state.lip_p),
                "lip_c": float(state.lip_c),
            })
    particles = state.to_particles()
    if return_log:
        return particles, log
    return particles

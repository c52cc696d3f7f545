"""Evaluation metrics: endpoint error, particle matching statistics, slice export."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import DimensionMismatchError
from .flow import FlowField
from .geometry import ParticleSet

__all__ = ["ReconStats", "aee", "match_particles", "export_slice", "rms_divergence"]


@dataclass
class ReconStats:
    """Reconstruction quality relative to ground truth.

    Fractions are relative to the ground-truth particle count, so the ghost
    fraction can exceed 1 when a method hallucinates more particles than
    exist.
    """

    n_truth: int
    n_reconstructed: int
    undetected: int
    ghosts: int
    avg_position_error: float

    @property
    def undetected_fraction(self) -> float:
        return self.undetected / self.n_truth if self.n_truth else 0.0

    @property
    def ghost_fraction(self) -> float:
        return self.ghosts / self.n_truth if self.n_truth else 0.0

    @property
    def matched(self) -> int:
        return self.n_reconstructed - self.ghosts

    def to_dict(self) -> dict:
        return {
            "n_truth": self.n_truth,
            "n_reconstructed": self.n_reconstructed,
            "undetected": self.undetected,
            "undetected_fraction": self.undetected_fraction,
            "ghosts": self.ghosts,
            "ghost_fraction": self.ghost_fraction,
            "avg_position_error": self.avg_position_error,
        }


def aee(estimated: np.ndarray | FlowField, truth: np.ndarray | FlowField) -> float:
    """Mean Euclidean distance between estimated and true displacement vectors."""
    est = estimated.vectors if isinstance(estimated, FlowField) else np.asarray(estimated)
    tru = truth.vectors if isinstance(truth, FlowField) else np.asarray(truth)
    if est.shape != tru.shape:
        raise DimensionMismatchError(f"flow shapes differ: {est.shape} vs {tru.shape}")
    d = est - tru
    return float(np.sqrt((d * d).sum(axis=-1)).mean())


def match_particles(
    reconstructed: ParticleSet, truth: ParticleSet, radius: float = 2.0
) -> ReconStats:
    """Greedy nearest-first one-to-one matching within the given radius.

    Unmatched reconstructed particles are ghosts; unmatched truth particles
    are undetected.  Ties in distance are broken by smallest index.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    n_rec, n_tru = len(reconstructed), len(truth)
    if n_rec == 0 or n_tru == 0:
        return ReconStats(n_tru, n_rec, n_tru, n_rec, 0.0)
    tree_r = cKDTree(reconstructed.positions)
    tree_t = cKDTree(truth.positions)
    pairs = tree_r.sparse_distance_matrix(tree_t, radius, output_type="coo_matrix")
    order = np.lexsort((pairs.col, pairs.row, pairs.data))
    rec_used = np.zeros(n_rec, dtype=bool)
    tru_used = np.zeros(n_tru, dtype=bool)
    dist_sum = 0.0
    matched = 0
    for k in order:
        i, j = pairs.row[k], pairs.col[k]
        if rec_used[i] or tru_used[j]:
            continue
        if pairs.data[k] >= radius:
            continue
        rec_used[i] = True
        tru_used[j] = True
        dist_sum += pairs.data[k]
        matched += 1
    ghosts = n_rec - matched
    undetected = n_tru - matched
    avg = dist_sum / matched if matched else 0.0
    return ReconStats(n_tru, n_rec, undetected, ghosts, avg)


def export_slice(field: FlowField, index: int, component: str, axis: str = "z") -> np.ndarray:
    """2D xy-slice of one flow component at grid z-index; rows are y."""
    if axis != "z":
        raise ValueError("only z slices are supported")
    comp = {"x": 0, "y": 1, "z": 2}.get(component)
    if comp is None:
        raise ValueError(f"unknown component {component!r}")
    nz = field.dims[2]
    if not (0 <= index < nz):
        raise IndexError(f"slice index {index} out of range [0, {nz})")
    return field.vectors[:, :, index, comp].T.copy()


def rms_divergence(field: FlowField) -> float:
    """Root-mean-square central-difference divergence over interior grid points."""
    v = field.vectors
    if min(v.shape[:3]) < 3:
        return 0.0
    div = np.zeros(tuple(n - 2 for n in v.shape[:3]))
    h = 2.0 * field.stride
    div += (v[2:, 1:-1, 1:-1, 0] - v[:-2, 1:-1, 1:-1, 0]) / h
    div += (v[1:-1, 2:, 1:-1, 1] - v[1:-1, :-2, 1:-1, 1]) / h
    div += (v[1:-1, 1:-1, 2:, 2] - v[1:-1, 1:-1, :-2, 2]) / h
    return float(np.sqrt((div * div).mean()))

"""piv3d: 3D particle imaging velocimetry toolkit.

Reconstructs sparse tracer particles from synchronized multi-camera images
(tomographic MART baseline and an energy-based iterative particle
reconstruction), summarizes local particle constellations in a compact
331-dimensional spherical descriptor, and estimates a dense, physically
regularized 3D motion field by convex primal-dual optimization.  Ships with
a synthetic scene generator and an evaluation harness.
"""

from .errors import DimensionMismatchError, NoIntersectionError, NonFiniteError, Piv3dError
from .geometry import CameraModel, Domain, Particle, ParticleSet

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "Domain", "Particle", "ParticleSet",
    "Piv3dError", "NoIntersectionError", "DimensionMismatchError", "NonFiniteError",
    "__version__",
]
